"""Kernel performance model anchored to measured operating points.

Per kernel we carry measured (IPS at the reference frequency, MPKI)
anchors over a grid of AMD values; between anchors both curves are
piecewise-linear in AMD, outside the grid they extrapolate flat.  At the
exact reference frequency the anchor value is returned untouched.

Frequency scaling splits time-per-instruction into a compute part that
stretches with 1/f and a memory-stall part that does not:

    T(f) = (1 - m) * T_ref * (f_ref / f) + m * T_ref,
    m = clip(beta_mem * MPKI, 0, m_max)

so memory-bound kernels (high MPKI) gain less from frequency.

Migration cold start: for j epochs after a migration, IPS is scaled by
1 - drop * exp(-j / tau) and MPKI inflated by 1 + gain * exp(-j / tau)
while the private cache refills.  A huge j (WARM) disables both.
"""

import csv
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

KERNELS = ("embedding", "attention", "ffn", "lm_head")

# epochs-since-migration value meaning "never migrated / fully warm"
WARM = 10 ** 9


def _load_anchor_csv(fh):
    grid = {}
    for row in csv.DictReader(fh):
        k = row["kernel"].strip()
        grid.setdefault(k, []).append(
            (float(row["amd"]), float(row["ips_3ghz"]), float(row["mpki"])))
    out = {}
    for k, rows in grid.items():
        rows.sort()
        amd = np.array([r[0] for r in rows])
        if len(amd) < 2 or np.any(np.diff(amd) <= 0):
            raise ValueError(f"kernel {k}: need >= 2 strictly increasing AMD anchors")
        out[k] = (amd, np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))
    return out


@dataclass
class KernelProfile:
    """Anchored IPS/MPKI curves plus frequency and warmup scaling knobs."""

    anchors: dict = field(default_factory=dict)  # kernel -> (amd, ips_ref, mpki)
    f_ref_ghz: float = 3.0
    beta_mem: float = 0.02       # stall fraction per MPKI
    m_max: float = 0.9
    cold_ips_drop: float = 0.25
    cold_mpki_gain: float = 1.0
    warmup_tau_epochs: float = 3.0

    @classmethod
    def load(cls, path=None, **kwargs) -> "KernelProfile":
        """Load anchors from a CSV (kernel, amd, ips_3ghz, mpki); default table ships
        with the package."""
        if path is None:
            ref = resources.files("stacksched").joinpath("data/kernel_anchors.csv")
            with ref.open("r") as fh:
                anchors = _load_anchor_csv(fh)
        else:
            with open(path) as fh:
                anchors = _load_anchor_csv(fh)
        return cls(anchors=anchors, **kwargs)

    def kernels(self) -> tuple:
        return tuple(self.anchors.keys())

    def _anchors(self, kernel: str):
        try:
            return self.anchors[kernel]
        except KeyError:
            raise ValueError(f"unknown kernel {kernel!r}, have {sorted(self.anchors)}")

    def ips_ref(self, kernel: str, amd: float) -> float:
        """IPS at the reference frequency; exact at anchor AMDs, flat outside."""
        grid, ips, _ = self._anchors(kernel)
        hit = np.nonzero(grid == amd)[0]
        if hit.size:
            return float(ips[hit[0]])
        return float(np.interp(amd, grid, ips))

    def mpki(self, kernel: str, amd: float) -> float:
        grid, _, mp = self._anchors(kernel)
        hit = np.nonzero(grid == amd)[0]
        if hit.size:
            return float(mp[hit[0]])
        return float(np.interp(amd, grid, mp))

    def stall_fraction(self, kernel: str, amd: float) -> float:
        return float(np.clip(self.beta_mem * self.mpki(kernel, amd), 0.0, self.m_max))

    def ips_at(self, kernel: str, amd: float, f_ghz: float,
               model_scale: float = 1.0) -> float:
        """Steady-state IPS at an arbitrary frequency."""
        if f_ghz <= 0:
            raise ValueError(f"frequency must be positive, got {f_ghz}")
        base = self.ips_ref(kernel, amd) * model_scale
        if f_ghz == self.f_ref_ghz:
            return base  # anchor fidelity: no roundtrip through 1/T
        m = self.stall_fraction(kernel, amd)
        slowdown = (1.0 - m) * (self.f_ref_ghz / f_ghz) + m
        return base / slowdown

    def cold_start_factor(self, epochs_since_migration: int) -> float:
        """IPS multiplier during cache refill; 1 - drop at j=0, -> 1 warm."""
        if epochs_since_migration < 0:
            raise ValueError("epochs_since_migration must be >= 0")
        return 1.0 - self.cold_ips_drop * np.exp(
            -epochs_since_migration / self.warmup_tau_epochs)

    def observe(self, kernel: str, amd: float, f_ghz: float,
                epochs_since_migration: int = WARM,
                model_scale: float = 1.0) -> tuple[float, float]:
        """(IPS, MPKI) as a performance counter would report them this epoch."""
        decay = np.exp(-epochs_since_migration / self.warmup_tau_epochs)
        ips = self.ips_at(kernel, amd, f_ghz, model_scale) * \
            (1.0 - self.cold_ips_drop * decay)
        mpki = self.mpki(kernel, amd) * (1.0 + self.cold_mpki_gain * decay)
        return float(ips), float(mpki)
