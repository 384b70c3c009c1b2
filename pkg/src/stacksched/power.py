"""DVFS power model and transient-safe power budgeting.

Per-core power is dynamic switching power plus temperature-dependent
leakage: P = c_eff * V^2 * f * activity + p_leak0 * exp(gamma*(T - T_ref)).
c_eff is derived so the top V/f level dissipates a target dynamic power
at full activity.  Idle cores draw nothing.

The epoch budget is the largest uniform per-active-core power s such that
one implicit-Euler thermal step stays at or below the threshold.  The
step is affine in s, so the peak is piecewise-affine increasing and a
bisection on [0, s_max] brackets it; the safe (low) side is returned.
"""

from dataclasses import dataclass, field

import numpy as np

from .thermal import ThermalNetwork


@dataclass(frozen=True)
class VfLevel:
    f_ghz: float
    v_volt: float


DEFAULT_VF_TABLE = (
    VfLevel(1.0, 0.7),
    VfLevel(1.5, 0.8),
    VfLevel(2.0, 0.9),
    VfLevel(2.5, 1.0),
    VfLevel(3.0, 1.1),
)


@dataclass(frozen=True)
class PowerParams:
    vf_table: tuple[VfLevel, ...] = DEFAULT_VF_TABLE
    dynamic_top_w: float = 4.5       # dynamic power at the top level, activity 1
    p_leak0_w: float = 0.3
    gamma_per_c: float = 0.02
    t_ref_c: float = 45.0
    s_max_w: float = 10.0
    budget_tol_w: float = 1e-3
    c_eff: float = field(init=False)

    def __post_init__(self):
        if not self.vf_table:
            raise ValueError("vf_table must not be empty")
        top = max(self.vf_table, key=lambda l: l.f_ghz)
        object.__setattr__(
            self, "c_eff", self.dynamic_top_w / (top.v_volt ** 2 * top.f_ghz))

    @property
    def f_max_ghz(self) -> float:
        return max(l.f_ghz for l in self.vf_table)

    @property
    def lowest(self) -> VfLevel:
        return min(self.vf_table, key=lambda l: l.f_ghz)


def core_power(params: PowerParams, level: VfLevel, temp_c: float,
               activity: float = 1.0) -> float:
    """Power draw of an active core at a V/f level and temperature."""
    if not 0.0 <= activity <= 1.0:
        raise ValueError(f"activity must be in [0, 1], got {activity}")
    dyn = params.c_eff * level.v_volt ** 2 * level.f_ghz * activity
    leak = params.p_leak0_w * np.exp(params.gamma_per_c * (temp_c - params.t_ref_c))
    return float(dyn + leak)


def select_vf(params: PowerParams, budget_w: float, temp_c: float,
              activity: float = 1.0) -> VfLevel:
    """Highest V/f level fitting the budget; the lowest level is the floor."""
    for level in sorted(params.vf_table, key=lambda l: -l.f_ghz):
        if core_power(params, level, temp_c, activity) <= budget_w:
            return level
    return params.lowest


def compute_power_budget(net: ThermalNetwork, temps: np.ndarray,
                         active: np.ndarray, t_th: float, dt: float,
                         params: PowerParams) -> tuple[float, bool]:
    """Uniform per-active-core budget keeping the next step at or below t_th.

    Returns (budget_w, emergency).  emergency is set when even zero power
    leaves the predicted peak above threshold (the chip must ride the
    V/f floor and wait out the transient).
    """
    mask = np.asarray(active, dtype=float)
    if mask.shape != (net.topo.n_cores,):
        raise ValueError("active mask length must equal core count")
    if not mask.any():
        return params.s_max_w, False
    base = net.transient_step(temps, np.zeros_like(mask), dt)
    gain = net.step_sensitivity(dt) @ mask  # dT'/ds per node, all >= 0

    def peak_at(s):
        return float(np.max(base + s * gain))

    if peak_at(0.0) > t_th:
        return 0.0, True
    if peak_at(params.s_max_w) <= t_th:
        return params.s_max_w, False
    lo, hi = 0.0, params.s_max_w
    while hi - lo > params.budget_tol_w:
        mid = 0.5 * (lo + hi)
        if peak_at(mid) <= t_th:
            lo = mid
        else:
            hi = mid
    return lo, False
