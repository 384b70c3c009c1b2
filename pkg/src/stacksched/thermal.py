"""Lumped RC thermal network over the core grid.

One thermal node per core.  Lateral neighbors couple through g_lat,
vertical neighbors through g_vert, and every top-layer node sees ambient
through a heat-sink conductance g_sink.  With all conductances positive
the conductance matrix G is a symmetric M-matrix (strictly diagonally
dominant on the top layer), hence positive definite with an elementwise
nonnegative inverse: more power can never cool any node.

Temperatures are handled relative to ambient: steady state solves
G (T - T_amb) = P, and the transient update is one implicit-Euler step
(C/dt + G)(T' - T_amb) = (C/dt)(T - T_amb) + P.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .arch import ChipTopology
from .errors import CalibrationError, ConfigurationError


@dataclass
class ThermalNetwork:
    topo: ChipTopology
    g_lat: float = 2.0
    g_vert: float = 5.0
    g_sink: float = 2.5
    cap: float = 0.05
    t_amb: float = 45.0
    _g: np.ndarray = field(init=False, repr=False)
    _g_chol: tuple = field(init=False, repr=False, default=None)
    _step_cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if min(self.g_lat, self.g_vert, self.g_sink) <= 0:
            raise ConfigurationError("conductances must be positive")
        if self.cap <= 0:
            raise ConfigurationError("heat capacity must be positive")
        self._g = self._build_g()

    def _build_g(self) -> np.ndarray:
        topo = self.topo
        n = topo.n_cores
        g = np.zeros((n, n))
        for a in range(n):
            za = topo.coords(a)[2]
            for b in topo.neighbors(a):
                if b < a:
                    continue
                cond = self.g_vert if topo.coords(b)[2] != za else self.g_lat
                g[a, b] -= cond
                g[b, a] -= cond
                g[a, a] += cond
                g[b, b] += cond
        for c in topo.top_layer():
            g[c, c] += self.g_sink
        return g

    @property
    def g_matrix(self) -> np.ndarray:
        return self._g.copy()

    def _chol(self):
        if self._g_chol is None:
            self._g_chol = cho_factor(self._g)
        return self._g_chol

    def _check_power(self, power: np.ndarray) -> np.ndarray:
        power = np.asarray(power, dtype=float)
        if power.shape != (self.topo.n_cores,):
            raise ValueError(
                f"power vector must have shape ({self.topo.n_cores},), got {power.shape}")
        return power

    def steady_state(self, power: np.ndarray) -> np.ndarray:
        """Equilibrium temperatures for a constant power vector (W per core)."""
        power = self._check_power(power)
        return self.t_amb + cho_solve(self._chol(), power)

    def transient_step(self, temps: np.ndarray, power: np.ndarray,
                       dt: float) -> np.ndarray:
        """Advance temperatures by dt seconds under constant power."""
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        power = self._check_power(power)
        temps = np.asarray(temps, dtype=float)
        if temps.shape != power.shape:
            raise ValueError("temps and power must have matching shape")
        c_dt = self.cap / dt
        key = round(float(dt), 12)
        if key not in self._step_cache:
            a = self._g + c_dt * np.eye(self.topo.n_cores)
            self._step_cache[key] = (cho_factor(a), None)
        fac, _ = self._step_cache[key]
        rhs = c_dt * (temps - self.t_amb) + power
        return self.t_amb + cho_solve(fac, rhs)

    def step_sensitivity(self, dt: float) -> np.ndarray:
        """(C/dt + G)^-1: change in next-step temps per watt moved, by column.

        Column j gives d T' / d P_j for the implicit-Euler step, so the
        effect of relocating p watts from core s to core d on the next
        step is p * (M[:, d] - M[:, s]).  Cached per dt.
        """
        key = round(float(dt), 12)
        if key not in self._step_cache or self._step_cache[key][1] is None:
            c_dt = self.cap / dt
            a = self._g + c_dt * np.eye(self.topo.n_cores)
            fac = cho_factor(a)
            inv = cho_solve(fac, np.eye(self.topo.n_cores))
            self._step_cache[key] = (fac, inv)
        return self._step_cache[key][1]

    def peak(self, temps: np.ndarray) -> float:
        return float(np.max(temps))

    def ambient_vector(self) -> np.ndarray:
        return np.full(self.topo.n_cores, self.t_amb)

    def with_sink(self, g_sink: float) -> "ThermalNetwork":
        return ThermalNetwork(self.topo, self.g_lat, self.g_vert, g_sink,
                              self.cap, self.t_amb)


def calibrate_heat_sink(net: ThermalNetwork, target_peak: float,
                        power_per_core: float = 2.0, tol: float = 0.5,
                        max_iter: int = 200) -> tuple[ThermalNetwork, dict]:
    """Bisect g_sink so uniform power yields a steady-state peak near target.

    Peak temperature is monotone decreasing in the sink conductance, so a
    simple bisection on log-bracketed g_sink converges.  Returns the
    calibrated network and a summary dict (g_sink, peak, iterations).
    Raises CalibrationError if the target is outside the reachable range.
    """
    if target_peak <= net.t_amb:
        raise CalibrationError(
            f"target peak {target_peak} not above ambient {net.t_amb}")
    power = np.full(net.topo.n_cores, float(power_per_core))

    def peak_at(g):
        return net.with_sink(g).peak(net.with_sink(g).steady_state(power))

    lo, hi = 1e-4, 1e4  # lo: weak sink (hot), hi: strong sink (cool)
    if peak_at(lo) < target_peak - tol:
        raise CalibrationError("target peak unreachable even with weakest sink")
    if peak_at(hi) > target_peak + tol:
        raise CalibrationError("target peak unreachable even with strongest sink")
    for it in range(1, max_iter + 1):
        mid = np.sqrt(lo * hi)  # bisect in log space, g spans 8 decades
        p = peak_at(mid)
        if abs(p - target_peak) <= tol:
            return net.with_sink(mid), {"g_sink": mid, "peak": p, "iterations": it}
        if p > target_peak:
            lo = mid  # too hot -> need stronger sink
        else:
            hi = mid
    raise CalibrationError(f"calibration did not converge in {max_iter} iterations")
