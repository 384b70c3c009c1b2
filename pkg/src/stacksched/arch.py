"""Chip topology: a 3D grid of cores with distributed (S-NUCA) cache banks.

Cores are indexed x-fastest: id = x + nx*y + nx*ny*z.  Cache banks are
spread uniformly over the grid, so a core's average access distance to the
shared cache is its average Manhattan distance (AMD) to all cores, self
included.  AMD is the single architecture feature the performance model
keys on.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ChipTopology:
    """A nx x ny x nz core grid with uniform bank placement.

    :param nx, ny, nz: grid extents (cores), all positive.
    :param pitch_mm: center-to-center core pitch, metadata only.
    :param memory_banks: number of distributed cache banks, metadata only.
    """

    nx: int
    ny: int
    nz: int
    pitch_mm: float = 3.414
    memory_banks: int = 128
    _amd: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0 or self.nz <= 0:
            raise ConfigurationError(
                f"grid extents must be positive, got {self.nx}x{self.ny}x{self.nz}")
        object.__setattr__(self, "_amd", self._compute_amd())

    @property
    def n_cores(self) -> int:
        return self.nx * self.ny * self.nz

    def coords(self, core: int) -> tuple[int, int, int]:
        """Map core id -> (x, y, z)."""
        if not 0 <= core < self.n_cores:
            raise IndexError(f"core id {core} out of range [0, {self.n_cores})")
        x = core % self.nx
        y = (core // self.nx) % self.ny
        z = core // (self.nx * self.ny)
        return x, y, z

    def core_id(self, x: int, y: int, z: int) -> int:
        """Map (x, y, z) -> core id."""
        if not (0 <= x < self.nx and 0 <= y < self.ny and 0 <= z < self.nz):
            raise IndexError(f"coords ({x},{y},{z}) outside {self.nx}x{self.ny}x{self.nz}")
        return x + self.nx * y + self.nx * self.ny * z

    def manhattan_hops(self, a: int, b: int) -> int:
        """Hop count of the minimal mesh route between two cores."""
        xa, ya, za = self.coords(a)
        xb, yb, zb = self.coords(b)
        return abs(xa - xb) + abs(ya - yb) + abs(za - zb)

    def neighbors(self, core: int) -> list[int]:
        """Face-adjacent cores (up to 6), ascending id."""
        x, y, z = self.coords(core)
        out = []
        for dx, dy, dz in ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0),
                           (0, 0, -1), (0, 0, 1)):
            nx_, ny_, nz_ = x + dx, y + dy, z + dz
            if 0 <= nx_ < self.nx and 0 <= ny_ < self.ny and 0 <= nz_ < self.nz:
                out.append(self.core_id(nx_, ny_, nz_))
        return sorted(out)

    def _compute_amd(self) -> np.ndarray:
        # Manhattan distance separates per axis: AMD(c) = sum over axes of the
        # mean |coordinate delta| along that axis.
        ax = np.arange(self.nx)
        ay = np.arange(self.ny)
        az = np.arange(self.nz)
        sx = np.abs(ax[:, None] - ax[None, :]).mean(axis=1)
        sy = np.abs(ay[:, None] - ay[None, :]).mean(axis=1)
        sz = np.abs(az[:, None] - az[None, :]).mean(axis=1)
        amd = np.empty(self.n_cores)
        for c in range(self.n_cores):
            x, y, z = self.coords(c)
            amd[c] = sx[x] + sy[y] + sz[z]
        return amd

    def amd(self, core: int) -> float:
        """Average Manhattan distance from `core` to every core (self included)."""
        if not 0 <= core < self.n_cores:
            raise IndexError(f"core id {core} out of range [0, {self.n_cores})")
        return float(self._amd[core])

    def amd_all(self) -> np.ndarray:
        """AMD for every core, indexed by id."""
        return self._amd.copy()

    def avg_llc_latency_ns(self, core: int, base_ns: float = 4.0,
                           per_hop_ns: float = 2.0) -> float:
        """Average shared-cache access latency: base plus AMD hops."""
        return base_ns + per_hop_ns * self.amd(core)

    def top_layer(self) -> np.ndarray:
        """Core ids on the top layer (largest z), where the heat sink attaches."""
        z = self.nz - 1
        return np.arange(self.nx * self.ny) + self.nx * self.ny * z
