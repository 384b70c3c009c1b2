"""Profiling traces and migration-utility labels.

Trace collection sweeps operating points: every (model, kernel, AMD
level, power budget) combination gets a pinned single-kernel run under a
capped budget, summarized as 200 equal-duration time slices of observed
IPS, MPKI, and peak temperature.  With the default grids that is 40
points per (model, kernel) and 8,000 trace rows each.

Labels come from paired rollouts: from the same (ambient) initial chip
state, either keep running warm at the source operating point or migrate
to the destination point and pay the cache cold start.  Utility is the
relative instruction gain of migrating over a fixed horizon.  Pairing
every point with every other point (self excluded) yields 40*39 = 1,560
labeled examples per kernel per model.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .perf import WARM
from .power import compute_power_budget, core_power, select_vf
from .sim import MODEL_LIBRARY, SimContext

TRACE_COLUMNS = ("model", "kernel", "amd", "budget_w", "slice", "ips",
                 "mpki", "t_peak_c")
DATASET_COLUMNS = ("kernel", "i_src", "c_src", "a_src", "b_src",
                   "i_dst", "c_dst", "a_dst", "b_dst", "utility")

# instructions per pinned run; sized so every operating point finishes in
# a handful to a few dozen epochs across the whole frequency range
RUN_INSTRUCTIONS = 8e7


@dataclass(frozen=True)
class TraceGrid:
    models: tuple = ("vit", "bert", "llama")
    amd_levels: tuple = (3.0, 3.5, 4.0, 4.5)
    budgets: tuple = tuple(np.linspace(1.0, 5.5, 10))
    t_th: float = 70.0
    slices: int = 200

    @property
    def budget_lo(self) -> float:
        return min(self.budgets)

    @property
    def budget_hi(self) -> float:
        return max(self.budgets)


def core_at_amd(ctx: SimContext, amd: float) -> int:
    """Lowest-id core whose AMD matches (closest if no exact hit)."""
    all_amd = ctx.topo.amd_all()
    hits = np.nonzero(all_amd == amd)[0]
    if hits.size:
        return int(hits[0])
    return int(np.argmin(np.abs(all_amd - amd)))


def run_pinned(ctx: SimContext, kernel: str, core: int, budget_w: float,
               model_scale: float = 1.0, warmup_start: int = WARM,
               instructions: float | None = RUN_INSTRUCTIONS,
               max_epochs: int = 200, t_th: float | None = None,
               horizon: int | None = None):
    """Run one kernel alone on one core under a capped budget.

    The per-epoch budget is min(budget_w, transient-safe uniform budget).
    Returns a list of per-epoch segments (t0, t1, ips, mpki, peak_c, f_ghz)
    where the last segment may be partial, plus executed instructions.
    Either runs `instructions` to completion or a fixed epoch `horizon`.
    """
    t_th = ctx.t_th if t_th is None else t_th
    mask = np.zeros(ctx.topo.n_cores, dtype=bool)
    mask[core] = True
    temps = ctx.net.ambient_vector()
    amd = ctx.topo.amd(core)
    segments = []
    executed = 0.0
    left = np.inf if instructions is None else float(instructions)
    j = warmup_start
    epochs = horizon if horizon is not None else max_epochs
    t = 0.0
    for _ in range(epochs):
        s_dyn, emergency = compute_power_budget(ctx.net, temps, mask, t_th,
                                                ctx.dt, ctx.power)
        s_eff = min(budget_w, s_dyn)
        level = ctx.power.lowest if emergency else \
            select_vf(ctx.power, s_eff, float(temps[core]))
        ips, mpki = ctx.profile.observe(kernel, amd, level.f_ghz, j, model_scale)
        t_run = min(ctx.dt, left / ips)
        power = np.zeros(ctx.topo.n_cores)
        power[core] = core_power(ctx.power, level, float(temps[core]))
        temps = ctx.net.transient_step(temps, power, ctx.dt)
        segments.append((t, t + t_run, ips, mpki, ctx.net.peak(temps), level.f_ghz))
        executed += ips * t_run
        left -= ips * t_run
        t += ctx.dt
        j = min(j + 1, WARM)
        if horizon is None and left <= 1e-6:
            break
    return segments, executed


def slice_segments(segments, n_slices: int):
    """Time-weighted resampling of per-epoch segments into equal slices.

    Returns per-slice (ips, mpki, peak).  IPS and MPKI are time-weighted
    means over overlapping segments; peak is the max seen in the slice.
    """
    t_end = segments[-1][1]
    out = []
    width = t_end / n_slices
    si = 0
    for k in range(n_slices):
        lo, hi = k * width, (k + 1) * width
        w_sum = ips_sum = mpki_sum = 0.0
        peak = -np.inf
        while si < len(segments) and segments[si][1] <= lo + 1e-15:
            si += 1
        i = si
        while i < len(segments) and segments[i][0] < hi - 1e-15:
            t0, t1, ips, mpki, pk, _ = segments[i]
            w = min(t1, hi) - max(t0, lo)
            if w > 0:
                w_sum += w
                ips_sum += ips * w
                mpki_sum += mpki * w
                peak = max(peak, pk)
            i += 1
        if w_sum <= 0:  # slice falls into dead time at the very end
            _, _, ips, mpki, pk, _ = segments[min(si, len(segments) - 1)]
            out.append((ips, mpki, pk))
        else:
            out.append((ips_sum / w_sum, mpki_sum / w_sum, peak))
    return out


@dataclass
class TraceSet:
    rows: list = field(default_factory=list)  # dicts with TRACE_COLUMNS keys
    _index: dict = field(default_factory=dict, repr=False)

    def append(self, **kw):
        row = {c: kw[c] for c in TRACE_COLUMNS}
        self.rows.append(row)
        self._index[(row["model"], row["kernel"], row["amd"],
                     row["budget_w"], row["slice"])] = row

    def point_slice(self, model, kernel, amd, budget_w, slice_idx):
        return self._index[(model, kernel, amd, budget_w, slice_idx)]

    def to_csv(self, path_or_buf):
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            fh, close = open(path_or_buf, "w", newline=""), True
        else:
            fh = path_or_buf
        try:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([r["model"], r["kernel"], f"{r['amd']:.4f}",
                            f"{r['budget_w']:.6f}", r["slice"],
                            f"{r['ips']:.8e}", f"{r['mpki']:.6f}",
                            f"{r['t_peak_c']:.6f}"])
        finally:
            if close:
                fh.close()

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path_or_text):
        if isinstance(path_or_text, str) and "\n" in path_or_text:
            fh = io.StringIO(path_or_text)
        else:
            fh = open(path_or_text, newline="")
        with fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or tuple(rd.fieldnames) != TRACE_COLUMNS:
                raise ConfigurationError(
                    f"trace CSV must have columns {TRACE_COLUMNS}, got {rd.fieldnames}")
            ts = cls()
            for r in rd:
                ts.append(model=r["model"], kernel=r["kernel"],
                          amd=float(r["amd"]), budget_w=float(r["budget_w"]),
                          slice=int(r["slice"]), ips=float(r["ips"]),
                          mpki=float(r["mpki"]), t_peak_c=float(r["t_peak_c"]))
        return ts


def collect_traces(ctx: SimContext, grid: TraceGrid = TraceGrid()) -> TraceSet:
    """Sweep all operating points and slice each run into equal time bins."""
    traces = TraceSet()
    for model in grid.models:
        spec = MODEL_LIBRARY.get(model)
        if spec is None:
            raise ConfigurationError(f"unknown model {model!r}")
        for kernel in ctx.profile.kernels():
            for amd in grid.amd_levels:
                core = core_at_amd(ctx, amd)
                for b in grid.budgets:
                    segs, _ = run_pinned(ctx, kernel, core, b, spec.ips_scale,
                                         t_th=grid.t_th)
                    for idx, (ips, mpki, pk) in enumerate(
                            slice_segments(segs, grid.slices)):
                        traces.append(model=model, kernel=kernel, amd=amd,
                                      budget_w=float(b), slice=idx, ips=ips,
                                      mpki=mpki, t_peak_c=pk)
    return traces


@dataclass
class LabeledDataset:
    """Migration-utility examples: [x_src, x_dst] -> relative gain."""
    rows: list = field(default_factory=list)  # dicts with DATASET_COLUMNS keys

    def append(self, **kw):
        self.rows.append({c: kw[c] for c in DATASET_COLUMNS})

    def kernels(self):
        return sorted({r["kernel"] for r in self.rows})

    def arrays(self, kernel: str):
        rows = [r for r in self.rows if r["kernel"] == kernel]
        x = np.array([[r["i_src"], r["c_src"], r["a_src"], r["b_src"],
                       r["i_dst"], r["c_dst"], r["a_dst"], r["b_dst"]]
                      for r in rows])
        y = np.array([r["utility"] for r in rows])
        return x, y

    def to_csv(self, path_or_buf):
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            fh, close = open(path_or_buf, "w", newline=""), True
        else:
            fh = path_or_buf
        try:
            w = csv.writer(fh)
            w.writerow(DATASET_COLUMNS)
            for r in self.rows:
                w.writerow([r["kernel"]] +
                           [f"{r[c]:.8e}" for c in DATASET_COLUMNS[1:]])
        finally:
            if close:
                fh.close()

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path_or_text):
        if isinstance(path_or_text, str) and "\n" in path_or_text:
            fh = io.StringIO(path_or_text)
        else:
            fh = open(path_or_text, newline="")
        with fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or tuple(rd.fieldnames) != DATASET_COLUMNS:
                raise ConfigurationError(
                    f"dataset CSV must have columns {DATASET_COLUMNS}")
            ds = cls()
            for r in rd:
                ds.append(kernel=r["kernel"],
                          **{c: float(r[c]) for c in DATASET_COLUMNS[1:]})
        return ds


def label_utility(ctx: SimContext, kernel: str, model_scale: float,
                  src: tuple[float, float], dst: tuple[float, float],
                  horizon: int = 20, t_th: float = 70.0,
                  _cache: dict | None = None) -> float:
    """Relative instruction gain of migrating src -> dst over `horizon` epochs.

    src/dst are (amd_level, budget_w) operating points.  Both branches
    start from the same ambient chip state; the migrate branch pays the
    cold start.  Positive utility means migrating wins.
    """
    def branch(point, warmup):
        key = (kernel, model_scale, point, warmup, horizon, t_th)
        if _cache is not None and key in _cache:
            return _cache[key]
        core = core_at_amd(ctx, point[0])
        _, executed = run_pinned(ctx, kernel, core, point[1], model_scale,
                                 warmup_start=warmup, instructions=None,
                                 horizon=horizon, t_th=t_th)
        if _cache is not None:
            _cache[key] = executed
        return executed

    stay = branch(tuple(src), WARM)
    migrate = branch(tuple(dst), 0)
    return (migrate - stay) / stay


def build_training_set(ctx: SimContext, traces: TraceSet,
                       grid: TraceGrid = TraceGrid(),
                       horizon: int = 20) -> LabeledDataset:
    """All ordered operating-point pairs with rollout utilities.

    The representative state of a point is its median time slice; pairing
    is within (model, kernel) and pools across models without a model
    column — the learner sees only observable counters.
    """
    ds = LabeledDataset()
    mid = grid.slices // 2
    cache: dict = {}
    for model in grid.models:
        scale = MODEL_LIBRARY[model].ips_scale
        for kernel in ctx.profile.kernels():
            points = []
            for amd in grid.amd_levels:
                for b in grid.budgets:
                    row = traces.point_slice(model, kernel, amd, float(b), mid)
                    points.append((amd, float(b), row["ips"], row["mpki"]))
            for a_s, b_s, i_s, c_s in points:
                for a_d, b_d, i_d, c_d in points:
                    if (a_s, b_s) == (a_d, b_d):
                        continue
                    u = label_utility(ctx, kernel, scale, (a_s, b_s),
                                      (a_d, b_d), horizon, grid.t_th, cache)
                    ds.append(kernel=kernel, i_src=i_s, c_src=c_s, a_src=a_s,
                              b_src=b_s, i_dst=i_d, c_dst=c_d, a_dst=a_d,
                              b_dst=b_d, utility=u)
    return ds
