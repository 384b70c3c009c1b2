"""Discrete-epoch simulator for inference pipelines on the chip.

A pipeline runs one transformer forward pass as an ordered kernel
sequence: embedding, (attention, ffn) per block, lm_head.  Instruction
budgets are calibrated so a 12-block model at sequence length 256
finishes in about 200 one-millisecond epochs at mid-grid anchors and
full frequency; attention work grows quadratically with sequence length,
the rest linearly.

Each epoch: apply migration decisions, compute the uniform transient-safe
power budget, pick V/f per active core, execute kernels for dt seconds
(spilling into the next kernel mid-epoch when one finishes), then advance
the thermal state one implicit-Euler step.  Migration restarts the
warmup counter, which throttles IPS and inflates MPKI while the private
cache refills.

Everything is deterministic given (workloads, placement, decide_fn);
the only randomness lives inside deciders.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .arch import ChipTopology
from .errors import ConfigurationError, DecisionError
from .perf import WARM, KernelProfile
from .power import PowerParams, compute_power_budget, core_power, select_vf
from .thermal import ThermalNetwork

# reference workload calibration: total instructions for a 12-block model at
# L=256, split so attention dominates and embedding/head bracket the pass
REF_INSTRUCTIONS = 1.2916e9
REF_BLOCKS = 12
REF_SEQ_LEN = 256
SHARE_EMBED = 0.075
SHARE_ATTENTION = 0.45
SHARE_FFN = 0.40
SHARE_HEAD = 0.075


@dataclass(frozen=True)
class ModelSpec:
    name: str
    blocks: int
    ips_scale: float = 1.0


MODEL_LIBRARY = {
    "vit": ModelSpec("vit", blocks=12, ips_scale=1.0),
    "bert": ModelSpec("bert", blocks=12, ips_scale=0.97),
    "llama": ModelSpec("llama", blocks=16, ips_scale=0.88),
}


@dataclass(frozen=True)
class KernelTask:
    kernel: str
    instructions: float


@dataclass(frozen=True)
class Workload:
    """Ordered kernel sequence for one forward pass of one model."""
    model: str
    seq_len: int
    ips_scale: float
    tasks: tuple[KernelTask, ...]

    @property
    def total_instructions(self) -> float:
        return sum(t.instructions for t in self.tasks)

    def kernel_counts(self) -> dict:
        out = {}
        for t in self.tasks:
            out[t.kernel] = out.get(t.kernel, 0) + 1
        return out


def kernel_instructions(seq_len: int) -> dict:
    """Per-task instruction budgets at a given sequence length."""
    s = seq_len / REF_SEQ_LEN
    return {
        "embedding": SHARE_EMBED * REF_INSTRUCTIONS * s,
        "attention": SHARE_ATTENTION * REF_INSTRUCTIONS / REF_BLOCKS * s * s,
        "ffn": SHARE_FFN * REF_INSTRUCTIONS / REF_BLOCKS * s,
        "lm_head": SHARE_HEAD * REF_INSTRUCTIONS * s,
    }


def build_workload(model: str | ModelSpec, seq_len: int = 256) -> Workload:
    if isinstance(model, str):
        try:
            model = MODEL_LIBRARY[model]
        except KeyError:
            raise ConfigurationError(
                f"unknown model {model!r}, have {sorted(MODEL_LIBRARY)}")
    if seq_len <= 0:
        raise ConfigurationError(f"seq_len must be positive, got {seq_len}")
    instr = kernel_instructions(seq_len)
    tasks = [KernelTask("embedding", instr["embedding"])]
    for _ in range(model.blocks):
        tasks.append(KernelTask("attention", instr["attention"]))
        tasks.append(KernelTask("ffn", instr["ffn"]))
    tasks.append(KernelTask("lm_head", instr["lm_head"]))
    return Workload(model.name, seq_len, model.ips_scale, tuple(tasks))


@dataclass
class Pipeline:
    pid: int
    workload: Workload
    core: int
    task_idx: int = 0
    remaining: float = -1.0
    since_migration: int = WARM
    instructions_done: float = 0.0
    done: bool = False

    def __post_init__(self):
        if self.remaining < 0:
            self.remaining = self.workload.tasks[0].instructions

    @property
    def kernel(self) -> str:
        idx = min(self.task_idx, len(self.workload.tasks) - 1)
        return self.workload.tasks[idx].kernel

    def clone(self) -> "Pipeline":
        return Pipeline(self.pid, self.workload, self.core, self.task_idx,
                        self.remaining, self.since_migration,
                        self.instructions_done, self.done)


@dataclass
class SimState:
    temps: np.ndarray
    pipelines: list[Pipeline]
    epoch: int = 0
    time_s: float = 0.0

    def active(self) -> list[Pipeline]:
        return [p for p in self.pipelines if not p.done]

    def occupied_cores(self) -> set:
        return {p.core for p in self.active()}

    def active_mask(self, n_cores: int) -> np.ndarray:
        mask = np.zeros(n_cores, dtype=bool)
        for p in self.active():
            mask[p.core] = True
        return mask

    def clone(self) -> "SimState":
        return SimState(self.temps.copy(), [p.clone() for p in self.pipelines],
                        self.epoch, self.time_s)


@dataclass(frozen=True)
class Decision:
    """Per-pipeline scheduling decision for the coming epoch."""
    action: str = "stay"                 # "stay" | "migrate"
    target: int | None = None
    force_min_vf: bool = False           # ride the V/f floor regardless of budget
    queried: bool = False                # decision came from an oracle query
    info: dict = field(default_factory=dict)


STAY = Decision()


@dataclass(frozen=True)
class SimContext:
    """Immutable machinery bundle shared by the simulator and all deciders."""
    topo: ChipTopology
    net: ThermalNetwork
    power: PowerParams
    profile: KernelProfile
    dt: float = 1e-3
    t_th: float = 75.0

    def uniform_budget(self, state: SimState) -> tuple[float, bool]:
        mask = state.active_mask(self.topo.n_cores)
        return compute_power_budget(self.net, state.temps, mask, self.t_th,
                                    self.dt, self.power)


def place_pipelines(topo: ChipTopology, n: int, mode: str = "corners",
                    cores: list[int] | None = None) -> list[int]:
    """Initial core assignment: worst-AMD first ("corners"), best-AMD first
    ("low_amd"), or an explicit list."""
    if n <= 0 or n > topo.n_cores:
        raise ConfigurationError(f"cannot place {n} pipelines on {topo.n_cores} cores")
    if mode == "list":
        if cores is None or len(cores) != n or len(set(cores)) != n:
            raise ConfigurationError("explicit placement needs n distinct cores")
        for c in cores:
            topo.coords(c)  # validates range
        return list(cores)
    amd = topo.amd_all()
    if mode == "corners":
        order = sorted(range(topo.n_cores), key=lambda c: (-amd[c], c))
    elif mode == "low_amd":
        order = sorted(range(topo.n_cores), key=lambda c: (amd[c], c))
    else:
        raise ConfigurationError(f"unknown placement mode {mode!r}")
    return order[:n]


def make_initial_state(ctx: SimContext, workloads: list[Workload],
                       placement: str = "corners",
                       cores: list[int] | None = None) -> SimState:
    spots = place_pipelines(ctx.topo, len(workloads), placement, cores)
    pipelines = [Pipeline(pid=i, workload=w, core=spots[i])
                 for i, w in enumerate(workloads)]
    return SimState(ctx.net.ambient_vector(), pipelines)


@dataclass
class EpochRecord:
    epoch: int
    budget_w: float
    emergency: bool
    peak_c: float           # peak temperature after the thermal step
    pipelines: list[dict]   # per active pipeline: observed counters etc.


def step_epoch(ctx: SimContext, state: SimState,
               decisions: dict[int, Decision] | None = None) -> EpochRecord:
    """Advance the simulation by one epoch in place."""
    decisions = decisions or {}
    active = state.active()
    occupied = {p.core for p in active}

    # apply migrations first; they take effect for the whole epoch
    for p in active:
        d = decisions.get(p.pid, STAY)
        if d.action == "migrate":
            if d.target is None:
                raise DecisionError(f"pipeline {p.pid}: migrate without target")
            ctx.topo.coords(d.target)
            if d.target in occupied:
                raise DecisionError(
                    f"pipeline {p.pid}: target core {d.target} is occupied")
            occupied.discard(p.core)
            occupied.add(d.target)
            p.core = d.target
            p.since_migration = 0
        elif d.action != "stay":
            raise DecisionError(f"unknown action {d.action!r}")

    mask = state.active_mask(ctx.topo.n_cores)
    budget, emergency = compute_power_budget(ctx.net, state.temps, mask,
                                             ctx.t_th, ctx.dt, ctx.power)

    power_vec = np.zeros(ctx.topo.n_cores)
    rows = []
    f_max = ctx.power.f_max_ghz
    for p in active:
        d = decisions.get(p.pid, STAY)
        if emergency or d.force_min_vf:
            level = ctx.power.lowest
        else:
            level = select_vf(ctx.power, budget, float(state.temps[p.core]))
        power_vec[p.core] = core_power(ctx.power, level, float(state.temps[p.core]))
        amd = ctx.topo.amd(p.core)
        start_kernel = p.kernel
        cold = ctx.profile.cold_start_factor(p.since_migration)

        # run kernels for dt seconds, spilling across task boundaries
        t_left = ctx.dt
        executed = 0.0
        mpki_weight = 0.0
        while t_left > 1e-15 and not p.done:
            ips, mpki = ctx.profile.observe(p.kernel, amd, level.f_ghz,
                                            p.since_migration,
                                            p.workload.ips_scale)
            t_task = p.remaining / ips
            t_run = min(t_task, t_left)
            got = ips * t_run
            executed += got
            mpki_weight += mpki * t_run
            p.remaining -= got
            t_left -= t_run
            if p.remaining <= 1e-6:  # instructions; task complete
                p.task_idx += 1
                if p.task_idx >= len(p.workload.tasks):
                    p.done = True
                    p.remaining = 0.0
                else:
                    p.remaining = p.workload.tasks[p.task_idx].instructions
        t_busy = ctx.dt - t_left
        rows.append({
            "pid": p.pid, "core": p.core, "kernel": start_kernel,
            "f_ghz": level.f_ghz,
            "ips": executed / t_busy if t_busy > 0 else 0.0,
            "mpki": mpki_weight / t_busy if t_busy > 0 else 0.0,
            "executed": executed,
            "since_migration": p.since_migration,
            "migrated": d.action == "migrate",
            "queried": d.queried,
            "o_dvfs_s": ctx.dt * (1.0 - level.f_ghz / f_max),
            "o_mig_s": ctx.dt * (1.0 - cold),
        })
        p.instructions_done += executed

    state.temps = ctx.net.transient_step(state.temps, power_vec, ctx.dt)
    for p in active:
        p.since_migration = min(p.since_migration + 1, WARM)
    state.epoch += 1
    state.time_s += ctx.dt
    return EpochRecord(state.epoch - 1, budget, emergency,
                       ctx.net.peak(state.temps), rows)


@dataclass
class EpisodeTrace:
    records: list[EpochRecord]
    summary: dict

    def to_csv(self, path):
        import csv
        cols = ["epoch", "budget_w", "emergency", "peak_c", "pid", "core",
                "kernel", "f_ghz", "ips", "mpki", "executed",
                "since_migration", "migrated", "queried"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:  # one row per (epoch, pipeline)
                for row in r.pipelines:
                    w.writerow([r.epoch, f"{r.budget_w:.6f}", int(r.emergency),
                                f"{r.peak_c:.6f}", row["pid"], row["core"],
                                row["kernel"], row["f_ghz"], f"{row['ips']:.6e}",
                                f"{row['mpki']:.6f}", f"{row['executed']:.6e}",
                                row["since_migration"], int(row["migrated"]),
                                int(row["queried"])])


def run_episode(ctx: SimContext, state: SimState, decide_fn=None,
                max_epochs: int = 2000, horizon: int | None = None) -> EpisodeTrace:
    """Run until every pipeline finishes, the horizon elapses, or max_epochs.

    decide_fn(ctx, state, records) -> {pid: Decision}; None means all-stay.
    The summary reports workload progress, overhead integrals, thermal
    statistics, query counts, and mean decision latency.
    """
    records: list[EpochRecord] = []
    decision_time = 0.0
    slots = queries = migrations = 0
    limit = max_epochs if horizon is None else min(horizon, max_epochs)
    start_epoch = state.epoch
    while state.active() and state.epoch - start_epoch < limit:
        if decide_fn is not None:
            t0 = time.perf_counter()
            decisions = decide_fn(ctx, state, records)
            decision_time += time.perf_counter() - t0
        else:
            decisions = {}
        n_active = len(state.active())
        slots += n_active
        rec = step_epoch(ctx, state, decisions)
        queries += sum(1 for r in rec.pipelines if r["queried"])
        migrations += sum(1 for r in rec.pipelines if r["migrated"])
        records.append(rec)

    peaks = np.array([r.peak_c for r in records]) if records else np.array([ctx.net.peak(state.temps)])
    violations = int(np.sum(peaks > ctx.t_th + 1e-6))
    summary = {
        "epochs": len(records),
        "time_s": len(records) * ctx.dt,
        "completed": not state.active(),
        "truncated": bool(state.active()),
        "total_instructions": float(sum(p.instructions_done for p in state.pipelines)),
        "o_dvfs_s": float(sum(row["o_dvfs_s"] for r in records for row in r.pipelines)),
        "o_mig_s": float(sum(row["o_mig_s"] for r in records for row in r.pipelines)),
        "violations": violations,
        "violation_pct": 100.0 * violations / max(len(records), 1),
        "queries": queries,
        "migrations": migrations,
        "decision_slots": slots,
        "queries_per_slot": queries / slots if slots else 0.0,
        "peak_max_c": float(peaks.max()),
        "peak_mean_c": float(peaks.mean()),
        "peak_q25_c": float(np.percentile(peaks, 25)),
        "peak_median_c": float(np.percentile(peaks, 50)),
        "peak_q75_c": float(np.percentile(peaks, 75)),
        "decision_latency_us": 1e6 * decision_time / slots if slots else 0.0,
    }
    return EpisodeTrace(records, summary)


def last_observations(records: list[EpochRecord]) -> dict[int, dict]:
    """Most recent per-pipeline counter row, keyed by pid."""
    if not records:
        return {}
    return {row["pid"]: row for row in records[-1].pipelines}
