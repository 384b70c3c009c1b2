"""Experiment configuration: JSON documents validated into pydantic models,
plus builders that turn a config into simulator machinery.

Any subset of fields may appear in the JSON; everything else takes the
defaults below, so `{}` is a complete experiment.  `thermal.g_sink` left
null means "calibrate the heat-sink leg at build time" (bisect until the
steady peak at calibration_power_w per core hits calibration_target_c).
"""

import json
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from .arch import ChipTopology
from .errors import ConfigurationError
from .perf import KernelProfile
from .policy import AilParams
from .power import PowerParams, VfLevel
from .sim import (MODEL_LIBRARY, ModelSpec, SimContext, Workload,
                  build_workload, make_initial_state)
from .thermal import ThermalNetwork, calibrate_heat_sink

SCHEMA_VERSION = 1


class TopologySection(BaseModel):
    nx: int = 4
    ny: int = 4
    nz: int = 4
    pitch_mm: float = 3.414
    memory_banks: int = 128


class ThermalSection(BaseModel):
    g_lateral_w_c: float = 2.0
    g_vertical_w_c: float = 5.0
    g_sink_w_c: float | None = None     # null -> calibrate at build time
    heat_capacity_j_c: float = 0.05
    ambient_c: float = 45.0
    calibration_target_c: float = 80.0
    calibration_power_w: float = 2.0
    calibration_tol_c: float = 0.5


class PowerSection(BaseModel):
    vf_table: list[tuple[float, float]] = [(1.0, 0.7), (1.5, 0.8), (2.0, 0.9),
                                           (2.5, 1.0), (3.0, 1.1)]
    dynamic_top_w: float = 4.5
    p_leak0_w: float = 0.3
    gamma_per_c: float = 0.02
    t_ref_c: float = 45.0
    s_max_w: float = 10.0
    budget_tol_w: float = 1e-3


class WorkloadSection(BaseModel):
    model: str = "vit"
    seq_len: int = Field(256, gt=0)
    blocks: int | None = Field(None, gt=0)


class TraceSection(BaseModel):
    models: list[str] = ["vit", "bert", "llama"]
    budget_lo_w: float = 1.0
    budget_hi_w: float = 5.5
    n_budgets: int = Field(10, ge=2)
    slices: int = Field(200, ge=1)
    t_th_c: float = 70.0
    label_horizon_epochs: int = Field(20, ge=1)


class OracleSection(BaseModel):
    expert_cap: int = Field(1000, ge=2)
    seed: int = 0


class PolicySection(BaseModel):
    rounds: int = Field(5, ge=1)
    episodes_per_round: int = Field(2, ge=1)
    horizon_epochs: int = Field(120, ge=1)
    tau: float = Field(0.15, ge=0.0)
    mc_passes: int = Field(20, ge=2)
    self_weight: float = 0.5
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = 1e-3
    momentum: float = 0.9
    agent_horizon: int = Field(20, ge=1)
    oracle_alternatives: int = Field(6, ge=0)
    seed: int = 0
    pipelines: int = Field(8, ge=1)
    model: str = "vit"
    # training mix cycled across pipelines/episodes; None -> [model]
    models: list[str] | None = ["vit", "bert", "llama"]
    seq_len: int = Field(256, gt=0)
    t_th_c: float = 75.0
    placement: str = "random"


class BaselineSection(BaseModel):
    margin_c: float = 2.0
    epsilon0: float = 0.2
    epsilon_decay: float = 0.9


class EvalSection(BaseModel):
    workloads: list[WorkloadSection] = [WorkloadSection()]
    t_th_list_c: list[float] = [75.0]
    seq_lens: list[int] = [256]
    seeds: list[int] = [0, 1, 2, 3, 4]
    pipelines: int = Field(8, ge=1)
    placement: str = "corners"
    horizon_epochs: int = Field(150, ge=1)
    reference_scheduler: str = "ail"


class OutputSection(BaseModel):
    traces: str = "traces.csv"
    dataset: str = "dataset.csv"
    oracle_model: str = "oracle.model"
    policy_model: str = "policy.model"
    direct_model: str = "direct.model"
    report_json: str = "report.json"
    report_csv: str = "report.csv"


class ExperimentConfig(BaseModel):
    schema_version: int = SCHEMA_VERSION
    dt_s: float = Field(1e-3, gt=0)
    perf_profile: str | None = None     # null -> packaged anchor table
    topology: TopologySection = TopologySection()
    thermal: ThermalSection = ThermalSection()
    power: PowerSection = PowerSection()
    trace: TraceSection = TraceSection()
    oracle: OracleSection = OracleSection()
    policy: PolicySection = PolicySection()
    baseline: BaselineSection = BaselineSection()
    eval: EvalSection = EvalSection()
    outputs: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _invariants(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        amb = self.thermal.ambient_c
        thresholds = ([self.trace.t_th_c, self.policy.t_th_c]
                      + list(self.eval.t_th_list_c))
        if any(t <= amb for t in thresholds):
            raise ValueError(
                f"thermal thresholds {thresholds} must exceed ambient {amb}")
        if not self.eval.seeds:
            raise ValueError("eval.seeds must not be empty")
        for w in list(self.eval.workloads) + [
                WorkloadSection(model=self.policy.model)]:
            if w.model not in MODEL_LIBRARY:
                raise ValueError(f"unknown model {w.model!r}")
        for m in self.policy.models or []:
            if m not in MODEL_LIBRARY:
                raise ValueError(f"unknown model {m!r}")
        if self.policy.placement not in ("corners", "low_amd", "random"):
            raise ValueError(
                f"unknown training placement {self.policy.placement!r}")
        if self.trace.budget_hi_w <= self.trace.budget_lo_w:
            raise ValueError("trace budget range is empty")
        return self


def load_config(source=None) -> ExperimentConfig:
    """Build a validated config from a JSON path, a dict, or nothing.

    Raises ConfigurationError for unreadable files, bad JSON, schema
    violations, or missing referenced files.
    """
    base = Path(".")
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = source
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        base = path.parent
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a JSON object")
    try:
        cfg = ExperimentConfig(**doc)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc
    if cfg.perf_profile is not None:
        resolved = Path(cfg.perf_profile)
        if not resolved.is_absolute():
            resolved = base / resolved
        if not resolved.is_file():
            raise ConfigurationError(f"perf profile not found: {resolved}")
        cfg = cfg.model_copy(update={"perf_profile": str(resolved)})
    return cfg


def build_topology(cfg: ExperimentConfig) -> ChipTopology:
    t = cfg.topology
    return ChipTopology(t.nx, t.ny, t.nz, t.pitch_mm, t.memory_banks)


def build_thermal(cfg: ExperimentConfig,
                  topo: ChipTopology | None = None) -> tuple[ThermalNetwork, dict]:
    """Thermal network per config; calibrates the sink leg when unset."""
    topo = topo or build_topology(cfg)
    th = cfg.thermal
    if th.g_sink_w_c is not None:
        net = ThermalNetwork(topo, th.g_lateral_w_c, th.g_vertical_w_c,
                             th.g_sink_w_c, th.heat_capacity_j_c, th.ambient_c)
        return net, {"g_sink": th.g_sink_w_c, "calibrated": False}
    seed_net = ThermalNetwork(topo, th.g_lateral_w_c, th.g_vertical_w_c,
                              2.5, th.heat_capacity_j_c, th.ambient_c)
    net, info = calibrate_heat_sink(seed_net, th.calibration_target_c,
                                    th.calibration_power_w,
                                    tol=th.calibration_tol_c)
    info["calibrated"] = True
    return net, info


def build_power(cfg: ExperimentConfig) -> PowerParams:
    p = cfg.power
    table = tuple(VfLevel(f, v) for f, v in p.vf_table)
    return PowerParams(table, p.dynamic_top_w, p.p_leak0_w, p.gamma_per_c,
                       p.t_ref_c, p.s_max_w, p.budget_tol_w)


def build_profile(cfg: ExperimentConfig) -> KernelProfile:
    return KernelProfile.load(cfg.perf_profile)


def build_context(cfg: ExperimentConfig, t_th_c: float | None = None,
                  net: ThermalNetwork | None = None) -> SimContext:
    """Assemble the immutable simulation bundle for one threshold.

    Passing a prebuilt net skips re-calibration when sweeping thresholds.
    """
    topo = net.topo if net is not None else build_topology(cfg)
    if net is None:
        net, _ = build_thermal(cfg, topo)
    return SimContext(topo=topo, net=net, power=build_power(cfg),
                      profile=build_profile(cfg), dt=cfg.dt_s,
                      t_th=cfg.policy.t_th_c if t_th_c is None else t_th_c)


def build_eval_workload(cfg: ExperimentConfig, section: WorkloadSection,
                        seq_len: int) -> Workload:
    spec = MODEL_LIBRARY[section.model]
    if section.blocks is not None:
        spec = ModelSpec(spec.name, section.blocks, spec.ips_scale)
    return build_workload(spec, seq_len)


def build_trace_grid(cfg: ExperimentConfig):
    from .dataset import TraceGrid
    t = cfg.trace
    return TraceGrid(models=tuple(t.models),
                     budgets=tuple(np.linspace(t.budget_lo_w, t.budget_hi_w,
                                               t.n_budgets)),
                     t_th=t.t_th_c, slices=t.slices)


def build_ail_params(cfg: ExperimentConfig) -> AilParams:
    p = cfg.policy
    return AilParams(rounds=p.rounds, episodes_per_round=p.episodes_per_round,
                     horizon=p.horizon_epochs, tau=p.tau,
                     mc_passes=p.mc_passes, self_weight=p.self_weight,
                     epochs=p.epochs, batch_size=p.batch_size, lr=p.lr,
                     momentum=p.momentum, agent_horizon=p.agent_horizon,
                     oracle_alternatives=p.oracle_alternatives, seed=p.seed)


def training_state_factory(cfg: ExperimentConfig, ctx: SimContext):
    """make_state(i) for the learning loops.

    Training episodes should cover more of the decision space than the
    fixed evaluation scenario, so by default each episode draws a fresh
    random placement (deterministic in the episode index) and cycles the
    pipelines through the configured model mix.  Both learning loops use
    the same factory, so the comparison stays budget-matched.
    """
    p = cfg.policy
    models = list(p.models) if p.models else [p.model]

    def make_state(episode: int):
        workloads = [build_workload(models[(episode + j) % len(models)],
                                    p.seq_len)
                     for j in range(p.pipelines)]
        if p.placement == "random":
            rng = np.random.default_rng(p.seed * 7919 + episode)
            cores = rng.choice(ctx.topo.n_cores, p.pipelines, replace=False)
            return make_initial_state(ctx, workloads, "list",
                                      [int(c) for c in cores])
        return make_initial_state(ctx, workloads, p.placement)

    return make_state
