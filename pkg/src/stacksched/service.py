"""HTTP service wrapping the pipeline stages.

Stateless by design: requests carry the experiment config inline plus any
artifacts a stage consumes (CSV tables as text, fitted models as JSON
documents), and responses return the produced artifacts the same way.
File handling lives entirely in the clients, so the service behaves
identically mounted in-process or served over the network.

Domain failures map to HTTP 400 with a machine-readable code:
"config", "calibration", or "training".
"""

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import __version__
from .baselines import DirectParams, run_direct
from .config import (build_ail_params, build_context, build_thermal,
                     build_trace_grid, load_config, training_state_factory)
from .dataset import TraceSet, build_training_set, collect_traces
from .errors import (CalibrationError, ConfigurationError, FitError,
                     TrainingError)
from .oracle import fit_mixture, oracle_from_dict, oracle_to_dict
from .policy import policy_from_dict, policy_to_dict, run_ail
from .reports import build_report, evaluate_sweep

app = FastAPI(title="stacksched", version=__version__)

_ERROR_CODES = (
    (ConfigurationError, "config"),
    (CalibrationError, "calibration"),
    (FitError, "training"),
    (TrainingError, "training"),
)


@app.exception_handler(ConfigurationError)
@app.exception_handler(CalibrationError)
@app.exception_handler(FitError)
@app.exception_handler(TrainingError)
async def _domain_error(request: Request, exc: Exception):
    code = next(c for t, c in _ERROR_CODES if isinstance(exc, t))
    return JSONResponse(status_code=400,
                        content={"code": code, "detail": str(exc)})


class HealthResponse(BaseModel):
    status: str
    version: str


class CalibrateRequest(BaseModel):
    config: dict = {}


class CalibrateResponse(BaseModel):
    g_sink_w_c: float
    peak_c: float | None = None
    iterations: int | None = None
    calibrated: bool


class CollectRequest(BaseModel):
    config: dict = {}


class CollectResponse(BaseModel):
    rows: int
    operating_points: int
    csv_text: str


class OracleTrainRequest(BaseModel):
    config: dict = {}
    traces_csv: str


class OracleTrainResponse(BaseModel):
    oracle: dict
    dataset_csv: str
    dataset_rows: int
    pairs_per_kernel: dict
    router_accuracy: float


class PolicyTrainRequest(BaseModel):
    config: dict = {}
    oracle: dict


class PolicyTrainResponse(BaseModel):
    policy: dict
    stats: list[dict]


class DirectTrainRequest(BaseModel):
    config: dict = {}


class DirectTrainResponse(BaseModel):
    direct: dict
    stats: list[dict]


class EvaluateRequest(BaseModel):
    config: dict = {}
    schedulers: list[str] = ["ail"]
    policy: dict | None = None
    oracle: dict | None = None
    direct: dict | None = None


class EvaluateResponse(BaseModel):
    report: dict


class CompareRequest(BaseModel):
    config: dict = {}
    policy: dict
    oracle: dict | None = None
    direct: dict | None = None       # omitted -> train it here per config


class CompareResponse(BaseModel):
    report: dict
    direct: dict
    direct_stats: list[dict]


@app.get("/v1/health", response_model=HealthResponse)
async def health():
    return HealthResponse(status="ok", version=__version__)


@app.post("/v1/thermal/calibrate", response_model=CalibrateResponse)
async def calibrate(req: CalibrateRequest):
    cfg = load_config(req.config)
    net, info = build_thermal(cfg)
    return CalibrateResponse(g_sink_w_c=net.g_sink, peak_c=info.get("peak"),
                             iterations=info.get("iterations"),
                             calibrated=info["calibrated"])


@app.post("/v1/traces/collect", response_model=CollectResponse)
async def traces_collect(req: CollectRequest):
    cfg = load_config(req.config)
    ctx = build_context(cfg, t_th_c=cfg.trace.t_th_c)
    grid = build_trace_grid(cfg)
    traces = collect_traces(ctx, grid)
    n_amd = len(grid.amd_levels)
    return CollectResponse(rows=len(traces.rows),
                           operating_points=n_amd * len(grid.budgets),
                           csv_text=traces.to_csv_text())


@app.post("/v1/oracle/train", response_model=OracleTrainResponse)
async def oracle_train(req: OracleTrainRequest):
    cfg = load_config(req.config)
    ctx = build_context(cfg, t_th_c=cfg.trace.t_th_c)
    grid = build_trace_grid(cfg)
    try:
        traces = TraceSet.from_csv(req.traces_csv)
    except ValueError as exc:
        raise ConfigurationError(f"bad trace CSV: {exc}") from exc
    ds = build_training_set(ctx, traces, grid,
                            horizon=cfg.trace.label_horizon_epochs)
    oracle = fit_mixture(traces, ds, cap=cfg.oracle.expert_cap,
                         seed=cfg.oracle.seed,
                         budget_clip=(grid.budget_lo, grid.budget_hi))
    pairs = {k: len(ds.arrays(k)[1]) for k in ds.kernels()}
    return OracleTrainResponse(oracle=oracle_to_dict(oracle),
                               dataset_csv=ds.to_csv_text(),
                               dataset_rows=sum(pairs.values()),
                               pairs_per_kernel=pairs,
                               router_accuracy=oracle.router_accuracy)


@app.post("/v1/policy/train", response_model=PolicyTrainResponse)
async def policy_train(req: PolicyTrainRequest):
    cfg = load_config(req.config)
    oracle = oracle_from_dict(req.oracle)
    ctx = build_context(cfg)
    make_state = training_state_factory(cfg, ctx)
    net, stats = run_ail(ctx, oracle, make_state, build_ail_params(cfg))
    return PolicyTrainResponse(policy=policy_to_dict(net), stats=stats)


@app.post("/v1/direct/train", response_model=DirectTrainResponse)
async def direct_train(req: DirectTrainRequest):
    cfg = load_config(req.config)
    net, stats = _train_direct(cfg)
    return DirectTrainResponse(direct=policy_to_dict(net), stats=stats)


def _train_direct(cfg):
    ctx = build_context(cfg)
    make_state = training_state_factory(cfg, ctx)
    base = build_ail_params(cfg)
    params = DirectParams(**{f: getattr(base, f)
                             for f in base.__dataclass_fields__},
                          epsilon0=cfg.baseline.epsilon0,
                          epsilon_decay=cfg.baseline.epsilon_decay)
    return run_direct(ctx, make_state, params)


@app.post("/v1/evaluate", response_model=EvaluateResponse)
async def evaluate(req: EvaluateRequest):
    cfg = load_config(req.config)
    rows = evaluate_sweep(
        cfg, tuple(req.schedulers),
        policy_net=policy_from_dict(req.policy) if req.policy else None,
        oracle=oracle_from_dict(req.oracle) if req.oracle else None,
        direct_net=policy_from_dict(req.direct) if req.direct else None)
    return EvaluateResponse(
        report=build_report(rows, cfg.eval.reference_scheduler))


@app.post("/v1/compare", response_model=CompareResponse)
async def compare(req: CompareRequest):
    cfg = load_config(req.config)
    policy_net = policy_from_dict(req.policy)
    oracle = oracle_from_dict(req.oracle) if req.oracle else None
    if req.direct is not None:
        direct_net, stats = policy_from_dict(req.direct), []
    else:
        direct_net, stats = _train_direct(cfg)
    rows = evaluate_sweep(cfg, policy_net=policy_net, oracle=oracle,
                          direct_net=direct_net)
    return CompareResponse(
        report=build_report(rows, cfg.eval.reference_scheduler),
        direct=policy_to_dict(direct_net), direct_stats=stats)
