"""Evaluation sweeps over (workload, threshold, sequence length, seed) and
plot-ready report emission.

Episodes run on a fixed epoch horizon so every scheduler sees the same
wall of time; exec_time_s is the measured makespan when the workload
finishes inside the horizon, otherwise the linear completion-time
estimate time / fraction-done (a monotone transform of instructions
executed, so orderings are preserved).  Normalized times are relative to
the declared reference scheduler within the same sweep cell.
"""

import csv
import json

import numpy as np

from .baselines import ColdestNeighborScheduler, DirectScheduler
from .config import (ExperimentConfig, build_context, build_eval_workload,
                     build_thermal)
from .errors import ConfigurationError
from .oracle import MixtureOracle
from .policy import PolicyNet, PolicyScheduler
from .sim import make_initial_state, run_episode

REPORT_VERSION = 1
SCHEDULERS = ("ail", "direct", "coldest")

REPORT_COLUMNS = (
    "scheduler", "model", "t_th_c", "seq_len", "seed", "pipelines", "epochs",
    "exec_time_s", "normalized_exec_time", "total_instructions", "completed",
    "t_peak_max_c", "t_peak_mean_c", "t_peak_q25_c", "t_peak_median_c",
    "t_peak_q75_c", "violation_pct", "queries_per_epoch", "queries_per_slot",
    "migrations", "o_mig_s", "o_dvfs_s", "decision_latency_us",
)


def make_scheduler(name: str, cfg: ExperimentConfig, seed: int,
                   policy_net: PolicyNet | None = None,
                   oracle: MixtureOracle | None = None,
                   direct_net: PolicyNet | None = None):
    """Decision function for one evaluation run."""
    if name == "ail":
        if policy_net is None:
            raise ConfigurationError("ail scheduler needs a trained policy")
        return PolicyScheduler(policy_net, oracle, tau=cfg.policy.tau,
                               mc_passes=cfg.policy.mc_passes,
                               seed=seed).decide
    if name == "direct":
        if direct_net is None:
            raise ConfigurationError("direct scheduler needs a trained net")
        # the direct learner is an epsilon-greedy agent; evaluate it as it
        # runs, with the exploration rate it ended training on (the AIL
        # policy likewise keeps its production behaviour: the uncertainty
        # gate and oracle fallback stay active during evaluation)
        eps = cfg.baseline.epsilon0 * \
            cfg.baseline.epsilon_decay ** (cfg.policy.rounds - 1)
        return DirectScheduler(direct_net, epsilon=eps, seed=seed).decide
    if name == "coldest":
        return ColdestNeighborScheduler(cfg.baseline.margin_c).decide
    raise ConfigurationError(
        f"unknown scheduler {name!r}, have {sorted(SCHEDULERS)}")


def evaluate_cell(cfg: ExperimentConfig, ctx, name: str, workload_section,
                  seq_len: int, seed: int, **artifacts) -> dict:
    """One sweep cell: fresh state, one episode, one report row."""
    decide = make_scheduler(name, cfg, seed, **artifacts)
    w = build_eval_workload(cfg, workload_section, seq_len)
    state = make_initial_state(ctx, [w] * cfg.eval.pipelines,
                               cfg.eval.placement)
    trace = run_episode(ctx, state, decide,
                        horizon=cfg.eval.horizon_epochs)
    s = trace.summary
    total_work = w.total_instructions * cfg.eval.pipelines
    frac = min(s["total_instructions"] / total_work, 1.0)
    exec_time = s["time_s"] if s["completed"] else \
        s["time_s"] / max(frac, 1e-12)
    return {
        "scheduler": name,
        "model": workload_section.model,
        "t_th_c": ctx.t_th,
        "seq_len": seq_len,
        "seed": seed,
        "pipelines": cfg.eval.pipelines,
        "epochs": s["epochs"],
        "exec_time_s": exec_time,
        "normalized_exec_time": 1.0,     # filled in by normalize_rows
        "total_instructions": s["total_instructions"],
        "completed": s["completed"],
        "t_peak_max_c": s["peak_max_c"],
        "t_peak_mean_c": s["peak_mean_c"],
        "t_peak_q25_c": s["peak_q25_c"],
        "t_peak_median_c": s["peak_median_c"],
        "t_peak_q75_c": s["peak_q75_c"],
        "violation_pct": s["violation_pct"],
        "queries_per_epoch": s["queries"] / s["epochs"] if s["epochs"] else 0.0,
        "queries_per_slot": s["queries_per_slot"],
        "migrations": s["migrations"],
        "o_mig_s": s["o_mig_s"],
        "o_dvfs_s": s["o_dvfs_s"],
        "decision_latency_us": s["decision_latency_us"],
    }


def evaluate_sweep(cfg: ExperimentConfig, schedulers=SCHEDULERS,
                   policy_net: PolicyNet | None = None,
                   oracle: MixtureOracle | None = None,
                   direct_net: PolicyNet | None = None) -> list[dict]:
    """Full grid: schedulers x workloads x T_th x L x seeds, ordered."""
    net, _ = build_thermal(cfg)       # calibrate once, share across thresholds
    rows = []
    for name in schedulers:
        for wsec in cfg.eval.workloads:
            for t_th in cfg.eval.t_th_list_c:
                ctx = build_context(cfg, t_th_c=t_th, net=net)
                for seq_len in cfg.eval.seq_lens:
                    for seed in cfg.eval.seeds:
                        rows.append(evaluate_cell(
                            cfg, ctx, name, wsec, seq_len, seed,
                            policy_net=policy_net, oracle=oracle,
                            direct_net=direct_net))
    return rows


def normalize_rows(rows: list[dict], reference: str) -> list[dict]:
    """normalized_exec_time := exec_time / reference row of the same cell.

    Cells without a reference row fall back to self-normalization.
    """
    ref = {}
    for r in rows:
        if r["scheduler"] == reference:
            key = (r["model"], r["t_th_c"], r["seq_len"], r["seed"])
            ref[key] = r["exec_time_s"]
    for r in rows:
        key = (r["model"], r["t_th_c"], r["seq_len"], r["seed"])
        base = ref.get(key, r["exec_time_s"])
        r["normalized_exec_time"] = r["exec_time_s"] / base if base > 0 else 1.0
    return rows


def summarize(rows: list[dict]) -> dict:
    """Per-scheduler medians of the headline columns."""
    out = {}
    for name in sorted({r["scheduler"] for r in rows}):
        sub = [r for r in rows if r["scheduler"] == name]
        out[name] = {
            "rows": len(sub),
            "median_total_instructions":
                float(np.median([r["total_instructions"] for r in sub])),
            "median_exec_time_s":
                float(np.median([r["exec_time_s"] for r in sub])),
            "median_normalized_exec_time":
                float(np.median([r["normalized_exec_time"] for r in sub])),
            "max_violation_pct":
                float(max(r["violation_pct"] for r in sub)),
            "mean_queries_per_epoch":
                float(np.mean([r["queries_per_epoch"] for r in sub])),
            "mean_decision_latency_us":
                float(np.mean([r["decision_latency_us"] for r in sub])),
        }
    return out


def build_report(rows: list[dict], reference: str = "ail") -> dict:
    present = {r["scheduler"] for r in rows}
    if reference not in present and rows:
        reference = rows[0]["scheduler"]
    rows = normalize_rows(list(rows), reference)
    return {
        "schema_version": REPORT_VERSION,
        "reference_scheduler": reference,
        "rows": rows,
        "summary": summarize(rows),
    }


def write_report_json(report: dict, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)


def write_report_csv(report: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in report["rows"]:
            w.writerow({k: r[k] for k in REPORT_COLUMNS})


def read_report_json(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != REPORT_VERSION:
        raise ConfigurationError(
            f"unsupported report version {doc.get('schema_version')!r}")
    return doc
