"""Command-line pipeline driver.

Every subcommand is a thin client of the HTTP service: it reads local
files (config, CSV tables, model documents), posts them, and writes the
returned artifacts back to disk.  Without --base-url the service runs
in-process, so the whole pipeline works with no server; with it, the
same commands drive a remote `stacksched serve`.

Exit codes: 0 success, 2 configuration error, 3 calibration failure,
4 fit/training failure.
"""

import functools
import json
import sys
from pathlib import Path

import click

from .client import ServiceClient, ServiceError
from .config import load_config
from .errors import ConfigurationError

_EXIT_BY_CODE = {"config": 2, "calibration": 3, "training": 4}


def _fail(code: str, detail: str):
    click.echo(f"error [{code}]: {detail}", err=True)
    sys.exit(_EXIT_BY_CODE.get(code, 4))


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ServiceError as exc:
            _fail(exc.code, exc.detail)
        except ConfigurationError as exc:
            _fail("config", str(exc))
        except OSError as exc:
            _fail("config", str(exc))
    return wrapper


def _config_dict(path: str | None) -> dict:
    """Validate locally (file errors -> exit 2) and post the full dump so
    the server sees resolved paths and explicit defaults."""
    return load_config(path).model_dump()


def _read_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} is not valid JSON: {exc}")


def _write_report(client_report: dict, out: str, csv_path: str | None):
    from .reports import write_report_csv, write_report_json
    write_report_json(client_report, out)
    click.echo(f"wrote {out} ({len(client_report['rows'])} rows)")
    if csv_path:
        write_report_csv(client_report, csv_path)
        click.echo(f"wrote {csv_path}")


config_option = click.option(
    "--config", "config_path", type=str, default=None,
    help="experiment config JSON (defaults apply when omitted)")
base_url_option = click.option(
    "--base-url", default=None,
    help="remote service URL (default: run the service in-process)")


@click.group()
def cli():
    """Thermal-aware kernel scheduling experiments."""


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import app
    uvicorn.run(app, host=host, port=port)


@cli.command("calibrate-thermal")
@config_option
@base_url_option
@_handled
def calibrate_thermal(config_path, base_url):
    """Fit the heat-sink conductance to the configured steady-state target."""
    cfg = _config_dict(config_path)
    with ServiceClient(base_url) as client:
        doc = client.calibrate(cfg)
    click.echo(json.dumps(doc))


@cli.command("collect-traces")
@config_option
@base_url_option
@click.option("--out", default=None, help="trace CSV path [config outputs]")
@_handled
def collect_traces_cmd(config_path, base_url, out):
    """Sweep pinned kernel runs over the (AMD, budget) grid."""
    cfg = _config_dict(config_path)
    out = out or cfg["outputs"]["traces"]
    with ServiceClient(base_url) as client:
        doc = client.collect_traces(cfg)
    Path(out).write_text(doc["csv_text"])
    click.echo(f"wrote {out} ({doc['rows']} rows, "
               f"{doc['operating_points']} operating points)")


@cli.command("train-oracle")
@config_option
@base_url_option
@click.option("--traces", "traces_path", default=None,
              help="input trace CSV [config outputs]")
@click.option("--out", default=None, help="oracle model path [config outputs]")
@click.option("--dataset-out", default=None,
              help="labeled pair CSV path [config outputs]")
@_handled
def train_oracle(config_path, base_url, traces_path, out, dataset_out):
    """Label migration pairs from traces and fit the expert mixture."""
    cfg = _config_dict(config_path)
    traces_path = traces_path or cfg["outputs"]["traces"]
    out = out or cfg["outputs"]["oracle_model"]
    dataset_out = dataset_out or cfg["outputs"]["dataset"]
    p = Path(traces_path)
    if not p.is_file():
        raise ConfigurationError(f"trace file not found: {p}")
    with ServiceClient(base_url) as client:
        doc = client.train_oracle(cfg, p.read_text())
    Path(out).write_text(json.dumps(doc["oracle"]))
    Path(dataset_out).write_text(doc["dataset_csv"])
    click.echo(f"wrote {dataset_out} ({doc['dataset_rows']} pairs)")
    click.echo(f"wrote {out} (router holdout accuracy "
               f"{doc['router_accuracy']:.3f})")


@cli.command("train-policy")
@config_option
@base_url_option
@click.option("--oracle", "oracle_path", default=None,
              help="oracle model path [config outputs]")
@click.option("--out", default=None, help="policy model path [config outputs]")
@_handled
def train_policy(config_path, base_url, oracle_path, out):
    """Distill the oracle into the dropout policy by active imitation."""
    cfg = _config_dict(config_path)
    oracle_path = oracle_path or cfg["outputs"]["oracle_model"]
    out = out or cfg["outputs"]["policy_model"]
    oracle = _read_json(oracle_path, "oracle model")
    with ServiceClient(base_url) as client:
        doc = client.train_policy(cfg, oracle)
    Path(out).write_text(json.dumps(doc["policy"]))
    for s in doc["stats"]:
        click.echo(f"round {s['round']}: queries/slot "
                   f"{s['queries_per_slot']:.3f}, pool "
                   f"{s['pool_oracle']}+{s['pool_agent']}, loss "
                   f"{s['loss_first']:.4f} -> {s['loss_final']:.4f}")
    click.echo(f"wrote {out}")


@cli.command()
@config_option
@base_url_option
@click.option("--policy", "policy_path", default=None,
              help="trained policy model (required for the ail scheduler)")
@click.option("--oracle", "oracle_path", default=None,
              help="optional oracle model: enables runtime queries")
@click.option("--direct", "direct_path", default=None,
              help="trained direct-baseline model")
@click.option("--scheduler", "schedulers", multiple=True,
              help="scheduler(s) to run [default: ail]")
@click.option("--tth", "t_ths", multiple=True, type=float,
              help="threshold sweep override, repeatable")
@click.option("--seq-len", "seq_lens", multiple=True, type=int,
              help="sequence-length sweep override, repeatable")
@click.option("--out", default=None, help="report JSON path [config outputs]")
@click.option("--csv", "csv_path", default=None,
              help="also write the report as CSV")
@_handled
def evaluate(config_path, base_url, policy_path, oracle_path, direct_path,
             schedulers, t_ths, seq_lens, out, csv_path):
    """Run the evaluation sweep and write the report."""
    cfg = _config_dict(config_path)
    out = out or cfg["outputs"]["report_json"]
    if t_ths:
        cfg["eval"]["t_th_list_c"] = list(t_ths)
    if seq_lens:
        cfg["eval"]["seq_lens"] = list(seq_lens)
    policy = _read_json(policy_path, "policy model") if policy_path else None
    oracle = _read_json(oracle_path, "oracle model") if oracle_path else None
    direct = _read_json(direct_path, "direct model") if direct_path else None
    with ServiceClient(base_url) as client:
        doc = client.evaluate(cfg, schedulers or ("ail",), policy, oracle,
                              direct)
    _write_report(doc["report"], out, csv_path)


@cli.command()
@config_option
@base_url_option
@click.option("--policy", "policy_path", default=None,
              help="trained policy model [config outputs]")
@click.option("--oracle", "oracle_path", default=None,
              help="optional oracle model: enables runtime queries")
@click.option("--direct", "direct_path", default=None,
              help="pre-trained direct baseline (otherwise trained now)")
@click.option("--direct-out", default=None,
              help="where to save a freshly trained direct baseline")
@click.option("--out", default=None, help="report JSON path [config outputs]")
@click.option("--csv", "csv_path", default=None,
              help="also write the report as CSV")
@_handled
def compare(config_path, base_url, policy_path, oracle_path, direct_path,
            direct_out, out, csv_path):
    """Evaluate the policy against both baselines in one report."""
    cfg = _config_dict(config_path)
    policy_path = policy_path or cfg["outputs"]["policy_model"]
    out = out or cfg["outputs"]["report_json"]
    csv_path = csv_path or cfg["outputs"]["report_csv"]
    policy = _read_json(policy_path, "policy model")
    oracle = _read_json(oracle_path, "oracle model") if oracle_path else None
    direct = _read_json(direct_path, "direct model") if direct_path else None
    with ServiceClient(base_url) as client:
        doc = client.compare(cfg, policy, oracle, direct)
    if direct is None:
        direct_out = direct_out or cfg["outputs"]["direct_model"]
        Path(direct_out).write_text(json.dumps(doc["direct"]))
        click.echo(f"wrote {direct_out}")
    _write_report(doc["report"], out, csv_path)
    for name, s in doc["report"]["summary"].items():
        click.echo(f"{name}: median instructions "
                   f"{s['median_total_instructions']:.3e}, max violation "
                   f"{s['max_violation_pct']:.2f}%, queries/epoch "
                   f"{s['mean_queries_per_epoch']:.3f}")


main = cli

if __name__ == "__main__":
    main()
