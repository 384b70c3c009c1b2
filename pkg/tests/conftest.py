"""Shared artifact pipeline for the acceptance suite.

The heavyweight stages (trace grid, labeled pairs, expert mixture,
trained policies) are built lazily-once per session through
`PipelineCache`, so each acceptance criterion pays for exactly the
stages it uses and its wall-clock stays attributable.  A terminal
summary hook echoes the one-line verdicts collected during the run.
"""

import time

import pytest

VERDICTS = []


def record_verdict(criterion: int, ok: bool, detail: str, seconds: float):
    line = (f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}"
            f"  ({seconds:6.1f}s)  {detail}")
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


class PipelineCache:
    """Build-on-demand pipeline artifacts, memoized for the session."""

    def __init__(self):
        self._store = {}
        self.timings = {}

    def _get(self, key, builder):
        if key not in self._store:
            t0 = time.perf_counter()
            self._store[key] = builder()
            self.timings[key] = time.perf_counter() - t0
        return self._store[key]

    def config(self):
        from stacksched.config import load_config
        return self._get("config", lambda: load_config(None))

    def thermal_net(self):
        from stacksched.config import build_thermal

        def build():
            net, info = build_thermal(self.config())
            return net
        return self._get("thermal_net", build)

    def trace_ctx(self):
        from stacksched.config import build_context
        cfg = self.config()
        return self._get("trace_ctx", lambda: build_context(
            cfg, t_th_c=cfg.trace.t_th_c, net=self.thermal_net()))

    def scenario_ctx(self):
        """Standard scenario machinery: T_th from the policy section."""
        from stacksched.config import build_context
        return self._get("scenario_ctx", lambda: build_context(
            self.config(), net=self.thermal_net()))

    def traces(self):
        from stacksched.config import build_trace_grid
        from stacksched.dataset import collect_traces
        return self._get("traces", lambda: collect_traces(
            self.trace_ctx(), build_trace_grid(self.config())))

    def dataset(self):
        from stacksched.config import build_trace_grid
        from stacksched.dataset import build_training_set
        cfg = self.config()
        return self._get("dataset", lambda: build_training_set(
            self.trace_ctx(), self.traces(), build_trace_grid(cfg),
            horizon=cfg.trace.label_horizon_epochs))

    def oracle(self, cap=None):
        from stacksched.oracle import fit_mixture
        cfg = self.config()
        cap = cfg.oracle.expert_cap if cap is None else cap
        return self._get(("oracle", cap), lambda: fit_mixture(
            self.traces(), self.dataset(), cap=cap, seed=cfg.oracle.seed))

    def policy(self):
        from stacksched.config import build_ail_params, training_state_factory
        from stacksched.policy import run_ail

        def build():
            cfg = self.config()
            ctx = self.scenario_ctx()
            return run_ail(ctx, self.oracle(), training_state_factory(cfg, ctx),
                           build_ail_params(cfg))
        return self._get("policy", build)     # (net, stats)

    def direct(self):
        from stacksched.baselines import DirectParams, run_direct
        from stacksched.config import build_ail_params, training_state_factory

        def build():
            cfg = self.config()
            ctx = self.scenario_ctx()
            base = build_ail_params(cfg)
            params = DirectParams(
                **{f: getattr(base, f) for f in base.__dataclass_fields__},
                epsilon0=cfg.baseline.epsilon0,
                epsilon_decay=cfg.baseline.epsilon_decay)
            return run_direct(ctx, training_state_factory(cfg, ctx), params)
        return self._get("direct", build)     # (net, stats)


@pytest.fixture(scope="session")
def pipeline():
    return PipelineCache()
