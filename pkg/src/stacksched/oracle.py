"""Mixture-of-Gaussian-process migration oracle.

A lightweight router infers which kernel a pipeline is running from its
observed (IPS, MPKI) alone: a 1-D Fisher-discriminant projection picked
by grid-sweeping the projection angle, then nearest class mean.  One GP
expert per kernel regresses migration utility over the 8-dim pair
[I, C, AMD, budget] x (source, destination) with a squared-exponential
kernel; hyperparameters come from a small grid maximized on log marginal
likelihood.  Training inputs are standardized per expert and capped by a
seeded subsample.

Decisions: for every idle destination core, predict the one-step thermal
effect of moving the pipeline's power there (affine in the implicit-Euler
step, so a cached sensitivity matrix makes it cheap), drop unsafe
destinations, query the routed expert for the rest, and migrate to the
highest positive posterior mean (lowest core id wins ties).  Staying is
the fallback.  The full posterior (mean and variance) is evaluated per
candidate; the variance is what makes oracle inference expensive
relative to a distilled policy.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import ConfigurationError, FitError
from .perf import WARM
from .power import core_power, select_vf
from .sim import Decision, SimContext, SimState, last_observations

FORMAT_VERSION = 1

SIGMA_F_GRID = (0.5, 1.0, 2.0)
LENGTHSCALE_GRID = (0.5, 1.0, 2.0)
SIGMA_N_GRID = (1e-3, 1e-2, 1e-1)


# ---------------------------------------------------------------- router

@dataclass
class KernelRouter:
    """Nearest-class-mean over a 1-D Fisher projection of (IPS, MPKI)."""
    lam: np.ndarray            # unit (lam1, lam2), lam1 >= 0
    class_order: list          # kernel names, fixed order
    class_means: np.ndarray    # projected score mean per class
    i_mean: float
    i_std: float
    c_mean: float
    c_std: float
    fisher: float = 0.0

    def score(self, ips, mpki):
        zi = (np.asarray(ips, dtype=float) - self.i_mean) / self.i_std
        zc = (np.asarray(mpki, dtype=float) - self.c_mean) / self.c_std
        return self.lam[0] * zi + self.lam[1] * zc

    def route(self, ips: float, mpki: float, hint: str | None = None) -> str:
        """Classify one observation; `hint` (the kernel the schedule expects
        next) only breaks exact distance ties."""
        d = np.abs(self.class_means - self.score(ips, mpki))
        best = np.flatnonzero(d == d.min())
        if len(best) > 1 and hint in self.class_order:
            h = self.class_order.index(hint)
            if h in best:
                return hint
        return self.class_order[int(best[0])]

    def accuracy(self, ips, mpki, kernels) -> float:
        got = [self.route(i, c) for i, c in zip(ips, mpki)]
        return float(np.mean([g == k for g, k in zip(got, kernels)]))


def fit_router(ips, mpki, kernels, angle_step_deg: float = 1.0) -> KernelRouter:
    """Sweep projection angles at fixed resolution, keep the best Fisher ratio."""
    ips = np.asarray(ips, dtype=float)
    mpki = np.asarray(mpki, dtype=float)
    kernels = list(kernels)
    if not (len(ips) == len(mpki) == len(kernels)) or len(ips) == 0:
        raise ValueError("router needs equal-length, non-empty observation arrays")
    order = sorted(set(kernels))
    if len(order) < 2:
        raise ValueError("router needs at least two kernel classes")
    i_mean, i_std = float(ips.mean()), float(ips.std()) or 1.0
    c_mean, c_std = float(mpki.mean()), float(mpki.std()) or 1.0
    zi = (ips - i_mean) / i_std
    zc = (mpki - c_mean) / c_std
    labels = np.array([order.index(k) for k in kernels])

    best = None
    # lam1 = cos(theta) >= 0 covers theta in (-90, 90]
    for theta in np.arange(-90.0 + angle_step_deg, 90.0 + 1e-9, angle_step_deg):
        lam = np.array([np.cos(np.radians(theta)), np.sin(np.radians(theta))])
        s = lam[0] * zi + lam[1] * zc
        mu = s.mean()
        between = within = 0.0
        means = np.empty(len(order))
        for k in range(len(order)):
            sk = s[labels == k]
            means[k] = sk.mean()
            between += len(sk) * (means[k] - mu) ** 2
            within += ((sk - means[k]) ** 2).sum()
        ratio = between / max(within, 1e-12)
        if best is None or ratio > best[0]:
            best = (ratio, lam, means)
    return KernelRouter(best[1], order, best[2], i_mean, i_std, c_mean, c_std,
                        fisher=float(best[0]))


def fit_router_from_traces(traces, holdout_every: int = 2,
                           angle_step_deg: float = 1.0):
    """Fit on even slices, report accuracy on the held-out odd slices."""
    train = [r for r in traces.rows if r["slice"] % holdout_every == 0]
    test = [r for r in traces.rows if r["slice"] % holdout_every != 0]
    router = fit_router([r["ips"] for r in train], [r["mpki"] for r in train],
                        [r["kernel"] for r in train], angle_step_deg)
    acc = router.accuracy([r["ips"] for r in test], [r["mpki"] for r in test],
                          [r["kernel"] for r in test]) if test else 1.0
    return router, acc


# ---------------------------------------------------------------- GP expert

def _sq_dists(a, b):
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)


@dataclass
class GpExpert:
    """Squared-exponential GP regressor on standardized 8-dim pair features."""
    x_train: np.ndarray        # standardized
    alpha: np.ndarray
    chol: np.ndarray           # lower triangular
    sigma_f: float
    lengthscale: float
    sigma_n: float
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    jitter: float = 0.0
    log_marginal: float = 0.0

    def _kvec(self, x_std):
        d2 = np.sum((self.x_train - x_std) ** 2, axis=1)
        return self.sigma_f ** 2 * np.exp(-d2 / (2 * self.lengthscale ** 2))

    def predict(self, x) -> tuple[float, float]:
        """Posterior (mean, variance) at one raw 8-dim input, in label units."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.x_train.shape[1],):
            raise ValueError(f"expected {self.x_train.shape[1]}-dim input")
        xs = (x - self.x_mean) / self.x_std
        k = self._kvec(xs)
        mu = float(k @ self.alpha)
        v = solve_triangular(self.chol, k, lower=True)
        var = self.sigma_f ** 2 + self.sigma_n ** 2 - float(v @ v)
        var = max(var, 0.0)
        return (self.y_mean + self.y_std * mu, var * self.y_std ** 2)

    def predict_standardized(self, x) -> tuple[float, float]:
        mu, var = self.predict(x)
        return (mu - self.y_mean) / self.y_std, var / self.y_std ** 2


def _chol_with_jitter(k):
    # C-contiguous factor so predictions are bitwise stable across a
    # JSON save/load (scipy returns Fortran order)
    for jitter in (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        try:
            fac = cholesky(k + jitter * np.eye(len(k)), lower=True)
            return np.ascontiguousarray(fac), jitter
        except np.linalg.LinAlgError:
            continue
    raise FitError("kernel matrix not positive definite even with jitter 1e-4")


def fit_expert(x, y, cap: int = 1000, seed: int = 0,
               sigma_f_grid=SIGMA_F_GRID, lengthscale_grid=LENGTHSCALE_GRID,
               sigma_n_grid=SIGMA_N_GRID) -> GpExpert:
    """Standardize, subsample to cap, grid-search hyperparameters by log
    marginal likelihood, and precompute the Cholesky/alpha pair."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or len(x) != len(y) or len(y) == 0:
        raise ValueError("x must be (n, d) with matching non-empty y")
    if len(x) > cap:
        idx = np.sort(np.random.default_rng(seed).choice(len(x), cap,
                                                         replace=False))
        x, y = x[idx], y[idx]
    x_mean = x.mean(axis=0)
    x_std = np.maximum(x.std(axis=0), 1e-12)
    y_mean = float(y.mean())
    y_std = float(y.std()) or 1.0
    xs = (x - x_mean) / x_std
    ys = (y - y_mean) / y_std
    d2 = _sq_dists(xs, xs)
    n = len(xs)

    best = None
    for sf in sigma_f_grid:
        for ls in lengthscale_grid:
            k_noiseless = sf ** 2 * np.exp(-d2 / (2 * ls ** 2))
            for sn in sigma_n_grid:
                k = k_noiseless + sn ** 2 * np.eye(n)
                try:
                    chol, jit = _chol_with_jitter(k)
                except FitError:
                    continue
                alpha = cho_solve((chol, True), ys)
                lml = (-0.5 * float(ys @ alpha)
                       - float(np.log(np.diag(chol)).sum())
                       - 0.5 * n * np.log(2 * np.pi))
                if best is None or lml > best[0]:
                    best = (lml, sf, ls, sn, chol, alpha, jit)
    if best is None:
        raise FitError("no hyperparameter combination gave a positive-definite kernel")
    lml, sf, ls, sn, chol, alpha, jit = best
    return GpExpert(xs, alpha, chol, sf, ls, sn, x_mean, x_std, y_mean, y_std,
                    jitter=jit, log_marginal=lml)


# ---------------------------------------------------------------- mixture

@dataclass
class MixtureOracle:
    router: KernelRouter
    experts: dict                      # kernel -> GpExpert
    budget_clip: tuple = (1.0, 5.5)    # GP training support of the budget feature
    router_accuracy: float = 1.0

    def expert_for(self, ips, mpki, hint=None) -> tuple[str, GpExpert]:
        kernel = self.router.route(ips, mpki, hint)
        if kernel not in self.experts:
            raise ConfigurationError(f"no expert for kernel {kernel!r}")
        return kernel, self.experts[kernel]


def fit_mixture(traces, dataset, cap: int = 1000, seed: int = 0,
                budget_clip=(1.0, 5.5), angle_step_deg: float = 1.0,
                sigma_f_grid=SIGMA_F_GRID, lengthscale_grid=LENGTHSCALE_GRID,
                sigma_n_grid=SIGMA_N_GRID) -> MixtureOracle:
    router, acc = fit_router_from_traces(traces, angle_step_deg=angle_step_deg)
    experts = {}
    ss = np.random.SeedSequence(seed)
    for kernel, child in zip(dataset.kernels(), ss.spawn(len(dataset.kernels()))):
        x, y = dataset.arrays(kernel)
        experts[kernel] = fit_expert(x, y, cap=cap,
                                     seed=int(child.generate_state(1)[0]),
                                     sigma_f_grid=sigma_f_grid,
                                     lengthscale_grid=lengthscale_grid,
                                     sigma_n_grid=sigma_n_grid)
    return MixtureOracle(router, experts, tuple(budget_clip), acc)


# ---------------------------------------------------------------- decisions

def warm_counters(ctx: SimContext, obs_row: dict) -> tuple[float, float]:
    """Undo the transient cache-refill skew on observed (IPS, MPKI).

    The scheduler knows how long ago it migrated each pipeline, so it can
    correct counters to their warm equivalents.  Matters because utility
    labels pair warm source states; feeding raw cold counters makes the
    current core look like a worse operating point than it is and causes
    migration thrashing.
    """
    decay = np.exp(-obs_row["since_migration"] / ctx.profile.warmup_tau_epochs)
    i_warm = obs_row["ips"] / (1.0 - ctx.profile.cold_ips_drop * decay)
    c_warm = obs_row["mpki"] / (1.0 + ctx.profile.cold_mpki_gain * decay)
    return float(i_warm), float(c_warm)


def estimate_model_scale(ctx: SimContext, kernel: str, amd: float,
                         obs_row: dict) -> float:
    """Back out the pipeline's throughput scale from its observed counters."""
    pred = ctx.profile.ips_at(kernel, amd, obs_row["f_ghz"])
    pred *= ctx.profile.cold_start_factor(obs_row["since_migration"])
    if pred <= 0:
        return 1.0
    return float(np.clip(obs_row["ips"] / pred, 0.25, 2.0))


def candidate_features(ctx: SimContext, oracle_clip, kernel: str,
                       obs_row: dict, src_core: int, dst_core: int,
                       budget_w: float, scale: float):
    """8-dim [I,C,AMD,B]x(src,dst) feature pair for one destination.

    Source counters are warm-corrected; the destination side is the warm
    profile prediction at its AMD.  The budget feature is clipped to the
    GP training support (budgets above it saturate the V/f table anyway).
    """
    b = float(np.clip(budget_w, *oracle_clip))
    i_src, c_src = warm_counters(ctx, obs_row)
    a_src = ctx.topo.amd(src_core)
    a_dst = ctx.topo.amd(dst_core)
    f_dst = select_vf(ctx.power, budget_w, 45.0).f_ghz  # warm estimate
    i_dst = ctx.profile.ips_at(kernel, a_dst, f_dst) * scale
    c_dst = ctx.profile.mpki(kernel, a_dst)
    return np.array([i_src, c_src, a_src, b, i_dst, c_dst, a_dst, b])


class OracleScheduler:
    """Full-mixture decision maker; also exposes per-decision metadata so an
    imitation learner can harvest (features, label) pairs."""

    def __init__(self, oracle: MixtureOracle, alternatives: int = 0,
                 seed: int = 0):
        self.oracle = oracle
        self.alternatives = alternatives
        self.rng = np.random.default_rng(seed)

    def decide(self, ctx: SimContext, state: SimState, records) -> dict:
        obs = last_observations(records)
        decisions = {}
        active = state.active()
        if not obs:  # first epoch: no counters yet, nothing to decide on
            return {p.pid: Decision() for p in active}
        budget, emergency = ctx.uniform_budget(state)
        occupied = {p.core for p in active}
        idle = [c for c in range(ctx.topo.n_cores) if c not in occupied]

        # estimated per-core power if everyone stays, and its thermal step
        power_est = np.zeros(ctx.topo.n_cores)
        for p in active:
            t_c = float(state.temps[p.core])
            level = ctx.power.lowest if emergency else \
                select_vf(ctx.power, budget, t_c)
            power_est[p.core] = core_power(ctx.power, level, t_c)
        t_base = ctx.net.transient_step(state.temps, power_est, ctx.dt)
        sens = ctx.net.step_sensitivity(ctx.dt)

        claimed = set()
        for p in active:
            row = obs.get(p.pid)
            if row is None:
                decisions[p.pid] = Decision()
                continue
            d = self.decide_one(ctx, state, row, p, budget, emergency, t_base,
                                sens, power_est, idle, claimed)
            if d.action == "migrate":
                claimed.add(d.target)
            decisions[p.pid] = d
        return decisions

    def decide_one(self, ctx: SimContext, state: SimState, row: dict,
                   pipeline, budget: float, emergency: bool, t_base, sens,
                   power_est, idle, claimed) -> Decision:
        """Score one pipeline's candidates against the precomputed thermal
        step; shared by the standalone oracle and the policy's query path."""
        i_warm, c_warm = warm_counters(ctx, row)
        kernel, expert = self.oracle.expert_for(i_warm, c_warm,
                                                hint=pipeline.kernel)
        scale = estimate_model_scale(ctx, kernel, ctx.topo.amd(pipeline.core),
                                     row)
        p_src = power_est[pipeline.core]
        scored = []
        for dst in idle:
            if dst in claimed:
                continue
            t_dst = float(state.temps[dst])
            lvl_dst = ctx.power.lowest if emergency else \
                select_vf(ctx.power, budget, t_dst)
            p_dst = core_power(ctx.power, lvl_dst, t_dst)
            t_pred = t_base + p_dst * sens[:, dst] - p_src * sens[:, pipeline.core]
            if float(t_pred.max()) > ctx.t_th:
                continue  # unsafe destination
            x = candidate_features(ctx, self.oracle.budget_clip, kernel,
                                   row, pipeline.core, dst, budget, scale)
            mu, var = expert.predict(x)
            scored.append((dst, mu, var, x))
        best = None
        for dst, mu, var, x in scored:  # ascending id; strict > keeps lowest
            if mu > 0 and (best is None or mu > best[1]):
                best = (dst, mu, var, x)
        stay_unsafe = float(t_base.max()) > ctx.t_th
        stay_x8 = candidate_features(ctx, self.oracle.budget_clip, kernel, row,
                                     pipeline.core, pipeline.core, budget, scale)
        # the GP's value at the symmetric self-pair: the predicted cost of a
        # pointless migration (cold-start), used as the stay label downstream
        mu_stay, _ = expert.predict(stay_x8)
        info = {"kernel": kernel, "scale": scale, "budget": budget,
                "n_candidates": len(scored), "stay_x8": stay_x8,
                "stay_mu": mu_stay}
        if self.alternatives and scored:
            picks = self.rng.choice(len(scored),
                                    min(self.alternatives, len(scored)),
                                    replace=False)
            info["alternatives"] = [(scored[i][3], scored[i][1])
                                    for i in sorted(picks)]
        if best is None:
            return Decision("stay", force_min_vf=stay_unsafe, queried=True,
                            info=info)
        dst, mu, var, x = best
        info.update({"mu": mu, "sigma2": var, "x": x})
        return Decision("migrate", dst, queried=True, info=info)


# ---------------------------------------------------------------- persistence

def oracle_to_dict(oracle: MixtureOracle) -> dict:
    r = oracle.router
    return {
        "format_version": FORMAT_VERSION,
        "router": {
            "lambda": r.lam.tolist(),
            "class_order": list(r.class_order),
            "class_means": r.class_means.tolist(),
            "i_mean": r.i_mean, "i_std": r.i_std,
            "c_mean": r.c_mean, "c_std": r.c_std,
            "fisher": r.fisher,
        },
        "router_accuracy": oracle.router_accuracy,
        "budget_clip": list(oracle.budget_clip),
        "experts": {
            k: {
                "sigma_f": e.sigma_f, "lengthscale": e.lengthscale,
                "sigma_n": e.sigma_n, "jitter": e.jitter,
                "log_marginal": e.log_marginal,
                "x_mean": e.x_mean.tolist(), "x_std": e.x_std.tolist(),
                "y_mean": e.y_mean, "y_std": e.y_std,
                "x_train": e.x_train.tolist(),
                "alpha": e.alpha.tolist(),
                "chol": e.chol.tolist(),
            } for k, e in sorted(oracle.experts.items())
        },
    }


def oracle_from_dict(doc: dict) -> MixtureOracle:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported oracle format {doc.get('format_version')!r}")
    r = doc["router"]
    router = KernelRouter(np.array(r["lambda"]), list(r["class_order"]),
                          np.array(r["class_means"]), r["i_mean"], r["i_std"],
                          r["c_mean"], r["c_std"], r.get("fisher", 0.0))
    experts = {}
    for k, e in doc["experts"].items():
        experts[k] = GpExpert(
            np.array(e["x_train"]), np.array(e["alpha"]), np.array(e["chol"]),
            e["sigma_f"], e["lengthscale"], e["sigma_n"],
            np.array(e["x_mean"]), np.array(e["x_std"]),
            e["y_mean"], e["y_std"], e.get("jitter", 0.0),
            e.get("log_marginal", 0.0))
    return MixtureOracle(router, experts, tuple(doc["budget_clip"]),
                         doc.get("router_accuracy", 1.0))


def save_oracle(oracle: MixtureOracle, path):
    with open(path, "w") as fh:
        json.dump(oracle_to_dict(oracle), fh)


def load_oracle(path) -> MixtureOracle:
    with open(path) as fh:
        return oracle_from_dict(json.load(fh))
