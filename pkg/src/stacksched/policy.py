"""Distilled migration policy: a small MLP with Monte-Carlo dropout,
trained by active imitation of the GP oracle.

The network maps 10 features — warm-corrected source counters, predicted
destination counters (each as [IPS, MPKI, AMD, budget]), current peak
temperature, and the thermal threshold — to 4 kernel logits plus one
utility estimate.  Dropout stays on at inference: the sample variance of
the utility head over repeated stochastic passes is the uncertainty that
gates oracle queries (query when it exceeds tau).

Training minimizes cross-entropy on the kernel head plus squared error
on the utility head, summed over oracle demonstrations plus
lambda-weighted successful self-experiences.  Forward, backward, and SGD
with momentum are written out by hand in numpy; gradients are verified
against central differences in the tests.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TrainingError
from .perf import KERNELS
from .oracle import (MixtureOracle, OracleScheduler, candidate_features,
                     estimate_model_scale)
from .power import core_power, select_vf
from .sim import (Decision, SimContext, SimState, last_observations,
                  run_episode, step_epoch)

POLICY_FORMAT_VERSION = 1
DEFAULT_WIDTHS = (10, 64, 32, 32, 5)


@dataclass
class PolicyNet:
    widths: tuple
    weights: list                    # per layer, (fan_in, fan_out)
    biases: list
    p_dropout: float = 0.1
    kernel_order: tuple = KERNELS
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    standardized: bool = False

    def __post_init__(self):
        if self.x_mean is None:
            self.x_mean = np.zeros(self.widths[0])
        if self.x_std is None:
            self.x_std = np.ones(self.widths[0])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def clone(self) -> "PolicyNet":
        return PolicyNet(self.widths, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.p_dropout,
                         self.kernel_order, self.x_mean.copy(),
                         self.x_std.copy(), self.standardized)


def init_policy(seed: int = 0, widths=DEFAULT_WIDTHS,
                p_dropout: float = 0.1) -> PolicyNet:
    """He-uniform initialization: U(+-sqrt(6/fan_in)) per layer."""
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ConfigurationError(f"bad layer widths {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return PolicyNet(tuple(widths), weights, biases, p_dropout)


def _dropout_masks(net: PolicyNet, batch: int, mask_seed) -> list:
    """Inverted-scaling masks for every hidden layer, or None for eval mode."""
    if mask_seed is None:
        return [None] * (len(net.widths) - 2)
    rng = np.random.default_rng(mask_seed)
    keep = 1.0 - net.p_dropout
    return [(rng.random((batch, w)) < keep) / keep
            for w in net.widths[1:-1]]


def forward(net: PolicyNet, x, mask_seed=None):
    """Batch forward pass; returns (output, cache) with cache for backprop.

    Output columns: four kernel logits then the utility estimate.  With
    mask_seed=None the pass is deterministic (no dropout); any integer
    seed reproduces one stochastic dropout pass exactly.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.widths[0]:
        raise ValueError(f"expected {net.widths[0]} features, got {x.shape[1]}")
    h = (x - net.x_mean) / net.x_std
    masks = _dropout_masks(net, len(h), mask_seed)
    cache = {"x": h, "z": [], "a": [h], "masks": masks}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = cache["a"][-1] @ w + b
        cache["z"].append(z)
        if i < len(net.weights) - 1:
            a = np.maximum(z, 0.0)
            if masks[i] is not None:
                a = a * masks[i]
            cache["a"].append(a)
    return cache["z"][-1], cache


def policy_utility(net: PolicyNet, x) -> np.ndarray:
    out, _ = forward(net, x)
    return out[:, -1]


def policy_logits(net: PolicyNet, x) -> np.ndarray:
    out, _ = forward(net, x)
    return out[:, :-1]


def mc_uncertainty(net: PolicyNet, x, n_passes: int = 20,
                   seed: int = 0) -> float:
    """Unbiased sample variance of the utility head over dropout passes.

    All passes share the input, so they run as one batched forward: row i
    applies exactly the masks forward(x, mask_seed=seeds[i]) would draw.
    """
    if n_passes < 2:
        raise ValueError("need at least two passes for a variance")
    seeds = np.random.SeedSequence(seed).generate_state(n_passes)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != net.widths[0]:
        raise ValueError(f"expected {net.widths[0]} features, got {x.shape[1]}")
    keep = 1.0 - net.p_dropout
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    a = np.repeat((x - net.x_mean) / net.x_std, n_passes, axis=0)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        if i < len(net.weights) - 1:
            mask = (np.vstack([r.random((1, z.shape[1])) for r in rngs])
                    < keep) / keep
            a = np.maximum(z, 0.0) * mask
    return float(z[:, -1].var(ddof=1))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(net: PolicyNet, x, kernel_idx, utility, weight=None,
                   mask_seed=None):
    """Weighted mean of [cross-entropy + squared error] and its gradients.

    kernel_idx indexes net.kernel_order; weight defaults to 1 per sample
    (oracle demonstrations get 1, self-experiences get lambda).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    kernel_idx = np.asarray(kernel_idx, dtype=int)
    utility = np.asarray(utility, dtype=float)
    n = len(x)
    w = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
    out, cache = forward(net, x, mask_seed=mask_seed)
    logits, u_hat = out[:, :-1], out[:, -1]
    probs = _softmax(logits)
    ce = -np.log(np.maximum(probs[np.arange(n), kernel_idx], 1e-300))
    se = (u_hat - utility) ** 2
    loss = float(np.sum(w * (ce + se)) / n)

    d_out = np.zeros_like(out)
    d_logits = probs.copy()
    d_logits[np.arange(n), kernel_idx] -= 1.0
    d_out[:, :-1] = d_logits * (w / n)[:, None]
    d_out[:, -1] = 2.0 * (u_hat - utility) * w / n

    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    delta = d_out
    for i in range(len(net.weights) - 1, -1, -1):
        grads_w[i] = cache["a"][i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ net.weights[i].T
            if cache["masks"][i - 1] is not None:
                delta = delta * cache["masks"][i - 1]
            delta = delta * (cache["z"][i - 1] > 0)
    return loss, grads_w, grads_b


def train(net: PolicyNet, x, kernel_idx, utility, weight=None, epochs: int = 50,
          batch_size: int = 32, lr: float = 1e-3, momentum: float = 0.9,
          seed: int = 0, dropout: bool = True) -> list:
    """SGD with momentum over shuffled minibatches; returns per-epoch loss.

    The epoch loss is the weighted full-pool objective evaluated without
    dropout after the epoch's updates.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if len(x) == 0:
        raise TrainingError("empty training pool")
    kernel_idx = np.asarray(kernel_idx, dtype=int)
    utility = np.asarray(utility, dtype=float)
    w = np.ones(len(x)) if weight is None else np.asarray(weight, dtype=float)
    if not net.standardized:
        net.x_mean = x.mean(axis=0)
        net.x_std = np.maximum(x.std(axis=0), 1e-12)
        net.standardized = True
    rng = np.random.default_rng(seed)
    vel_w = [np.zeros_like(p) for p in net.weights]
    vel_b = [np.zeros_like(p) for p in net.biases]
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for lo in range(0, len(x), batch_size):
            idx = order[lo:lo + batch_size]
            seed_b = int(rng.integers(2 ** 63)) if dropout else None
            _, gw, gb = loss_and_grads(net, x[idx], kernel_idx[idx],
                                       utility[idx], w[idx], mask_seed=seed_b)
            for i in range(len(net.weights)):
                vel_w[i] = momentum * vel_w[i] - lr * gw[i]
                vel_b[i] = momentum * vel_b[i] - lr * gb[i]
                net.weights[i] += vel_w[i]
                net.biases[i] += vel_b[i]
        loss, _, _ = loss_and_grads(net, x, kernel_idx, utility, w)
        history.append(loss)
    return history


# ---------------------------------------------------------------- decisions

def stay_features(ctx: SimContext, clip, kernel: str, obs_row: dict,
                  core: int, budget_w: float, scale: float):
    """Self-pair features: destination side is the warm prediction at the
    current core (utility of staying is zero by construction)."""
    return candidate_features(ctx, clip, kernel, obs_row, core, core,
                              budget_w, scale)


def candidate_set(ctx: SimContext, clip, state: SimState, pipeline, row,
                  budget: float, emergency: bool, t_base, sens, power_est,
                  idle, claimed, kernel: str, scale: float):
    """Safety-filtered migration candidates as 10-feature rows.

    Returns (cands, feats, stay_x8, stay_x, stay_unsafe); shared by the
    net-driven schedulers so they all apply the oracle's thermal filter.
    """
    t_peak = float(state.temps.max())
    p_src = power_est[pipeline.core]
    cands, feats = [], []
    # destination features depend on the destination only through its AMD
    # (the V/f estimate inside uses a fixed warm temperature), so cache the
    # row per AMD value instead of rebuilding it for every idle core
    row_by_amd = {}
    for dst in idle:
        if dst in claimed:
            continue
        t_dst = float(state.temps[dst])
        lvl_dst = ctx.power.lowest if emergency else \
            select_vf(ctx.power, budget, t_dst)
        p_dst = core_power(ctx.power, lvl_dst, t_dst)
        t_pred = t_base + p_dst * sens[:, dst] - p_src * sens[:, pipeline.core]
        if float(t_pred.max()) > ctx.t_th:
            continue
        a_dst = ctx.topo.amd(dst)
        x = row_by_amd.get(a_dst)
        if x is None:
            x8 = candidate_features(ctx, clip, kernel, row, pipeline.core,
                                    dst, budget, scale)
            x = np.concatenate([x8, [t_peak, ctx.t_th]])
            row_by_amd[a_dst] = x
        cands.append(dst)
        feats.append(x)
    stay_x8 = stay_features(ctx, clip, kernel, row, pipeline.core, budget,
                            scale)
    stay_x = np.concatenate([stay_x8, [t_peak, ctx.t_th]])
    stay_unsafe = float(t_base.max()) > ctx.t_th
    return cands, feats, stay_x8, stay_x, stay_unsafe


class PolicyScheduler:
    """Net-driven decisions with an uncertainty-gated oracle fallback.

    Mirrors the oracle's decision procedure — same safety filter, same
    viability rule, same lowest-id tie-break — but scores candidates with
    one deterministic network forward each.  When the MC-dropout variance
    at the chosen candidate exceeds tau the decision is delegated to the
    oracle (if one is attached) and marked as a query.
    """

    def __init__(self, net: PolicyNet, oracle: MixtureOracle | None = None,
                 tau: float = 0.15, mc_passes: int = 20, seed: int = 0,
                 oracle_alternatives: int = 0, budget_clip=(1.0, 5.5)):
        self.net = net
        self.tau = tau
        self.mc_passes = mc_passes
        self.rng = np.random.default_rng(seed)
        self.clip = tuple(oracle.budget_clip) if oracle else tuple(budget_clip)
        self.oracle_sched = (OracleScheduler(oracle, oracle_alternatives,
                                             seed=seed + 1)
                            if oracle is not None else None)

    def decide(self, ctx: SimContext, state: SimState, records) -> dict:
        obs = last_observations(records)
        active = state.active()
        if not obs:
            return {p.pid: Decision() for p in active}
        budget, emergency = ctx.uniform_budget(state)
        occupied = {p.core for p in active}
        idle = [c for c in range(ctx.topo.n_cores) if c not in occupied]
        t_peak = float(state.temps.max())

        power_est = np.zeros(ctx.topo.n_cores)
        for p in active:
            t_c = float(state.temps[p.core])
            level = ctx.power.lowest if emergency else \
                select_vf(ctx.power, budget, t_c)
            power_est[p.core] = core_power(ctx.power, level, t_c)
        t_base = ctx.net.transient_step(state.temps, power_est, ctx.dt)
        sens = ctx.net.step_sensitivity(ctx.dt)

        decisions = {}
        claimed = set()
        for p in active:
            row = obs.get(p.pid)
            if row is None:
                decisions[p.pid] = Decision()
                continue
            kernel = p.kernel  # the schedule's expected kernel
            scale = estimate_model_scale(ctx, kernel, ctx.topo.amd(p.core), row)
            cands, feats, stay_x8, stay_x, stay_unsafe = candidate_set(
                ctx, self.clip, state, p, row, budget, emergency, t_base,
                sens, power_est, idle, claimed, kernel, scale)

            if feats:
                mu = policy_utility(self.net, np.vstack(feats))
                best_i = None
                for i in range(len(cands)):  # ascending id; strict > keeps lowest
                    if mu[i] > 0 and (best_i is None or mu[i] > mu[best_i]):
                        best_i = i
            else:
                mu, best_i = np.array([]), None

            probe = feats[best_i] if best_i is not None else stay_x
            u_sigma2 = mc_uncertainty(self.net, probe, self.mc_passes,
                                      seed=int(self.rng.integers(2 ** 63)))
            info = {"kernel": kernel, "budget": budget, "t_peak": t_peak,
                    "u_sigma2": u_sigma2, "features": probe,
                    "stay_x8": stay_x8}
            if u_sigma2 > self.tau and self.oracle_sched is not None:
                d = self.oracle_sched.decide_one(ctx, state, row, p, budget,
                                                 emergency, t_base, sens,
                                                 power_est, idle, claimed)
                info.update(d.info)
                info["u_sigma2"] = u_sigma2
                d = Decision(d.action, d.target, d.force_min_vf, queried=True,
                             info=info)
            elif best_i is None:
                d = Decision("stay", force_min_vf=stay_unsafe, info=info)
            else:
                info["mu"] = float(mu[best_i])
                d = Decision("migrate", cands[best_i], info=info)
            if d.action == "migrate":
                claimed.add(d.target)
            decisions[p.pid] = d
        return decisions


# ------------------------------------------------------- imitation learning

@dataclass
class Pool:
    """Flat (features, kernel index, utility) training pool."""
    x: list
    kernel_idx: list
    utility: list

    def __len__(self):
        return len(self.x)

    def add(self, x, k, u):
        self.x.append(np.asarray(x, dtype=float))
        self.kernel_idx.append(int(k))
        self.utility.append(float(u))


def _kernel_index(net: PolicyNet, kernel: str) -> int:
    return net.kernel_order.index(kernel)


def _harvest_query(net: PolicyNet, ctx: SimContext, d: Decision, t_peak: float,
                   pool: Pool):
    """Turn one answered query into demonstration rows: the chosen action
    (GP mean as utility target), the stay anchor at the GP's own value for
    the symmetric self-pair, and any sampled alternatives the oracle also
    scored.  Anchoring stay at 0 instead puts every equivalent-core
    candidate exactly on the migrate boundary and lets regression noise
    flip it; the GP itself prices such moves below zero (cold-start)."""
    info = d.info
    k = _kernel_index(net, info["kernel"])
    tail = [t_peak, ctx.t_th]
    if d.action == "migrate":
        pool.add(np.concatenate([info["x"], tail]), k, info["mu"])
    if "stay_x8" in info:
        pool.add(np.concatenate([info["stay_x8"], tail]), k,
                 info.get("stay_mu", 0.0))
    for x8, mu in info.get("alternatives", []):
        pool.add(np.concatenate([x8, tail]), k, mu)


def realized_utility(ctx: SimContext, pre_state: SimState, pid: int,
                     decision: Decision, horizon: int = 20) -> float:
    """Counterfactual value of one migration: replay `horizon` epochs from a
    snapshot with and without it (no other decisions in either branch)."""
    stay = pre_state.clone()
    run_episode(ctx, stay, None, horizon=horizon)
    mig = pre_state.clone()
    step_epoch(ctx, mig, {pid: Decision(decision.action, decision.target)})
    if horizon > 1:
        run_episode(ctx, mig, None, horizon=horizon - 1)
    i_stay = stay.pipelines[pid].instructions_done - \
        pre_state.pipelines[pid].instructions_done
    i_mig = mig.pipelines[pid].instructions_done - \
        pre_state.pipelines[pid].instructions_done
    if i_stay <= 0:
        return 0.0
    return (i_mig - i_stay) / i_stay


@dataclass
class AilParams:
    rounds: int = 5
    episodes_per_round: int = 2
    horizon: int = 120
    tau: float = 0.15
    mc_passes: int = 20
    self_weight: float = 0.5       # lambda in the mixed objective
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    agent_horizon: int = 20        # counterfactual scoring horizon
    oracle_alternatives: int = 4
    seed: int = 0


def run_ail(ctx: SimContext, oracle: MixtureOracle, make_state,
            params: AilParams = AilParams(),
            net: PolicyNet | None = None) -> tuple[PolicyNet, list]:
    """DAgger-style loop: demonstrate, train, act with gated queries, repeat.

    make_state(episode_index) builds a fresh initial SimState.  Round 1 is
    pure oracle demonstrations (every decision queried); later rounds run
    the gated policy, harvesting oracle answers plus its own successful
    migrations (realized utility > 0, weighted by self_weight).  Returns
    the trained net and per-round stats.
    """
    if net is None:
        net = init_policy(seed=params.seed)
    d_oracle = Pool([], [], [])
    d_agent = Pool([], [], [])
    stats = []
    episode = 0
    for rnd in range(params.rounds):
        slots = queries = 0
        pending = []  # (pre-state, pid, decision, features, kernel idx)
        for _ in range(params.episodes_per_round):
            state = make_state(episode)
            records = []
            if rnd == 0:
                sched = OracleScheduler(oracle, params.oracle_alternatives,
                                        seed=params.seed * 1000 + episode)
                decide = sched.decide
            else:
                sched = PolicyScheduler(net, oracle, params.tau,
                                        params.mc_passes,
                                        seed=params.seed * 1000 + episode,
                                        oracle_alternatives=params.oracle_alternatives)
                decide = sched.decide
            for _ in range(params.horizon):
                if not state.active():
                    break
                decisions = decide(ctx, state, records)
                t_peak = float(state.temps.max())
                snapshot = None
                for pid, d in sorted(decisions.items()):
                    if d.queried:
                        queries += 1
                        _harvest_query(net, ctx, d, t_peak, d_oracle)
                    elif d.action == "migrate":
                        if snapshot is None:
                            snapshot = state.clone()
                        pending.append((snapshot, pid, d,
                                        d.info.get("features"),
                                        _kernel_index(net, d.info["kernel"])))
                slots += len(state.active())
                records.append(step_epoch(ctx, state, decisions))
            episode += 1
        successes = 0
        for pre, pid, d, feats, k in pending:
            if feats is None:
                continue
            u = realized_utility(ctx, pre, pid, d, params.agent_horizon)
            if u > 0:    # only successful self-experiences are reinforced
                d_agent.add(feats, k, u)
                successes += 1
        if len(d_oracle) == 0:
            raise TrainingError("no oracle demonstrations harvested")
        x = np.vstack(d_oracle.x + d_agent.x)
        k_idx = np.array(d_oracle.kernel_idx + d_agent.kernel_idx)
        u = np.array(d_oracle.utility + d_agent.utility)
        w = np.concatenate([np.ones(len(d_oracle)),
                            np.full(len(d_agent), params.self_weight)])
        history = train(net, x, k_idx, u, w, epochs=params.epochs,
                        batch_size=params.batch_size, lr=params.lr,
                        momentum=params.momentum, seed=params.seed + rnd)
        stats.append({
            "round": rnd,
            "episodes": params.episodes_per_round,
            "decision_slots": slots,
            "queries": queries,
            "queries_per_slot": queries / slots if slots else 0.0,
            "pool_oracle": len(d_oracle),
            "pool_agent": len(d_agent),
            "agent_successes": successes,
            "loss_first": history[0],
            "loss_final": history[-1],
        })
    return net, stats


# ---------------------------------------------------------------- persistence

def policy_to_dict(net: PolicyNet) -> dict:
    return {
        "format_version": POLICY_FORMAT_VERSION,
        "widths": list(net.widths),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "p_dropout": net.p_dropout,
        "kernel_order": list(net.kernel_order),
        "x_mean": net.x_mean.tolist(),
        "x_std": net.x_std.tolist(),
        "standardized": net.standardized,
    }


def policy_from_dict(doc: dict) -> PolicyNet:
    if doc.get("format_version") != POLICY_FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported policy format {doc.get('format_version')!r}")
    return PolicyNet(tuple(doc["widths"]),
                     [np.array(w) for w in doc["weights"]],
                     [np.array(b) for b in doc["biases"]],
                     doc["p_dropout"], tuple(doc["kernel_order"]),
                     np.array(doc["x_mean"]), np.array(doc["x_std"]),
                     doc["standardized"])


def save_policy(net: PolicyNet, path):
    with open(path, "w") as fh:
        json.dump(policy_to_dict(net), fh)


def load_policy(path) -> PolicyNet:
    with open(path) as fh:
        return policy_from_dict(json.load(fh))
