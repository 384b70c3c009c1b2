"""Reference schedulers the distilled policy is judged against.

Two baselines:

* coldest-neighbor — purely reactive: once a core runs within a fixed
  margin of the thermal threshold, hop to the coldest idle face-adjacent
  core.  No model, no learning, no queries.
* direct learner — the same network architecture as the policy, trained
  only on its own epsilon-greedy experience.  Migration labels are
  realized counterfactual utilities (replay with and without the move);
  it never consults the oracle, so its query count is zero by
  construction.
"""

from dataclasses import dataclass

import numpy as np

from .errors import TrainingError
from .oracle import estimate_model_scale
from .policy import (AilParams, PolicyNet, Pool, _kernel_index,
                     candidate_set, init_policy, policy_utility,
                     realized_utility, train)
from .power import core_power, select_vf
from .sim import (Decision, SimContext, SimState, last_observations,
                  step_epoch)

TRIGGER_MARGIN_C = 2.0


class ColdestNeighborScheduler:
    """Migrate to the coldest idle 6-neighbor once the core runs hot.

    Trigger: core temperature >= t_th - margin.  Ties between equally
    cold neighbors go to the lowest core id; with no idle neighbor the
    pipeline stays put and rides the DVFS budget down.
    """

    def __init__(self, margin_c: float = TRIGGER_MARGIN_C):
        self.margin_c = margin_c

    def decide(self, ctx: SimContext, state: SimState, records) -> dict:
        occupied = {p.core for p in state.active()}
        claimed = set()
        decisions = {}
        for p in state.active():
            t_core = float(state.temps[p.core])
            if t_core < ctx.t_th - self.margin_c:
                decisions[p.pid] = Decision()
                continue
            best = None
            for nb in ctx.topo.neighbors(p.core):  # ascending id
                if nb in occupied or nb in claimed:
                    continue
                if best is None or state.temps[nb] < state.temps[best]:
                    best = nb
            if best is None:
                decisions[p.pid] = Decision()
            else:
                claimed.add(best)
                decisions[p.pid] = Decision("migrate", best,
                                            info={"trigger_c": t_core})
        return decisions


class DirectScheduler:
    """Greedy net decisions with epsilon-uniform exploration, no queries.

    Uses the same candidate construction and thermal safety filter as the
    policy scheduler; with probability epsilon the action is drawn
    uniformly from {safe candidates} + {stay} instead of by argmax.
    """

    def __init__(self, net: PolicyNet, epsilon: float = 0.2, seed: int = 0,
                 budget_clip=(1.0, 5.5)):
        self.net = net
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)
        self.clip = tuple(budget_clip)

    def decide(self, ctx: SimContext, state: SimState, records) -> dict:
        obs = last_observations(records)
        active = state.active()
        if not obs:
            return {p.pid: Decision() for p in active}
        budget, emergency = ctx.uniform_budget(state)
        occupied = {p.core for p in active}
        idle = [c for c in range(ctx.topo.n_cores) if c not in occupied]

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
            kernel = p.kernel
            scale = estimate_model_scale(ctx, kernel, ctx.topo.amd(p.core),
                                         row)
            cands, feats, _, stay_x, stay_unsafe = candidate_set(
                ctx, self.clip, state, p, row, budget, emergency, t_base,
                sens, power_est, idle, claimed, kernel, scale)
            info = {"kernel": kernel, "budget": budget, "stay_x": stay_x,
                    "explore": False}
            if cands and self.rng.random() < self.epsilon:
                info["explore"] = True
                pick = int(self.rng.integers(len(cands) + 1))  # last = stay
                if pick == len(cands):
                    d = Decision("stay", force_min_vf=stay_unsafe, info=info)
                else:
                    info["features"] = feats[pick]
                    d = Decision("migrate", cands[pick], info=info)
            else:
                best_i = None
                if feats:
                    mu = policy_utility(self.net, np.vstack(feats))
                    for i in range(len(cands)):  # strict > keeps lowest id
                        if mu[i] > 0 and (best_i is None or mu[i] > mu[best_i]):
                            best_i = i
                if best_i is None:
                    d = Decision("stay", force_min_vf=stay_unsafe, info=info)
                else:
                    info["features"] = feats[best_i]
                    d = Decision("migrate", cands[best_i], info=info)
            if d.action == "migrate":
                claimed.add(d.target)
            decisions[p.pid] = d
        return decisions


@dataclass
class DirectParams(AilParams):
    epsilon0: float = 0.2
    epsilon_decay: float = 0.9


def run_direct(ctx: SimContext, make_state, params: DirectParams = None,
               net: PolicyNet | None = None) -> tuple[PolicyNet, list]:
    """Self-supervised counterpart of the imitation loop.

    Same round/episode/epoch budget and the same architecture, but every
    utility label comes from the learner's own behavior: migrations are
    scored by counterfactual replay, stays anchor the utility head at
    zero.  Exploration decays by epsilon_decay per round.
    """
    if params is None:
        params = DirectParams()
    if net is None:
        net = init_policy(seed=params.seed)
    pool = Pool([], [], [])
    stats = []
    episode = 0
    for rnd in range(params.rounds):
        eps = params.epsilon0 * params.epsilon_decay ** rnd
        slots = migrations = explored = 0
        pending = []
        for _ in range(params.episodes_per_round):
            state = make_state(episode)
            records = []
            sched = DirectScheduler(net, eps,
                                    seed=params.seed * 1000 + episode)
            for _ in range(params.horizon):
                if not state.active():
                    break
                decisions = sched.decide(ctx, state, records)
                snapshot = None
                for pid, d in sorted(decisions.items()):
                    if "kernel" not in d.info:
                        continue  # no counters yet at this slot
                    k = _kernel_index(net, d.info["kernel"])
                    if d.action == "migrate":
                        migrations += 1
                        explored += bool(d.info.get("explore"))
                        if snapshot is None:
                            snapshot = state.clone()
                        pending.append((snapshot, pid, d,
                                        d.info["features"], k))
                    else:
                        pool.add(d.info["stay_x"], k, 0.0)
                slots += len(state.active())
                records.append(step_epoch(ctx, state, decisions))
            episode += 1
        for pre, pid, d, feats, k in pending:
            pool.add(feats, k,
                     realized_utility(ctx, pre, pid, d, params.agent_horizon))
        if len(pool) == 0:
            raise TrainingError("no experience collected")
        history = train(net, np.vstack(pool.x), np.array(pool.kernel_idx),
                        np.array(pool.utility), epochs=params.epochs,
                        batch_size=params.batch_size, lr=params.lr,
                        momentum=params.momentum, seed=params.seed + rnd)
        stats.append({
            "round": rnd,
            "epsilon": eps,
            "episodes": params.episodes_per_round,
            "decision_slots": slots,
            "queries": 0,
            "queries_per_slot": 0.0,
            "migrations": migrations,
            "explored": explored,
            "pool": len(pool),
            "loss_first": history[0],
            "loss_final": history[-1],
        })
    return net, stats
