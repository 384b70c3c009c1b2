"""Policy network: forward/backward, MC-dropout gate, imitation loop."""

import numpy as np
import pytest

from stacksched.arch import ChipTopology
from stacksched.dataset import TraceGrid, build_training_set, collect_traces
from stacksched.errors import TrainingError
from stacksched.oracle import fit_mixture
from stacksched.perf import KERNELS, KernelProfile
from stacksched.policy import (AilParams, PolicyScheduler, forward,
                               init_policy, loss_and_grads, mc_uncertainty,
                               policy_from_dict, policy_to_dict,
                               policy_utility, realized_utility, run_ail,
                               train)
from stacksched.power import PowerParams
from stacksched.sim import (Decision, SimContext, build_workload,
                            make_initial_state, run_episode, step_epoch)
from stacksched.thermal import ThermalNetwork


def test_init_shapes_and_determinism():
    net = init_policy(seed=0)
    assert net.widths == (10, 64, 32, 32, 5)
    assert [w.shape for w in net.weights] == [(10, 64), (64, 32), (32, 32), (32, 5)]
    assert net.n_params == 10 * 64 + 64 + 64 * 32 + 32 + 32 * 32 + 32 + 32 * 5 + 5
    net2 = init_policy(seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(net.weights, net2.weights))
    assert not np.array_equal(init_policy(seed=1).weights[0], net.weights[0])
    # He-uniform bound on the first layer
    assert np.abs(net.weights[0]).max() <= np.sqrt(6.0 / 10)


def test_forward_deterministic_vs_dropout():
    net = init_policy(seed=0)
    x = np.random.default_rng(0).normal(size=(4, 10))
    out1, _ = forward(net, x)
    out2, _ = forward(net, x)
    assert np.array_equal(out1, out2)
    assert out1.shape == (4, 5)
    # same mask seed reproduces; different seed differs
    da, _ = forward(net, x, mask_seed=7)
    db, _ = forward(net, x, mask_seed=7)
    dc, _ = forward(net, x, mask_seed=8)
    assert np.array_equal(da, db)
    assert not np.array_equal(da, dc)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 3)))


def test_gradients_match_central_differences():
    # 20 random (net, batch) pairs with fixed dropout masks; h = 1e-5
    h = 1e-5
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        net = init_policy(seed=200 + trial)
        x = rng.normal(size=(6, 10))
        k = rng.integers(0, 4, size=6)
        u = rng.normal(size=6)
        w = rng.uniform(0.5, 1.0, size=6)
        seed = 300 + trial
        _, gw, gb = loss_and_grads(net, x, k, u, w, mask_seed=seed)
        for params, grads in ((net.weights, gw), (net.biases, gb)):
            for p_arr, g_arr in zip(params, grads):
                flat = p_arr.ravel()
                gflat = g_arr.ravel()
                idx = rng.choice(flat.size, min(40, flat.size), replace=False)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + h
                    lp, _, _ = loss_and_grads(net, x, k, u, w, mask_seed=seed)
                    flat[i] = orig - h
                    lm, _, _ = loss_and_grads(net, x, k, u, w, mask_seed=seed)
                    flat[i] = orig
                    num = (lp - lm) / (2 * h)
                    rel = abs(num - gflat[i]) / max(1e-8, abs(num) + abs(gflat[i]))
                    worst = max(worst, rel)
    assert worst < 1e-4


def test_loss_decreases_and_halves():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(300, 10))
    k = (x[:, 1] > 0).astype(int) + 2 * (x[:, 5] > 0)
    u = np.tanh(x[:, 0] - 0.5 * x[:, 4])
    net = init_policy(seed=1)
    history = train(net, x, k, u, epochs=50, seed=2)
    assert len(history) == 50
    assert history[-1] < 0.5 * history[0]
    # the kernel head actually classifies
    logits, _ = forward(net, x)
    acc = np.mean(logits[:, :4].argmax(axis=1) == k)
    assert acc > 0.8


def test_train_empty_pool():
    with pytest.raises(TrainingError):
        train(init_policy(), np.zeros((0, 10)), [], [])


def test_standardization_frozen_after_first_fit():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 10)) * 100 + 3
    net = init_policy(seed=0)
    train(net, x, np.zeros(50, dtype=int), np.zeros(50), epochs=1)
    mean1 = net.x_mean.copy()
    train(net, x * 10, np.zeros(50, dtype=int), np.zeros(50), epochs=1)
    assert np.array_equal(net.x_mean, mean1)


def test_mc_uncertainty_properties():
    net = init_policy(seed=0)
    x = np.random.default_rng(1).normal(size=10)
    u1 = mc_uncertainty(net, x, n_passes=20, seed=5)
    u2 = mc_uncertainty(net, x, n_passes=20, seed=5)
    assert u1 == u2 > 0.0
    assert mc_uncertainty(net, x, n_passes=20, seed=6) != u1
    # no dropout -> no spread (up to rounding in the sample mean)
    solid = init_policy(seed=0, p_dropout=0.0)
    assert mc_uncertainty(solid, x, n_passes=20, seed=5) < 1e-20
    with pytest.raises(ValueError):
        mc_uncertainty(net, x, n_passes=1)


def test_serialization_roundtrip():
    import json
    net = init_policy(seed=3)
    rng = np.random.default_rng(2)
    train(net, rng.normal(size=(40, 10)), rng.integers(0, 4, 40),
          rng.normal(size=40), epochs=2)
    doc = json.loads(json.dumps(policy_to_dict(net)))
    back = policy_from_dict(doc)
    x = rng.normal(size=(8, 10))
    assert np.array_equal(forward(net, x)[0], forward(back, x)[0])
    assert back.standardized and back.kernel_order == tuple(KERNELS)
    with pytest.raises(Exception):
        policy_from_dict({"format_version": 9})


# ------------------------------------------------- scheduling and the loop

@pytest.fixture(scope="module")
def ctx():
    topo = ChipTopology(4, 4, 4)
    return SimContext(topo=topo, net=ThermalNetwork(topo),
                      power=PowerParams(), profile=KernelProfile.load(),
                      dt=1e-3, t_th=70.0)


@pytest.fixture(scope="module")
def mixture(ctx):
    grid = TraceGrid(models=("vit",), amd_levels=(3.0, 4.5),
                     budgets=(1.0, 3.0, 5.5), slices=40)
    traces = collect_traces(ctx, grid)
    ds = build_training_set(ctx, traces, grid)
    return fit_mixture(traces, ds, cap=80, seed=0)


def test_query_gate_extremes(ctx, mixture):
    net = init_policy(seed=0)
    state = make_initial_state(ctx, [build_workload("vit")] * 2, "corners")
    rec = step_epoch(ctx, state, {})
    # tau = 0: dropout variance is almost surely positive -> always query
    always = PolicyScheduler(net, mixture, tau=0.0, seed=1)
    d = always.decide(ctx, state, [rec])
    assert all(dd.queried for dd in d.values())
    # tau = inf: never query
    never = PolicyScheduler(net, mixture, tau=np.inf, seed=1)
    d = never.decide(ctx, state, [rec])
    assert not any(dd.queried for dd in d.values())


def test_query_rate_monotone_in_tau(ctx, mixture):
    # fixed states, fixed seeds: the query count can only shrink as tau grows
    net = init_policy(seed=0)
    state = make_initial_state(ctx, [build_workload("vit")] * 4, "corners")
    rec = step_epoch(ctx, state, {})
    sigmas = []
    sched = PolicyScheduler(net, mixture, tau=np.inf, seed=3)
    d = sched.decide(ctx, state, [rec])
    sigmas = [dd.info["u_sigma2"] for dd in d.values()]
    taus = [0.0] + sorted(sigmas) + [np.inf]
    counts = []
    for tau in taus:
        sched = PolicyScheduler(net, mixture, tau=tau, seed=3)
        d = sched.decide(ctx, state, [rec])
        counts.append(sum(dd.queried for dd in d.values()))
    assert counts[0] == 4 and counts[-1] == 0
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_policy_without_oracle_never_queries(ctx):
    net = init_policy(seed=0)
    state = make_initial_state(ctx, [build_workload("vit")], "corners")
    rec = step_epoch(ctx, state, {})
    sched = PolicyScheduler(net, oracle=None, tau=0.0, seed=1)
    d = sched.decide(ctx, state, [rec])
    assert not d[0].queried  # uncertain, but nobody to ask


def test_realized_utility_signs(ctx):
    state = make_initial_state(ctx, [build_workload("vit")], "corners")
    for _ in range(3):
        step_epoch(ctx, state, {})
    state.pipelines[0].task_idx = 1  # attention phase, AMD-sensitive
    state.pipelines[0].remaining = state.pipelines[0].workload.tasks[1].instructions
    good = Decision("migrate", ctx.topo.core_id(1, 1, 1))
    assert realized_utility(ctx, state, 0, good, horizon=20) > 0.05
    peer = [c for c in range(64)
            if ctx.topo.amd(c) == 4.5 and c != state.pipelines[0].core][0]
    lateral = Decision("migrate", peer)
    u = realized_utility(ctx, state, 0, lateral, horizon=20)
    assert -0.08 < u < 0.0  # pure cold-start cost


def test_run_ail_learns_and_reduces_queries(ctx, mixture):
    def make_state(i):
        return make_initial_state(ctx, [build_workload("vit")] * 4, "corners")

    params = AilParams(rounds=3, episodes_per_round=1, horizon=40,
                       epochs=15, seed=0)
    net, stats = run_ail(ctx, mixture, make_state, params)
    assert len(stats) == 3
    # bootstrap round queries every slot that has counters (all but epoch 0)
    assert stats[0]["queries_per_slot"] > 0.9
    assert stats[-1]["queries_per_slot"] < 1.0
    assert stats[-1]["pool_oracle"] >= stats[0]["pool_oracle"]
    assert net.standardized
    # the trained policy acts: from corners it should migrate like the oracle
    sched = PolicyScheduler(net, None, tau=np.inf, seed=9)
    state = make_initial_state(ctx, [build_workload("vit")] * 4, "corners")
    trace = run_episode(ctx, state, sched.decide, horizon=40)
    assert trace.summary["queries"] == 0
    assert trace.summary["migrations"] >= 1


def test_policy_decisions_respect_occupancy_and_safety(ctx, mixture):
    net = init_policy(seed=0)
    state = make_initial_state(ctx, [build_workload("vit")] * 6, "corners")
    rec = step_epoch(ctx, state, {})
    state.temps = np.full(64, ctx.t_th + 5.0)
    cool = [21, 22, 25]
    for c in cool:
        state.temps[c] = 46.0
    sched = PolicyScheduler(net, mixture, tau=np.inf, seed=2)
    d = sched.decide(ctx, state, [rec])
    targets = [dd.target for dd in d.values() if dd.action == "migrate"]
    assert len(targets) == len(set(targets))
    assert all(t in cool for t in targets)
