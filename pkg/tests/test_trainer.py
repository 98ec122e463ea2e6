import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from budgetnas import zoo
from budgetnas.compute import ParameterStore, Tape, backward, loss_per_example, predict
from budgetnas.costs import FlopsCost
from budgetnas.datasets import Dataset, two_moons
from budgetnas.errors import EmptyInput, InvalidConfig, NotConnected, TooLarge
from budgetnas.graph import Mask
from budgetnas.sampler import ArchitectureDistribution, entropy, grad_log_prob_batch, sample_masks, sigmoid
from budgetnas.trainer import (SGD, BaselineTracker, BudgetConfig, TrainConfig, brute_force_objectives,
                               check_optimality_gap, empty_objective, exact_expected_objective, objective_D,
                               run_training, train_step)


def moons_graph():
    return zoo.dense_graph([2, 4, 4, 2], [(1, 2), (1, 3), (2, 3), (1, 4), (2, 4), (3, 4)])


@given(st.floats(0, 1e6), st.floats(0, 10), st.floats(0, 1e6))
def test_hinge_penalty(max_cost, lam, cost):
    b = BudgetConfig(max_cost, lam, FlopsCost())
    assert b.penalty(cost) == pytest.approx(lam * max(0.0, cost - max_cost))
    assert BudgetConfig(max_cost, 0.0, FlopsCost()).penalty(cost) == 0.0


def test_budget_validation():
    with pytest.raises(InvalidConfig):
        BudgetConfig(-1.0, 1.0, FlopsCost())
    with pytest.raises(InvalidConfig):
        BudgetConfig(1.0, -1.0, FlopsCost())


def test_objective_is_loss_plus_hinge():
    g = zoo.budget_toy()
    data = zoo.linear_task(32)
    p = ParameterStore.for_graph(g, 0)
    b = BudgetConfig(8.0, 0.5, FlopsCost())
    h = Mask([(1, 2), (2, 4), (1, 4)])  # cost 44
    d, parts = objective_D(g, h, p, b, data.x, data.y, "SquaredError")
    pred = predict(g, h, data.x, p).data
    want = float(((pred - data.y) ** 2).sum(axis=1).mean())
    assert parts["loss"] == pytest.approx(want)
    assert parts["cost"] == 44.0 and parts["penalty"] == pytest.approx(0.5 * 36)
    assert d == pytest.approx(want + 18)
    with pytest.raises(NotConnected):
        objective_D(g, Mask([(1, 2)]), p, b, data.x, data.y, "SquaredError")


def test_expected_objective_single_edge_by_hand():
    g = zoo.dense_graph([2, 2], [(1, 2)])
    data = two_moons(30, seed=1)
    p = ParameterStore.for_graph(g, 0)
    b = BudgetConfig(1.0, 0.1, FlopsCost())
    d = ArchitectureDistribution(g.edge_order, [0.7])
    gam = sigmoid(np.array(0.7))
    full = objective_D(g, Mask.full(g), p, b, data.x, data.y)[0]
    empty = empty_objective(g, b, data.y)
    assert empty == pytest.approx(math.log(2))
    assert exact_expected_objective(g, d, p, b, data) == pytest.approx(gam * full + (1 - gam) * empty)


def test_expected_objective_with_saturated_logits():
    g = moons_graph()
    data = two_moons(30)
    p = ParameterStore.for_graph(g, 0)
    b = BudgetConfig(10.0, 0.01, FlopsCost())
    d = ArchitectureDistribution(g.edge_order, np.full(g.num_edges, 50.0))
    full = objective_D(g, Mask.full(g), p, b, data.x, data.y)[0]
    assert exact_expected_objective(g, d, p, b, data) == pytest.approx(full)


def test_expected_objective_size_limit():
    g = zoo.random_dag(np.random.default_rng(0), 7, 13)
    with pytest.raises(TooLarge):
        exact_expected_objective(g, ArchitectureDistribution.for_graph(g), ParameterStore.for_graph(g),
                                 BudgetConfig(1, 1, FlopsCost()), two_moons(10, dim=3))


def test_burn_in_step_is_plain_sgd_on_full_network():
    g = moons_graph()
    data = two_moons(16, seed=2)
    p = ParameterStore.for_graph(g, 0)
    ref = p.copy()
    d = ArchitectureDistribution.for_graph(g, 1.0)
    logits = d.logits.copy()
    lr, wd = 0.1, 1e-3
    train_step(g, d, p, BudgetConfig(1.0, 1.0, FlopsCost()), BaselineTracker(), (data.x, data.y),
               SGD(0.9, wd), lr, burn_in=True)
    np.testing.assert_array_equal(d.logits, logits)
    tape = Tape()
    pred = predict(g, Mask.full(g), data.x, ref, tape)
    _, grad = loss_per_example(pred.data, data.y)
    backward(tape, grad / len(data), ref)
    for n in ref.names():
        want = ref[n].data - lr * (ref[n].grad + wd * ref[n].data)
        np.testing.assert_allclose(p[n].data, want, rtol=1e-6, atol=1e-7)


def constant_objective_setup():
    """Zero weights and zero targets: every architecture, and the empty one, has D = 0."""
    g = zoo.random_dag(np.random.default_rng(3), 5, 8)
    p = ParameterStore.for_graph(g, 0)
    for t in p:
        t.data[...] = 0
    x = np.random.default_rng(0).normal(size=(20, 3)).astype(np.float32)
    return g, p, (x, np.zeros_like(x))


@pytest.mark.parametrize("mode", ["batch_mean", "fixed", "ema"])
def test_constant_objective_leaves_logits_unchanged(mode):
    g, p, batch = constant_objective_setup()
    d = ArchitectureDistribution(g.edge_order, np.linspace(-1, 1, g.num_edges), rng_seed=1)
    before = d.logits.copy()
    opt = SGD(0.9, 0.0)
    for _ in range(5):
        rep = train_step(g, d, p, BudgetConfig(0.0, 0.0, FlopsCost()), BaselineTracker(mode), batch, opt, 0.1,
                         arch_lr=1.0, loss="SquaredError")
        assert not rep.arch_grad.any()
    np.testing.assert_array_equal(d.logits, before)


def test_logit_gradient_is_score_times_advantage():
    g = moons_graph()
    data = two_moons(64, seed=3)
    p = ParameterStore.for_graph(g, 0)
    b = BudgetConfig(10.0, 0.05, FlopsCost())
    d = ArchitectureDistribution(g.edge_order, [1.0, -0.5, 0.3, 0.8, -1.0, 1.5], rng_seed=4)
    twin = d.copy()
    rep = train_step(g, d, p.copy(), b, BaselineTracker("fixed", value=0.3), (data.x, data.y), SGD(0, 0), 0.0,
                     arch_lr=0.0)
    draws = sample_masks(g, twin, len(data))
    dvals = []
    for j in range(len(data)):
        h = draws.record(g, j).mask
        xj, yj = data.x[j:j + 1], data.y[j:j + 1]
        try:
            dvals.append(objective_D(g, h, p, b, xj, yj)[0])
        except NotConnected:
            dvals.append(empty_objective(g, b, yj))
    want = (grad_log_prob_batch(twin, draws) * (np.array(dvals) - 0.3)[:, None]).mean(axis=0)
    np.testing.assert_allclose(rep.arch_grad, want, rtol=1e-5, atol=1e-7)


def test_step_penalties_follow_hinge():
    g = moons_graph()
    data = two_moons(64, seed=5)
    p = ParameterStore.for_graph(g, 0)
    b = BudgetConfig(30.0, 0.1, FlopsCost())
    d = ArchitectureDistribution.for_graph(g, 0.0, rng_seed=5)
    rep = train_step(g, d, p, b, BaselineTracker(), (data.x, data.y), SGD(), 0.01)
    np.testing.assert_allclose(rep.penalties, 0.1 * np.maximum(0, rep.costs - 30.0))
    assert rep.penalties.max() > 0


def test_unsampled_modules_keep_their_weights():
    g = zoo.budget_toy()
    data = zoo.linear_task(32)
    p = ParameterStore.for_graph(g, 0)
    before = p.copy()
    logits = np.full(g.num_edges, 50.0)
    logits[g.edge_index[(1, 4)]] = -50.0
    d = ArchitectureDistribution(g.edge_order, logits)
    train_step(g, d, p, BudgetConfig(8, 1, FlopsCost()), BaselineTracker(), (data.x, data.y), SGD(), 0.01,
               loss="SquaredError")
    for n in ("e1_4.w", "e1_4.b"):
        np.testing.assert_array_equal(p[n].data, before[n].data)
    assert not np.array_equal(p["e1_2.w"].data, before["e1_2.w"].data)


def test_disconnected_draws_are_scored_as_empty_network():
    g = zoo.chain_graph(4)
    x = np.random.default_rng(0).normal(size=(40, 4)).astype(np.float32)
    batch = (x, np.zeros_like(x))
    p = ParameterStore.for_graph(g, 0)
    d = ArchitectureDistribution.for_graph(g, 0.0, rng_seed=2)
    rep = train_step(g, d, p, BudgetConfig(100, 0, FlopsCost()), BaselineTracker(), batch, SGD(), 0.0,
                     resample_limit=0, loss="SquaredError")
    # P(connected) = 1/8 per example
    assert 20 < rep.disconnected < 40
    assert rep.fallbacks == rep.disconnected
    with pytest.raises(EmptyInput):
        train_step(g, d, p, BudgetConfig(1, 0, FlopsCost()), BaselineTracker(), (x[:0], x[:0]), SGD(), 0.1)


def test_baseline_tracker_modes():
    b = BaselineTracker("batch_mean")
    assert b.reference([1.0, 3.0]) == 2.0
    e = BaselineTracker("ema", decay=0.5)
    assert e.reference([4.0]) == 4.0
    e.update([4.0])
    e.update([2.0])
    assert e.reference([100.0]) == 3.0
    f = BaselineTracker("fixed", value=1.5)
    f.update([9.0])
    assert f.reference([9.0]) == 1.5
    with pytest.raises(InvalidConfig):
        BaselineTracker("median")


def test_train_config_defaults_and_validation():
    cfg = TrainConfig(epochs=300)
    assert cfg.burn_in_epochs == 50
    assert TrainConfig(epochs=0).burn_in_epochs == 0
    c = TrainConfig(epochs=10, burn_in_epochs=1, lr=1.0, lr_decay_epochs=[3, 6], lr_decay_factor=0.5, arch_lr=2.0)
    assert [c.lr_at(e) for e in (0, 3, 6, 9)] == [1.0, 0.5, 0.25, 0.25]
    assert c.arch_lr_at(6) == 0.5
    assert TrainConfig(epochs=4, burn_in_epochs=1, lr=0.3).arch_lr_at(0) == 0.3
    for bad in ({"epochs": 5, "burn_in_epochs": 5}, {"lr": 0}, {"momentum": 1.0}, {"batch_size": 0},
                {"baseline": "x"}, {"epochs": -1}):
        with pytest.raises(InvalidConfig):
            TrainConfig(**{"epochs": 5, "burn_in_epochs": 1, **bad})


def short_run(seed=0, epochs=6, burn_in=2):
    g = moons_graph()
    data = two_moons(120, seed=0)
    val, train = data.split(0.25, 0)
    p = ParameterStore.for_graph(g, seed)
    d = ArchitectureDistribution.for_graph(g, 3.0, rng_seed=seed)
    cfg = TrainConfig(epochs=epochs, burn_in_epochs=burn_in, lr=0.05, arch_lr=0.5, seed=seed)
    return run_training(g, d, p, BudgetConfig(20.0, 0.01, FlopsCost()), cfg, train, val), d


def test_run_training_is_deterministic():
    a, _ = short_run(1)
    b, _ = short_run(1)
    assert a.to_jsonl() == b.to_jsonl()
    assert a.to_jsonl() != short_run(2)[0].to_jsonl()


def test_burn_in_phase_and_checkpoints():
    log, _ = short_run(0, epochs=6, burn_in=2)
    epochs = log.epochs()
    assert [r["phase"] for r in epochs] == ["burn_in"] * 2 + ["sampled"] * 4
    assert all(r["entropy"] == log.records[0]["entropy"] for r in epochs[:2])
    assert all(r["disconnected"] == 0 for r in epochs[:2])
    assert log.checkpoints and all(ck.epoch > 2 for ck in log.checkpoints.values())
    assert log.summary["epochs"] == 6


def test_zero_epochs():
    log, d = short_run(0, epochs=0, burn_in=0)
    assert [r["event"] for r in log.records] == ["init"]
    assert log.summary is None and not log.checkpoints
    np.testing.assert_array_equal(d.logits, 3.0)
    assert log.to_jsonl().count("\n") == 1


def test_binding_budget_lowers_entropy_and_cost():
    g = zoo.budget_toy()
    data = zoo.linear_task()
    p = ParameterStore.for_graph(g, 0)
    d = ArchitectureDistribution.for_graph(g, 3.0)
    cfg = TrainConfig(epochs=40, burn_in_epochs=5, lr=0.005, arch_lr=0.1, loss="SquaredError")
    log = run_training(g, d, p, BudgetConfig(8.0, 1.0, FlopsCost()), cfg, data, data)
    assert entropy(d) < log.records[0]["entropy"]
    assert log.epochs()[-1]["val_cost"] <= 10


def test_brute_force_single_architecture():
    g = zoo.dense_graph([2, 2], [(1, 2)])
    table = brute_force_objectives(g, BudgetConfig(1, 0, FlopsCost()), two_moons(50), steps=20)
    assert list(table) == [Mask.full(g)]


def test_optimality_check_with_non_binding_budget():
    """With a budget that never binds, the search lands on an unconstrained brute-force optimum."""
    g, _, data, cfg, bf = zoo.optimality_problem()
    budget = BudgetConfig(1000.0, 1.0, FlopsCost())
    rep = check_optimality_gap(g, budget, data, cfg, seeds=[0, 1], bf_steps=bf["bf_steps"], bf_lr=bf["bf_lr"])
    assert all(r.gap <= rep.epsilon for r in rep.runs)


def test_optimality_report_fields():
    g = zoo.dense_graph([2, 2], [(1, 2)])
    data = Dataset(np.eye(2, dtype=np.float32).repeat(8, axis=0), np.eye(2, dtype=np.float32).repeat(8, axis=0))
    cfg = TrainConfig(epochs=30, burn_in_epochs=2, lr=0.05, arch_lr=0.5, loss="SquaredError", batch_size=16)
    rep = check_optimality_gap(g, BudgetConfig(10, 0, FlopsCost()), data, cfg, seeds=[0], bf_steps=200, bf_lr=0.05)
    assert rep.spread == 0 and rep.epsilon == 0
    assert rep.runs[0].architecture == [[1, 2]] and rep.runs[0].gap == 0


def test_expected_objective_matches_monte_carlo():
    g = zoo.dense_graph([2, 3, 3, 2], [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)])
    data = two_moons(40, seed=6)
    p = ParameterStore.for_graph(g, 1)
    b = BudgetConfig(15.0, 0.05, FlopsCost())
    d = ArchitectureDistribution(g.edge_order, [0.5, -0.3, 1.0, 0.2, -0.6], rng_seed=7)
    exact = exact_expected_objective(g, d, p, b, data)
    batch = sample_masks(g, d, 100_000)
    cache = {}
    values = np.empty(len(batch))
    for r in range(len(batch)):
        key = batch.bits[r].tobytes()
        if key not in cache:
            h = batch.record(g, r).mask
            try:
                cache[key] = objective_D(g, h, p, b, data.x, data.y)[0]
            except NotConnected:
                cache[key] = empty_objective(g, b, data.y)
        values[r] = cache[key]
    se = values.std(ddof=1) / math.sqrt(len(values))
    assert abs(values.mean() - exact) < 3 * se
