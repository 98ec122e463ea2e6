import numpy as np
import pytest
from hypothesis import given, strategies as st

from budgetnas import fabrics, zoo
from budgetnas.costs import (DistributedCost, FlopsCost, ParamsCost, StochasticCost, flops_cost, live_edges,
                             make_cost, module_flops, params_cost)
from budgetnas.errors import InvalidConfig
from budgetnas.graph import LayerSpec, Mask, ModuleSpec, build_graph, is_output_connected

from strategies import small_dags


def resnet_flops_by_hand(n, classes=10):
    """Mult-adds of a CIFAR ResNet-(6n+2): 3x3 stem, three stages, pooled linear head."""
    total = 32 * 32 * 3 * 16 * 9
    size, cin = 32, 16
    for stage, cout in enumerate((16, 32, 64)):
        for j in range(n):
            if stage > 0 and j == 0:
                size //= 2
                total += size * size * (9 * cin * cout + 9 * cout * cout + cin * cout)
            else:
                total += size * size * 18 * cout * cout
            cin = cout
    return total + 64 * classes


def resnet_fabric_edge_count(k, n):
    cross_per_group = {1: 0, 2: 3}.get(n, 3 * n - 2)
    return 1 + k * n + (k - 1) * cross_per_group


def cnf_edge_count(W, H):
    if W == 1:
        return 1 + (H - 1)
    return 1 + (W - 1) * (3 * H - 2) + 2 * (H - 1)


@pytest.mark.parametrize("n", [1, 3, 5, 7, 9, 18])
def test_resnet_mask_flops_match_hand_count(n):
    g = fabrics.resnet_fabric(3, n)
    assert flops_cost(g, fabrics.resnet_mask(3, n)) == resnet_flops_by_hand(n)


def test_resnet20_flops_value():
    g = fabrics.resnet_fabric(3, 3)
    assert flops_cost(g, fabrics.resnet_mask(3, 3)) == 40_813_184


def test_resnet20_params_within_table_tolerance():
    g = fabrics.resnet_fabric(3, 3)
    assert params_cost(g, fabrics.resnet_mask(3, 3)) == pytest.approx(0.27e6, rel=0.02)


@pytest.mark.parametrize("k,n", [(1, 1), (2, 1), (3, 1), (2, 2), (3, 2), (3, 3), (2, 5), (3, 9)])
def test_resnet_fabric_edge_count(k, n):
    assert fabrics.resnet_fabric(k, n, base_filters=2, input_shape=(1, 8, 8)).num_edges == resnet_fabric_edge_count(k, n)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_resnet_mask_is_the_main_row(n):
    g = fabrics.resnet_fabric(3, n, base_filters=2, input_shape=(1, 8, 8))
    h = fabrics.resnet_mask(3, n)
    assert len(h) == 1 + 3 * n
    assert is_output_connected(g, h)
    assert len(live_edges(g, h)) == len(h)
    assert all(g.edges[e].kind == "BasicBlock" for e in h if e != (1, 2))


def test_resnet_fabric_cross_inputs():
    n = 4
    g = fabrics.resnet_fabric(2, n, base_filters=2, input_shape=(1, 8, 8))
    for j in range(1, n + 1):
        dst = fabrics.resnet_fabric_layer_id(n, 2, j)
        # cross edges: neighbours j-1, j, j+1 in the previous group (2 at the ends)
        assert len(g.incoming[dst]) - 1 == (2 if j in (1, n) else 3)


@pytest.mark.parametrize("W,H", [(1, 6), (2, 6), (4, 6), (8, 6), (3, 4)])
def test_cnf_edge_count(W, H):
    size = 2 ** (H - 1)
    assert fabrics.cnf(W, H, filters=2, input_shape=(1, size, size)).num_edges == cnf_edge_count(W, H)


def test_cnf_segmentation_keeps_full_resolution_output():
    g = fabrics.cnf(3, 3, filters=2, input_shape=(1, 4, 4), task=("Segment", 5))
    assert g.output_shape == (5, 4, 4)


def test_generator_argument_errors():
    with pytest.raises(InvalidConfig):
        fabrics.resnet_fabric(0, 3)
    with pytest.raises(InvalidConfig):
        fabrics.resnet_fabric(4, 1, input_shape=(1, 4, 4))
    with pytest.raises(InvalidConfig):
        fabrics.cnf(2, 6, input_shape=(3, 30, 30))
    with pytest.raises(InvalidConfig):
        fabrics.cnf(1, 3, task=("Segment", 2), input_shape=(1, 4, 4))
    with pytest.raises(InvalidConfig):
        fabrics.cnf(2, 3, task=("Detect", 2), input_shape=(1, 4, 4))


def test_toy_scale_carries_reference_costs():
    big = fabrics.resnet_fabric(3, 2)
    toy = fabrics.resnet_fabric(3, 2, base_filters=2, input_shape=(3, 8, 8), toy_scale=True)
    for h in (Mask.full(big), fabrics.resnet_mask(3, 2)):
        assert flops_cost(toy, h) == flops_cost(big, h)
        assert params_cost(toy, h) == params_cost(big, h)
    c = fabrics.cnf(2, 3, filters=2, input_shape=(1, 4, 4), toy_scale=True)
    assert c.edges[c.edge_order[0]].cost_meta is not None


def test_module_flop_formulas():
    conv = ModuleSpec("Conv2d", {"in_channels": 3, "out_channels": 4, "kernel": 3, "stride": 1}, "c")
    assert module_flops(conv, (3, 8, 8)) == 8 * 8 * 3 * 4 * 9
    down = ModuleSpec("DownsampleConv", {"in_channels": 3, "out_channels": 4, "kernel": 3, "stride": 2}, "d")
    assert module_flops(down, (3, 8, 8)) == 4 * 4 * 3 * 4 * 9
    up = ModuleSpec("UpsampleConv", {"in_channels": 3, "out_channels": 4, "kernel": 3, "factor": 2}, "u")
    assert module_flops(up, (3, 4, 4)) == 4 * 4 * 3 * 4 * 9
    assert module_flops(ModuleSpec("Dense", {"in": 5, "out": 7}, "x"), (5,)) == 35
    assert module_flops(ModuleSpec("Identity"), (5,)) == 0
    meta = ModuleSpec("Dense", {"in": 5, "out": 7}, "x", {"flops": 11})
    assert module_flops(meta, (5,)) == 11


def test_shared_slot_counted_once():
    d = ModuleSpec("Dense", {"in": 3, "out": 3}, "shared")
    g = build_graph([LayerSpec(1, (3,)), LayerSpec(2, (3,)), LayerSpec(3, (3,))], [(1, 2, d), (2, 3, d)])
    assert params_cost(g, Mask.full(g)) == 12
    assert flops_cost(g, Mask.full(g)) == 18


def test_toy_costs():
    g = zoo.budget_toy()
    assert flops_cost(g, Mask.full(g)) == sum(zoo.TOY_COSTS.values())
    assert flops_cost(g, Mask([(1, 2), (2, 4)])) == 4
    # 2->3 is dead without 3->4
    assert flops_cost(g, Mask([(1, 2), (2, 3), (2, 4)])) == 4


def test_disconnected_mask_costs_nothing():
    g = fabrics.resnet_fabric(2, 2, base_filters=2, input_shape=(1, 8, 8))
    h = Mask([(1, 2)])
    assert flops_cost(g, h) == params_cost(g, h) == 0


@given(small_dags(max_layers=6, max_edges=10), st.integers(0, 2 ** 16))
def test_costs_monotone_in_mask(g, seed):
    rng = np.random.default_rng(seed)
    h = Mask.from_bits(g, rng.integers(0, 2, g.num_edges))
    bigger = Mask(set(h) | {g.edge_order[int(rng.integers(g.num_edges))]})
    assert flops_cost(g, h) <= flops_cost(g, bigger)
    assert params_cost(g, h) <= params_cost(g, bigger)
    assert flops_cost(g, h) <= flops_cost(g, Mask.full(g))


def test_stochastic_cost_is_seeded_and_clipped():
    g = zoo.budget_toy()
    h = Mask([(1, 2), (2, 4)])
    a = StochasticCost(FlopsCost(), ("gaussian", 100.0), seed=4)
    b = StochasticCost(FlopsCost(), ("gaussian", 100.0), seed=4)
    va = [a.evaluate(g, h) for _ in range(50)]
    assert va == [b.evaluate(g, h) for _ in range(50)]
    assert min(va) == 0.0 and all(v >= 0 for v in va)
    assert StochasticCost(FlopsCost(), ("uniform", 0.0)).evaluate(g, h) == 4.0
    with pytest.raises(ValueError):
        StochasticCost(FlopsCost(), ("cauchy", 1.0))


def test_make_cost():
    assert isinstance(make_cost("flops"), FlopsCost)
    assert isinstance(make_cost("Params"), ParamsCost)
    d = make_cost("distributed", 3, "BruteForceOptimal")
    assert isinstance(d, DistributedCost) and d.describe()["machines"] == 3
    assert isinstance(make_cost("flops", noise=("uniform", 1.0)), StochasticCost)
    with pytest.raises(ValueError):
        make_cost("latency")
    with pytest.raises(ValueError):
        DistributedCost(0)


def test_cost_check_catches_a_perturbed_flop_formula(monkeypatch):
    from budgetnas import costs, verify
    assert all(r.passed for r in verify.check_cost_tables())
    original = costs.module_flops
    monkeypatch.setattr(costs, "module_flops", lambda m, s: int(original(m, s) * 1.05))
    results = verify.check_cost_tables()
    assert not all(r.passed for r in results if "FLOPs" in r.name)
