"""Small hand-made super networks used by tests, demos and the verify command."""
from __future__ import annotations

import numpy as np

from .costs import FlopsCost
from .datasets import Dataset
from .graph import LayerSpec, ModuleSpec, SuperNetGraph, build_graph
from .trainer import BudgetConfig, TrainConfig


def dense(d_in, d_out, k, i):
    return ModuleSpec("Dense", {"in": d_in, "out": d_out}, f"e{k}_{i}")


def identity():
    return ModuleSpec("Identity")


def chain_graph(num_layers=3, dim=4, kind="Dense") -> SuperNetGraph:
    layers = [LayerSpec(i, (dim,)) for i in range(1, num_layers + 1)]
    make = (lambda k, i: dense(dim, dim, k, i)) if kind == "Dense" else (lambda k, i: identity())
    return build_graph(layers, [(i, i + 1, make(i, i + 1)) for i in range(1, num_layers)])


def diamond_graph(dim=4, kind="Identity") -> SuperNetGraph:
    """Input splits into two branches that merge at the output."""
    layers = [LayerSpec(i, (dim,)) for i in range(1, 5)]
    make = (lambda k, i: dense(dim, dim, k, i)) if kind == "Dense" else (lambda k, i: identity())
    return build_graph(layers, [(1, 2, make(1, 2)), (1, 3, make(1, 3)), (2, 4, make(2, 4)), (3, 4, make(3, 4))])


def dense_graph(dims, edges, activation="relu") -> SuperNetGraph:
    """Dense modules between layers of the given widths; hidden layers use ``activation``."""
    n = len(dims)
    layers = [LayerSpec(i + 1, (d,), activation if 0 < i < n - 1 else None) for i, d in enumerate(dims)]
    return build_graph(layers, [(k, i, dense(dims[k - 1], dims[i - 1], k, i)) for k, i in edges])


def figure_networks(dim=4):
    """Two networks contrasting parallelisable and sequential structure on 2 machines.

    ``deep`` has 9 single-op modules: a 6-module trunk with three skip
    modules over consecutive pairs of trunk modules; two machines need 6
    cycles. ``wide`` has 10 modules in two independent 5-module chains; two
    machines need 5 cycles.
    """
    trunk = list(range(1, 8))
    deep_edges = [(i, i + 1) for i in trunk[:-1]] + [(1, 3), (3, 5), (5, 7)]
    deep = build_graph([LayerSpec(i, (dim,)) for i in trunk], [(k, i, dense(dim, dim, k, i)) for k, i in deep_edges])
    # layers: 1 input, 2-5 chain a, 6-9 chain b, 10 output
    wide_edges = [(1, 2), (2, 3), (3, 4), (4, 5), (5, 10), (1, 6), (6, 7), (7, 8), (8, 9), (9, 10)]
    wide = build_graph([LayerSpec(i, (dim,)) for i in range(1, 11)],
                       [(k, i, dense(dim, dim, k, i)) for k, i in wide_edges])
    return deep, wide


def random_dag(rng, num_layers, num_edges, dim=3, kind="Dense") -> SuperNetGraph:
    """Random single-source single-sink DAG over layers ``1..num_layers``.

    A random spanning structure guarantees every layer has an input and an
    output; extra forward edges are then added up to ``num_edges`` (or as
    many as fit).
    """
    n = num_layers
    edges = set()
    for i in range(2, n + 1):
        edges.add((int(rng.integers(1, i)), i))
    for k in range(2, n):
        if not any(a == k for a, _ in edges):
            edges.add((k, int(rng.integers(k + 1, n + 1))))
    candidates = [(k, i) for k in range(1, n) for i in range(k + 1, n + 1) if (k, i) not in edges]
    rng.shuffle(candidates)
    for e in candidates:
        if len(edges) >= num_edges:
            break
        edges.add(e)
    make = (lambda k, i: dense(dim, dim, k, i)) if kind == "Dense" else (lambda k, i: identity())
    return build_graph([LayerSpec(i, (dim,)) for i in range(1, n + 1)],
                       [(k, i, make(k, i)) for k, i in sorted(edges)])


def random_graphs(seed, count, min_layers=3, max_layers=6, max_edges=10, **kw):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(min_layers, max_layers + 1))
        m = int(rng.integers(n - 1, max_edges + 1))
        out.append(random_dag(rng, n, m, **kw))
    return out


TOY_COSTS = {(1, 2): 2, (1, 3): 2, (2, 3): 2, (2, 4): 2, (3, 4): 2, (1, 4): 40}


def budget_toy(dim=4, bottleneck=2):
    """Six-edge linear supernet with hand-set module costs.

    Two rank-``bottleneck`` branches (1-2-4 and 1-3-4) together represent any
    linear map, as does the expensive direct edge 1-4; the extra edge 2-3
    adds cost without adding rank. Costs live in ``cost_meta`` so FLOPs and
    parameter counts read them directly.
    """
    dims = {1: dim, 2: bottleneck, 3: bottleneck, 4: dim}
    layers = [LayerSpec(i, (d,)) for i, d in dims.items()]
    edges = []
    for (k, i), c in TOY_COSTS.items():
        m = dense(dims[k], dims[i], k, i)
        edges.append((k, i, ModuleSpec(m.kind, m.hyper, m.param_slot, {"flops": c, "params": c})))
    return build_graph(layers, edges)


def linear_task(n=256, dim=4, singular_values=(4.0, 3.0, 2.0, 1.5), noise=0.1, seed=0):
    """Regression data ``y = W x + noise`` with a fixed spectrum for ``W``."""
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    v, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    w = u @ np.diag(singular_values[:dim]) @ v.T
    x = rng.normal(size=(n, dim))
    y = x @ w.T + noise * rng.normal(size=(n, dim))
    return Dataset(x.astype(np.float32), y.astype(np.float32))


def optimality_problem():
    """(graph, budget, dataset, train config, brute-force settings) of the shipped optimality check."""
    g = budget_toy()
    budget = BudgetConfig(max_cost=8.0, lam=1.0, cost=FlopsCost())
    cfg = TrainConfig(epochs=100, burn_in_epochs=10, lr=0.005, arch_lr=0.1, loss="SquaredError", batch_size=32)
    return g, budget, linear_task(), cfg, {"bf_steps": 1500, "bf_lr": 0.005}
