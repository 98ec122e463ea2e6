"""Self-checks behind the ``verify`` command and the acceptance tests.

Each ``check_*`` function returns a list of :class:`CheckResult`; a check
never raises on a numerical miss, it reports it.
"""
from __future__ import annotations

import contextlib
import filecmp
import io
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import fabrics, zoo
from .compute import ParameterStore, Tape, Value, apply_module, backward
from .costs import FlopsCost, flops_cost, params_cost
from .datasets import two_moons
from .graph import Mask, ModuleSpec, module_output_shape, module_param_shapes
from .sampler import ArchitectureDistribution, enumerate_masks, log_prob_of, sample_masks
from .schedule import build_op_graph, distributed_cost, optimal_schedule
from .selection import EvaluatedModel, dominates, pareto_front
from .trainer import (
    BaselineTracker,
    BudgetConfig,
    SGD,
    check_optimality_gap,
    exact_expected_objective,
    train_step,
)

# published reference values (units: Mult-Adds, parameters, cycles)
RESNET_DEPTHS = (20, 32, 44, 56, 110)
RESNET_FLOPS = {20: 40.90e6, 32: 69.27e6, 44: 97.64e6, 56: 126.01e6, 110: 253.70e6}
RESNET_PARAMS = {20: 0.27e6, 32: 0.47e6, 44: 0.66e6, 56: 0.86e6, 110: 1.73e6}
CNF_FLOPS = {1: 54e6, 2: 406e6, 4: 1010e6, 8: 2219e6}
CNF_W8_PARAMS = 18.04e6
RESNET_SEQUENTIAL_OPS = {20: 22, 32: 34, 44: 46, 56: 58, 110: 112}


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.criterion}. {self.name}: {self.detail}"


def _rel(a, b):
    return abs(a - b) / abs(b)


# -- 1. cost tables ------------------------------------------------------------

def check_cost_tables():
    results = []
    worst_f = worst_p = 0.0
    for depth in RESNET_DEPTHS:
        n = (depth - 2) // 6
        g = fabrics.resnet_fabric(3, n)
        h = fabrics.resnet_mask(3, n)
        worst_f = max(worst_f, _rel(flops_cost(g, h), RESNET_FLOPS[depth]))
        worst_p = max(worst_p, _rel(params_cost(g, h), RESNET_PARAMS[depth]))
    results.append(CheckResult(1, "ResNet FLOPs", worst_f <= 0.02, f"max rel err {worst_f:.4f} (tol 0.02)"))
    results.append(CheckResult(1, "ResNet params", worst_p <= 0.02, f"max rel err {worst_p:.4f} (tol 0.02)"))
    worst = 0.0
    for w, ref in CNF_FLOPS.items():
        g = fabrics.cnf(w, 6)
        worst = max(worst, _rel(flops_cost(g, Mask.full(g)), ref))
    results.append(CheckResult(1, "CNF FLOPs", worst <= 0.05, f"max rel err {worst:.4f} (tol 0.05)"))
    g = fabrics.cnf(8, 6)
    err = _rel(params_cost(g, Mask.full(g)), CNF_W8_PARAMS)
    results.append(CheckResult(1, "CNF W=8 params", err <= 0.05, f"rel err {err:.4f} (tol 0.05)"))
    return results


# -- 2. distributed cost -------------------------------------------------------

def check_distributed():
    diffs = {}
    for depth in RESNET_DEPTHS:
        n = (depth - 2) // 6
        g = fabrics.resnet_fabric(3, n, base_filters=2, input_shape=(1, 8, 8))
        diffs[depth] = distributed_cost(g, fabrics.resnet_mask(3, n), 1).makespan - RESNET_SEQUENTIAL_OPS[depth]
    ok = all(abs(d) <= 2 for d in diffs.values())
    out = [CheckResult(2, "ResNet n=1 op counts", ok, f"differences {diffs} (tol 2)")]
    deep, wide = zoo.figure_networks()
    got = []
    for g, modules, cycles in ((deep, 9, 6), (wide, 10, 5)):
        h = Mask.full(g)
        greedy = distributed_cost(g, h, 2).makespan
        best = optimal_schedule(build_op_graph(g, h), 2).makespan
        got.append((g.num_edges, greedy, best, g.num_edges == modules and greedy == best == cycles))
    out.append(CheckResult(2, "figure networks at n=2", all(x[-1] for x in got),
                           f"(modules, greedy, optimal) = {[x[:3] for x in got]}, want (9, 6, 6) and (10, 5, 5)"))
    return out


# -- 3. optimality on a toy supernet ----------------------------------------

def check_optimality(seeds=range(20), min_fraction=0.8):
    g, budget, data, cfg, bf = zoo.optimality_problem()
    rep = check_optimality_gap(g, budget, data, cfg, seeds, bf_steps=bf["bf_steps"], bf_lr=bf["bf_lr"])
    frac = rep.fraction_ok
    exact = sum(r.gap == 0 for r in rep.runs)
    return [CheckResult(3, "stochastic optimum vs brute force", frac >= min_fraction,
                        f"{sum(r.ok for r in rep.runs)}/{len(rep.runs)} seeds within eps={rep.epsilon:.3f} "
                        f"with entropy < 0.05 nats/edge ({exact} exactly optimal; need {min_fraction:.0%})")]


# -- 4. gradients --------------------------------------------------------------

GRADIENT_CASES = [
    ("Dense", {"in": 5, "out": 3}, (5,)),
    ("Conv2d", {"in_channels": 2, "out_channels": 3, "kernel": 3, "stride": 1}, (2, 5, 5)),
    ("Conv2d", {"in_channels": 2, "out_channels": 3, "kernel": 3, "stride": 2}, (2, 5, 5)),
    ("Projection", {"in_channels": 3, "out_channels": 2, "stride": 1}, (3, 4, 4)),
    ("DownsampleConv", {"in_channels": 2, "out_channels": 2, "kernel": 3, "stride": 2}, (2, 6, 6)),
    ("UpsampleConv", {"in_channels": 2, "out_channels": 3, "kernel": 3, "factor": 2}, (2, 3, 3)),
    ("BasicBlock", {"in_channels": 2, "out_channels": 2, "stride": 1}, (2, 4, 4)),
    ("BasicBlock", {"in_channels": 2, "out_channels": 3, "stride": 2}, (2, 6, 6)),
    ("GlobalPoolDense", {"in_channels": 3, "classes": 4}, (3, 4, 4)),
    ("Identity", {}, (3, 2, 2)),
]


def module_gradient_error(kind, hyper, in_shape, seed=0, eps=1e-6):
    """Worst tensor-wise relative error between backprop and central differences (float64)."""
    rng = np.random.default_rng(seed)
    m = ModuleSpec(kind, hyper, None if kind == "Identity" else "m")
    params = ParameterStore()
    for name, shape in module_param_shapes(m).items():
        params.add(name, rng.normal(size=shape))
    x = rng.normal(size=(2, *in_shape))
    r = rng.normal(size=(2, *module_output_shape(m, in_shape)))

    def f():
        return float((apply_module(m, x, params).data * r).sum())

    xv = Value(x)
    tape = Tape()
    apply_module(m, xv, params, tape)
    if tape.records:
        backward(tape, r, params)
        analytic = {n: params[n].grad.copy() for n in params.names()}
        analytic["x"] = xv.grad
    else:  # Identity records nothing: the output is the input itself
        analytic = {"x": r.copy()}
    tensors = {n: params[n].data for n in params.names()}
    tensors["x"] = x
    worst = 0.0
    for n, arr in tensors.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = f()
            arr[idx] = old - eps
            down = f()
            arr[idx] = old
            num[idx] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(num), np.linalg.norm(analytic[n]), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - analytic[n]) / scale))
    return worst


def estimator_problem(seed=0):
    """Six-edge Dense supernet, a small dataset and a binding FLOPs budget."""
    g = zoo.dense_graph([3, 4, 4, 2], [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)])
    data = two_moons(40, noise=0.2, seed=seed, dim=3)
    params = ParameterStore.for_graph(g, seed)
    dist = ArchitectureDistribution(g.edge_order, [1.0, -0.5, 0.3, 0.8, -1.0, 1.5], rng_seed=seed)
    budget = BudgetConfig(max_cost=20.0, lam=0.05, cost=FlopsCost())
    return g, data, params, dist, budget


def expected_objective_gradient(g, dist, params, budget, data, step=1e-4):
    grad = np.zeros(g.num_edges)
    for j in range(g.num_edges):
        d = dist.copy()
        d.logits[j] += step
        up = exact_expected_objective(g, d, params, budget, data)
        d.logits[j] -= 2 * step
        down = exact_expected_objective(g, d, params, budget, data)
        grad[j] = (up - down) / (2 * step)
    return grad


def monte_carlo_gradients(g, dist, params, budget, data, baseline, steps=100, repeats=25):
    """Per-step logit gradients from ``train_step`` with frozen weights and logits.

    Each step's batch is the dataset repeated ``repeats`` times, so one step
    averages ``len(data) * repeats`` independent architecture draws.
    """
    x = np.repeat(data.x, repeats, axis=0)
    y = np.repeat(data.y, repeats, axis=0)
    opt = SGD(0.0, 0.0)
    out = []
    for _ in range(steps):
        rep = train_step(g, dist, params, budget, baseline, (x, y), opt, lr=0.0, arch_lr=0.0)
        out.append(rep.arch_grad)
    return np.array(out)


def check_gradients(steps=100, repeats=25):
    results = []
    errs = {f"{k}{'/s' + str(h.get('stride')) if 'stride' in h else ''}": module_gradient_error(k, h, s)
            for k, h, s in GRADIENT_CASES}
    worst = max(errs.values())
    results.append(CheckResult(4, "module gradients vs finite differences", worst < 1e-3,
                               f"max rel err {worst:.2e} over {len(errs)} module configurations (tol 1e-3)"))
    g, data, params, dist, budget = estimator_problem()
    target = expected_objective_gradient(g, dist, params, budget, data)
    plain = monte_carlo_gradients(g, dist, params, budget, data, BaselineTracker("fixed", value=0.0), steps, repeats)
    n_samples = steps * repeats * len(data)
    mean, se = plain.mean(axis=0), plain.std(axis=0, ddof=1) / np.sqrt(steps)
    z = np.abs(mean - target) / se
    results.append(CheckResult(4, "logit gradient unbiased", bool((z < 3).all()),
                               f"{n_samples} draws, max |z| = {z.max():.2f} over {g.num_edges} logits (tol 3)"))
    base = monte_carlo_gradients(g, dist, params, budget, data, BaselineTracker("batch_mean"), steps, repeats)
    bmean, bse = base.mean(axis=0), base.std(axis=0, ddof=1) / np.sqrt(steps)
    zb = np.abs(bmean - target) / bse
    var_plain, var_base = plain.var(axis=0).sum(), base.var(axis=0).sum()
    ok = bool((zb < 3).all()) and var_base < var_plain
    results.append(CheckResult(4, "baseline keeps mean, cuts variance", ok,
                               f"max |z| = {zb.max():.2f}; per-step variance {var_plain:.3e} -> {var_base:.3e}"))
    return results


# -- 5. sampler ----------------------------------------------------------------

def check_sampler(draws=10 ** 6, graphs=30, seed=0):
    worst = 0.0
    rng = np.random.default_rng(seed)
    for g in zoo.random_graphs(seed, graphs, 3, 7, 12):
        dist = ArchitectureDistribution(g.edge_order, rng.normal(0, 2, g.num_edges))
        total = sum(np.exp(log_prob_of(g, dist, h)) for h in enumerate_masks(g))
        worst = max(worst, abs(total - 1.0))
    out = [CheckResult(5, "mask probabilities sum to one", worst <= 1e-9,
                       f"max |sum - 1| = {worst:.1e} over {graphs} graphs with <= 12 edges (tol 1e-9)")]
    g = zoo.random_dag(np.random.default_rng(seed + 1), 7, 12)
    dist = ArchitectureDistribution(g.edge_order, rng.normal(0, 1.5, g.num_edges), rng_seed=seed)
    batch = sample_masks(g, dist, draws)
    reach = np.zeros((draws, g.num_layers), dtype=bool)
    reach[:, 0] = True
    bad = 0
    for j, (k, i) in enumerate(g.edge_order):
        on = batch.bits[:, j].astype(bool)
        bad += int((on & ~reach[:, g.pos[k]]).sum())
        reach[:, g.pos[i]] |= on
    out.append(CheckResult(5, "no edge drawn from an unreachable source", bad == 0,
                           f"{bad} violations in {draws} draws on a {g.num_edges}-edge graph"))
    return out


# -- 6. selection --------------------------------------------------------------

def quadratic_front(models):
    keep = []
    for j, m in enumerate(models):
        if any(dominates(o, m) for o in models):
            continue
        if any((o.cost, o.val_accuracy) == (m.cost, m.val_accuracy) for o in models[:j]):
            continue
        keep.append(m)
    return sorted(keep, key=lambda m: m.cost)


def check_selection(sets=1000, seed=0, budget_sweep=None):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(sets):
        n = int(rng.integers(1, 40))
        # coarse grid so that ties occur
        models = [EvaluatedModel(f"m{j}", float(rng.integers(0, 11)) / 10, float(rng.integers(0, 20)))
                  for j in range(n)]
        if [id(m) for m in pareto_front(models)] != [id(m) for m in quadratic_front(models)]:
            mismatches += 1
    out = [CheckResult(6, "pareto_front vs quadratic oracle", mismatches == 0,
                       f"{mismatches} mismatches over {sets} random point sets")]
    if budget_sweep is not None:
        costs = [c for c, _ in budget_sweep]
        maxes = [m for _, m in budget_sweep]
        ok = all(a >= b for a, b in zip(maxes, maxes[1:]))
        out.append(CheckResult(6, "budget sweep monotone", ok,
                               f"max front cost {maxes} for decreasing budgets {costs}"))
    return out


# -- 7. determinism ------------------------------------------------------------

DETERMINISM_CONFIG = """\
seed: 3
train: {epochs: 6, burn_in_epochs: 2}
"""


def check_determinism(config_text=DETERMINISM_CONFIG):
    from .cli import main

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "exp.yaml")
        with open(path, "w") as f:
            f.write(config_text)
        codes = []
        for run in ("a", "b"):
            with contextlib.redirect_stdout(io.StringIO()):
                codes.append(main(["train", path, "--out", os.path.join(d, run)]))
        a, b = (os.path.join(d, r, "log.jsonl") for r in ("a", "b"))
        same = codes == [0, 0] and filecmp.cmp(a, b, shallow=False)
        size = os.path.getsize(a) if os.path.exists(a) else 0
    return [CheckResult(7, "train twice, byte-identical logs", same, f"exit codes {codes}, log size {size} bytes")]
