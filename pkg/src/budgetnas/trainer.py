"""Budgeted training: joint SGD on module weights and edge logits.

Each example in a batch draws its own architecture from the edge
distribution. The objective of one draw is

    D = loss + lam * max(0, cost - max_cost)

and the logits follow the score-function estimator
``mean_j grad log P(H_j) * (D_j - baseline)``, while the weights follow the
ordinary gradient of the loss through the drawn sub-network only.

A draw whose output is not connected to the input produces an empty
network. For the logit update it is scored as such: its output is all
zeros and its cost is zero, so the estimator stays exactly unbiased for the
expectation computed by :func:`exact_expected_objective`. The weights of that
example instead train on a redrawn connected architecture (up to
``resample_limit`` attempts) or, failing that, on the full super network.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .compute import ParameterStore, Tape, backward, loss_per_example, predict
from .costs import CostEvaluator, StochasticCost, live_edges
from .errors import EmptyInput, InvalidConfig, NotConnected, TooLarge
from .graph import Mask, SuperNetGraph, is_output_connected, module_output_shape, module_param_shapes
from .sampler import (
    ArchitectureDistribution,
    entropy,
    enumerate_masks,
    grad_log_prob_batch,
    log_prob_of,
    sample_masks,
    threshold_mask,
)

MAX_ENUMERATION_EDGES = 12


@dataclass
class BudgetConfig:
    max_cost: float
    lam: float
    cost: CostEvaluator

    def __post_init__(self):
        if not self.max_cost >= 0:
            raise InvalidConfig(f"max_cost must be >= 0, got {self.max_cost}")
        if not self.lam >= 0:
            raise InvalidConfig(f"lambda must be >= 0, got {self.lam}")

    def penalty(self, cost):
        return self.lam * max(0.0, cost - self.max_cost)

    def describe(self):
        return {"max_cost": self.max_cost, "lambda": self.lam, "cost": self.cost.describe()}


class BaselineTracker:
    """Running reference value subtracted from D in the logit gradient.

    ``batch_mean`` uses the mean D of the current batch. ``ema`` uses an
    exponential average of past batch means (the first batch initialises it).
    ``fixed`` never changes.
    """

    MODES = ("batch_mean", "ema", "fixed")

    def __init__(self, mode="batch_mean", decay=0.9, value=0.0):
        if mode not in self.MODES:
            raise InvalidConfig(f"baseline mode must be one of {self.MODES}, got {mode!r}")
        self.mode, self.decay, self.current = mode, decay, float(value)
        self._started = mode == "fixed"

    def reference(self, batch_d):
        if self.mode == "batch_mean":
            return float(np.mean(batch_d))
        if self.mode == "ema" and not self._started:
            return float(np.mean(batch_d))
        return self.current

    def update(self, batch_d):
        m = float(np.mean(batch_d))
        if self.mode == "batch_mean":
            self.current = m
        elif self.mode == "ema":
            self.current = m if not self._started else self.decay * self.current + (1 - self.decay) * m
            self._started = True


@dataclass
class TrainConfig:
    epochs: int = 30
    burn_in_epochs: int | None = None
    lr: float = 0.1
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    arch_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    resample_limit: int = 10
    init_logit: float = 3.0
    loss: str = "CrossEntropy"
    baseline: str = "batch_mean"
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.burn_in_epochs is None:
            self.burn_in_epochs = int(round(self.epochs * 50 / 300))
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if self.epochs < 0 or self.burn_in_epochs < 0:
            raise InvalidConfig("epochs and burn_in_epochs must be non-negative")
        if self.epochs > 0 and self.burn_in_epochs >= self.epochs:
            raise InvalidConfig(f"burn_in_epochs ({self.burn_in_epochs}) must be below epochs ({self.epochs})")
        rates = [self.lr, self.lr_decay_factor, self.arch_lr if self.arch_lr is not None else 1.0]
        if any(not r > 0 for r in rates) or self.batch_size < 1:
            raise InvalidConfig("learning rates, decay factor and batch size must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.resample_limit < 0:
            raise InvalidConfig("need 0 <= momentum < 1, weight_decay >= 0, resample_limit >= 0")
        if self.baseline not in BaselineTracker.MODES:
            raise InvalidConfig(f"unknown baseline mode {self.baseline!r}")

    def lr_at(self, epoch):
        """Weight learning rate during 0-based ``epoch``."""
        return self.lr * self.lr_decay_factor ** sum(epoch >= d for d in self.lr_decay_epochs)

    def arch_lr_at(self, epoch):
        base = self.lr if self.arch_lr is None else self.arch_lr
        return base * self.lr_decay_factor ** sum(epoch >= d for d in self.lr_decay_epochs)

    def to_dict(self):
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


class SGD:
    """SGD with momentum; weight decay applies to module weights only.

    Only tensors touched by the current step are updated, so weights of
    modules that no example used stay exactly where they were.
    """

    def __init__(self, momentum=0.9, weight_decay=1e-4):
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = {}
        self.logit_velocity = None

    def step(self, params: ParameterStore, names, lr):
        for n in names:
            p = params[n]
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(n)
            v = g if v is None else self.momentum * v + g
            self.velocity[n] = v
            p.data -= (lr * v).astype(p.data.dtype)

    def step_logits(self, dist: ArchitectureDistribution, grad, lr):
        v = self.logit_velocity
        v = grad if v is None else self.momentum * v + grad
        self.logit_velocity = v
        dist.logits -= lr * v

    def reset_logits(self):
        self.logit_velocity = None


# -- objective ---------------------------------------------------------------

def prediction_shape(g: SuperNetGraph):
    sink = g.layer(g.sink).shape
    return module_output_shape(g.head, sink) if g.head is not None else sink


def empty_prediction(g: SuperNetGraph, n, dtype=np.float32):
    """Output of a network whose output layer receives nothing."""
    return np.zeros((n, *prediction_shape(g)), dtype=dtype)


def objective_D(g: SuperNetGraph, h: Mask, params: ParameterStore, budget: BudgetConfig, x, y,
                loss="CrossEntropy"):
    """D for one architecture on a batch, with its (loss, penalty, cost) parts."""
    if not is_output_connected(g, h):
        raise NotConnected("objective_D needs a mask connecting input to output")
    pred = predict(g, h, x, params).data
    delta = float(loss_per_example(pred, y, loss)[0].mean())
    cost = float(budget.cost.evaluate(g, h))
    penalty = budget.penalty(cost)
    return delta + penalty, {"loss": delta, "penalty": penalty, "cost": cost}


def empty_objective(g: SuperNetGraph, budget: BudgetConfig, y, loss="CrossEntropy"):
    """D of the empty network: zero output and zero cost."""
    delta = float(loss_per_example(empty_prediction(g, len(y)), y, loss)[0].mean())
    return delta + budget.penalty(0.0)


def exact_expected_objective(g: SuperNetGraph, dist: ArchitectureDistribution, params: ParameterStore,
                             budget: BudgetConfig, dataset, loss="CrossEntropy"):
    """Sum over every mask the sampler can emit of P(H) * D(H), on the whole dataset."""
    if g.num_edges > MAX_ENUMERATION_EDGES:
        raise TooLarge(f"{g.num_edges} edges exceeds the enumeration limit of {MAX_ENUMERATION_EDGES}")
    x, y = dataset.x, dataset.y
    total = 0.0
    empty = None
    for h in enumerate_masks(g, MAX_ENUMERATION_EDGES):
        p = math.exp(log_prob_of(g, dist, h))
        if is_output_connected(g, h):
            d = objective_D(g, h, params, budget, x, y, loss)[0]
        else:
            if empty is None:
                empty = empty_objective(g, budget, y, loss)
            d = empty
        total += p * d
    return total


# -- one step ----------------------------------------------------------------

@dataclass
class StepReport:
    loss: float
    objective: float
    cost: float
    penalty: float
    entropy: float
    baseline: float
    disconnected: int
    fallbacks: int
    costs: np.ndarray = field(repr=False, default=None)
    penalties: np.ndarray = field(repr=False, default=None)
    arch_grad: np.ndarray = field(repr=False, default=None)


def _used_param_names(g, masks):
    names = set()
    for h in masks:
        mods = [g.edges[e] for e in live_edges(g, h)]
        if g.head is not None:
            mods.append(g.head)
        for m in mods:
            names.update(module_param_shapes(m))
    return sorted(names)


def _cost_lookup(budget, g):
    """Evaluate costs, caching deterministic ones per mask."""
    cache = {}
    stochastic = isinstance(budget.cost, StochasticCost)

    def cost(h):
        if stochastic:
            return float(budget.cost.evaluate(g, h))
        if h not in cache:
            cache[h] = float(budget.cost.evaluate(g, h))
        return cache[h]

    return cost


def _connected_redraw(g, dist, limit):
    for _ in range(limit):
        h = sample_masks(g, dist, 1).record(g, 0).mask
        if is_output_connected(g, h):
            return h, False
    return Mask.full(g), True


def train_step(g: SuperNetGraph, dist: ArchitectureDistribution, params: ParameterStore, budget: BudgetConfig,
               baseline: BaselineTracker, batch, optimizer: SGD, lr, arch_lr=None, burn_in=False,
               resample_limit=10, loss="CrossEntropy") -> StepReport:
    """One update of the weights and, outside burn-in, of the edge logits."""
    x, y = batch
    n = len(x)
    if n == 0:
        raise EmptyInput("empty batch")
    arch_lr = lr if arch_lr is None else arch_lr
    full = Mask.full(g)
    cost_of = _cost_lookup(budget, g)

    if burn_in:
        draws, theta_masks, connected = None, [full] * n, np.ones(n, dtype=bool)
        fallbacks = 0
    else:
        draws = sample_masks(g, dist, n)
        first = [draws.record(g, j).mask for j in range(n)]
        connected = np.array([is_output_connected(g, h) for h in first])
        theta_masks, fallbacks = [], 0
        for j in range(n):
            if connected[j]:
                theta_masks.append(first[j])
            else:
                h, fell_back = _connected_redraw(g, dist, resample_limit)
                theta_masks.append(h)
                fallbacks += fell_back

    # forward and backward once per distinct architecture
    params.zero_grad()
    groups = {}
    for j, h in enumerate(theta_masks):
        groups.setdefault(h, []).append(j)
    losses = np.zeros(n)
    for h, idx in groups.items():
        idx = np.array(idx)
        tape = Tape()
        pred = predict(g, h, x[idx], params, tape)
        per, grad = loss_per_example(pred.data, y[idx], loss)
        losses[idx] = per
        if tape.records:
            backward(tape, grad / n, params)
    names = _used_param_names(g, groups)
    optimizer.step(params, names, lr)

    costs = np.zeros(n)
    for j, h in enumerate(theta_masks):
        if connected[j]:
            costs[j] = cost_of(h)
    penalties = np.array([budget.penalty(c) for c in costs])
    d = losses + penalties
    arch_grad = np.zeros(g.num_edges)
    ref = float(np.mean(d))
    if not burn_in:
        if not connected.all():
            empty_losses = loss_per_example(empty_prediction(g, n), y, loss)[0]
            d = np.where(connected, d, empty_losses + budget.penalty(0.0))
        ref = baseline.reference(d)
        arch_grad = (grad_log_prob_batch(dist, draws) * (d - ref)[:, None]).mean(axis=0)
        optimizer.step_logits(dist, arch_grad, arch_lr)
        baseline.update(d)
    return StepReport(
        loss=float(losses.mean()), objective=float(d.mean()), cost=float(costs.mean()),
        penalty=float(penalties.mean()), entropy=entropy(dist), baseline=ref,
        disconnected=int((~connected).sum()), fallbacks=int(fallbacks),
        costs=costs, penalties=penalties, arch_grad=arch_grad)


# -- full run ----------------------------------------------------------------

@dataclass
class Checkpoint:
    epoch: int
    mask: Mask
    cost: float
    val_accuracy: float | None
    val_loss: float
    params: ParameterStore = field(repr=False)
    dist: ArchitectureDistribution = field(repr=False)

    def better_than(self, other):
        if self.val_accuracy is not None and other.val_accuracy is not None:
            if self.val_accuracy != other.val_accuracy:
                return self.val_accuracy > other.val_accuracy
        return self.val_loss < other.val_loss


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    summary: dict | None = None
    checkpoints: dict = field(default_factory=dict)  # cost -> best Checkpoint at that cost

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        if self.summary is not None:
            lines.append(json.dumps(self.summary, sort_keys=True))
        return "\n".join(lines) + "\n"

    def epochs(self):
        return [r for r in self.records if r["event"] == "epoch"]


def evaluate_architecture(g, h, params, dataset, loss="CrossEntropy", batch_size=256):
    """(mean loss, accuracy or None) of one architecture on a dataset."""
    total, correct = 0.0, 0
    for xb, yb in dataset.batches(batch_size):
        pred = predict(g, h, xb, params).data
        total += float(loss_per_example(pred, yb, loss)[0].sum())
        if loss == "CrossEntropy":
            correct += int((pred.argmax(axis=1) == yb).sum())
    n = len(dataset)
    return total / n, (correct / n if loss == "CrossEntropy" else None)


def _round(v):
    return None if v is None else float(v)


def run_training(g: SuperNetGraph, dist: ArchitectureDistribution, params: ParameterStore, budget: BudgetConfig,
                 cfg: TrainConfig, train, val, on_epoch=None) -> TrainingLog:
    """Burn-in on the full network, then sampled training with the lr schedule.

    Every epoch logs training means, the entropy of the edge distribution and
    the validation loss/accuracy/cost of the thresholded architecture. The
    best thresholded model seen at each cost after burn-in is kept in
    ``log.checkpoints``.
    """
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    optimizer = SGD(cfg.momentum, cfg.weight_decay)
    baseline = BaselineTracker(cfg.baseline, cfg.ema_decay)
    log = TrainingLog()
    log.records.append({"event": "init", "config": cfg.to_dict(), "budget": budget.describe(),
                        "edges": g.num_edges, "entropy": entropy(dist)})
    for epoch in range(cfg.epochs):
        burn_in = epoch < cfg.burn_in_epochs
        if epoch == cfg.burn_in_epochs and cfg.burn_in_epochs > 0:
            dist.logits[:] = cfg.init_logit
            optimizer.reset_logits()
        lr, arch_lr = cfg.lr_at(epoch), cfg.arch_lr_at(epoch)
        reports = [train_step(g, dist, params, budget, baseline, b, optimizer, lr, arch_lr, burn_in,
                              cfg.resample_limit, cfg.loss)
                   for b in train.batches(cfg.batch_size, shuffle_rng)]
        rec = {
            "event": "epoch", "epoch": epoch + 1, "phase": "burn_in" if burn_in else "sampled",
            "lr": lr, "arch_lr": arch_lr,
            "train_loss": float(np.mean([r.loss for r in reports])),
            "train_objective": float(np.mean([r.objective for r in reports])),
            "train_cost": float(np.mean([r.cost for r in reports])),
            "train_penalty": float(np.mean([r.penalty for r in reports])),
            "disconnected": sum(r.disconnected for r in reports),
            "fallbacks": sum(r.fallbacks for r in reports),
            "entropy": entropy(dist),
        }
        h = threshold_mask(g, dist)
        if is_output_connected(g, h):
            val_loss, val_acc = evaluate_architecture(g, h, params, val, cfg.loss)
            cost = float(budget.cost.evaluate(g, h))
            rec.update(val_loss=val_loss, val_accuracy=_round(val_acc), val_cost=cost,
                       architecture=sorted([list(e) for e in live_edges(g, h)]))
            ck = Checkpoint(epoch + 1, h, cost, val_acc, val_loss, None, None)
            best = log.checkpoints.get(cost)
            if not burn_in and (best is None or ck.better_than(best)):
                ck.params, ck.dist = params.copy(), dist.copy()
                log.checkpoints[cost] = ck
        else:
            rec.update(val_loss=None, val_accuracy=None, val_cost=None, architecture=None)
        log.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    if cfg.epochs > 0:
        last = log.records[-1]
        log.summary = {"event": "summary", "epochs": cfg.epochs, "final_entropy": last["entropy"],
                       "final_val_accuracy": last["val_accuracy"], "final_val_cost": last["val_cost"],
                       "final_architecture": last["architecture"],
                       "checkpoint_costs": sorted(log.checkpoints)}
    return log


# -- brute-force check -------------------------------------------------------

def train_architecture(g, h, params, dataset, steps=300, lr=0.05, momentum=0.9, loss="CrossEntropy"):
    """Full-batch training of one fixed architecture, in place."""
    opt = SGD(momentum, 0.0)
    names = _used_param_names(g, [h])
    x, y = dataset.x, dataset.y
    for _ in range(steps):
        params.zero_grad()
        tape = Tape()
        pred = predict(g, h, x, params, tape)
        _, grad = loss_per_example(pred.data, y, loss)
        if not tape.records:
            break
        backward(tape, grad / len(x), params)
        opt.step(params, names, lr)
    return params


def brute_force_objectives(g, budget, dataset, seed=0, steps=300, lr=0.05, loss="CrossEntropy"):
    """D of every connected architecture after training it alone, keyed by its live edges."""
    if g.num_edges > MAX_ENUMERATION_EDGES:
        raise TooLarge(f"{g.num_edges} edges exceeds the enumeration limit of {MAX_ENUMERATION_EDGES}")
    table = {}
    for h in enumerate_masks(g, MAX_ENUMERATION_EDGES):
        if not is_output_connected(g, h):
            continue
        key = Mask(live_edges(g, h))
        if key in table:
            continue
        params = train_architecture(g, key, ParameterStore.for_graph(g, seed), dataset, steps, lr, loss=loss)
        table[key] = objective_D(g, key, params, budget, dataset.x, dataset.y, loss)[0]
    return table


@dataclass
class OptimalityRun:
    seed: int
    architecture: list
    objective: float
    gap: float
    entropy_per_edge: float
    ok: bool


@dataclass
class OptimalityReport:
    optimum: float
    optimum_architecture: list
    spread: float
    epsilon: float
    runs: list

    @property
    def fraction_ok(self):
        return sum(r.ok for r in self.runs) / len(self.runs)


def check_optimality_gap(g, budget, dataset, cfg: TrainConfig, seeds=range(20), tolerance=0.1,
                       entropy_limit=0.05, bf_steps=300, bf_lr=0.05, table=None) -> OptimalityReport:
    """Compare stochastic training against the brute-force optimum over architectures.

    A run succeeds when its thresholded architecture, retrained alone, is
    within ``tolerance`` times the spread of brute-force objectives of the
    optimum, and the final edge entropy is below ``entropy_limit`` per edge.
    """
    if table is None:
        table = brute_force_objectives(g, budget, dataset, 0, bf_steps, bf_lr, cfg.loss)
    values = np.array(list(table.values()))
    best_key = min(table, key=table.get)
    optimum, spread = float(values.min()), float(values.max() - values.min())
    eps = tolerance * spread
    runs = []
    for seed in seeds:
        run_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
        params = ParameterStore.for_graph(g, seed)
        dist = ArchitectureDistribution.for_graph(g, cfg.init_logit, rng_seed=seed)
        run_training(g, dist, params, budget, run_cfg, dataset, dataset)
        h = threshold_mask(g, dist)
        key = Mask(live_edges(g, h))
        obj = table.get(key, math.inf)
        ent = entropy(dist) / g.num_edges
        gap = obj - optimum
        runs.append(OptimalityRun(seed, sorted(list(e) for e in key), obj, gap, ent, gap <= eps and ent < entropy_limit))
    return OptimalityReport(optimum, sorted(list(e) for e in best_key), spread, eps, runs)
