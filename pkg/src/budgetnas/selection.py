"""Pareto-front model selection on (cost, validation accuracy)."""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .compute import predict
from .costs import live_edges
from .errors import EmptyInput, NotConnected
from .graph import Mask, is_output_connected
from .sampler import sample_masks, threshold_mask
from .trainer import prediction_shape


@dataclass
class EvaluatedModel:
    checkpoint: str
    val_accuracy: float
    cost: float
    unit: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise ValueError(f"val_accuracy must lie in [0, 1], got {self.val_accuracy}")
        if not self.cost >= 0:
            raise ValueError(f"cost must be >= 0, got {self.cost}")

    def to_dict(self):
        return {"checkpoint": self.checkpoint, "val_accuracy": self.val_accuracy, "cost": self.cost,
                "unit": self.unit, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls(d["checkpoint"], float(d["val_accuracy"]), float(d["cost"]), d.get("unit", ""),
                   d.get("metadata", {}))


def dominates(a: EvaluatedModel, b: EvaluatedModel) -> bool:
    return (a.cost <= b.cost and a.val_accuracy >= b.val_accuracy
            and (a.cost < b.cost or a.val_accuracy > b.val_accuracy))


def pareto_front(models) -> list:
    """Models no other model dominates, by ascending cost.

    Of several models with identical (cost, accuracy) only the first in input
    order is kept.
    """
    models = list(models)
    if not models:
        raise EmptyInput("pareto_front needs at least one model")
    order = sorted(range(len(models)), key=lambda j: (models[j].cost, -models[j].val_accuracy, j))
    front, best = [], -np.inf
    for j in order:
        if models[j].val_accuracy > best:
            front.append(models[j])
            best = models[j].val_accuracy
    return front


def parse_mode(mode):
    """``"ArgmaxMask"`` or ``"SampledMean(k)"`` (or a ``("SampledMean", k)`` pair)."""
    if isinstance(mode, tuple):
        return mode[0], int(mode[1])
    if mode == "ArgmaxMask":
        return "ArgmaxMask", None
    m = re.fullmatch(r"SampledMean\((\d+)\)", mode)
    if m and int(m.group(1)) > 0:
        return "SampledMean", int(m.group(1))
    raise ValueError(f"unknown evaluation mode {mode!r}")


def accuracy(g, h, params, dataset, batch_size=256):
    correct = 0
    for xb, yb in dataset.batches(batch_size):
        correct += int((predict(g, h, xb, params).data.argmax(axis=1) == yb).sum())
    return correct / len(dataset)


def evaluate_model(g, dist_or_mask, params, dataset, cost, mode="ArgmaxMask", checkpoint="", metadata=None,
                   rng=None) -> EvaluatedModel:
    """Validation accuracy and cost of a trained model.

    ``ArgmaxMask`` keeps each edge with probability at least 0.5 and raises
    NotConnected if that leaves the output unreachable. ``SampledMean(k)``
    averages accuracy and cost over ``k`` sampled architectures; a sampled
    architecture with a disconnected output predicts all-zero scores and
    costs nothing.
    """
    kind, k = parse_mode(mode)
    meta = dict(metadata or {})
    if isinstance(dist_or_mask, Mask):
        masks = [dist_or_mask]
    elif kind == "ArgmaxMask":
        masks = [threshold_mask(g, dist_or_mask)]
    else:
        batch = sample_masks(g, dist_or_mask, k, rng)
        masks = [batch.record(g, r).mask for r in range(k)]
    if kind == "ArgmaxMask" or isinstance(dist_or_mask, Mask):
        h = masks[0]
        if not is_output_connected(g, h):
            raise NotConnected("the thresholded architecture does not connect input to output")
        h = Mask(live_edges(g, h))
        meta.setdefault("architecture", sorted([list(e) for e in h]))
        return EvaluatedModel(checkpoint, accuracy(g, h, params, dataset), float(cost.evaluate(g, h)),
                              cost.unit, meta)
    accs, costs, cache = [], [], {}
    for h in masks:
        if h not in cache:
            if is_output_connected(g, h):
                cache[h] = (accuracy(g, h, params, dataset), float(cost.evaluate(g, h)))
            else:
                empty = np.zeros((len(dataset), prediction_shape(g)[0]))
                cache[h] = (float((empty.argmax(axis=1) == dataset.y).mean()), 0.0)
        accs.append(cache[h][0])
        costs.append(cache[h][1])
    meta.update(samples=k, cost_std=float(np.std(costs)))
    return EvaluatedModel(checkpoint, float(np.mean(accs)), float(np.mean(costs)), cost.unit, meta)


# -- records and exports -----------------------------------------------------

def dumps_records(models) -> str:
    return "".join(json.dumps(m.to_dict(), sort_keys=True) + "\n" for m in models)


def loads_records(text) -> list:
    return [EvaluatedModel.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def write_records(path, models):
    with open(path, "w") as f:
        f.write(dumps_records(models))


def read_records(path) -> list:
    with open(path) as f:
        return loads_records(f.read())


def front_csv(front) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cost", "accuracy", "checkpoint"])
    for m in front:
        w.writerow([repr(m.cost), repr(m.val_accuracy), m.checkpoint])
    return buf.getvalue()


def plot_data(models, front) -> str:
    """Whitespace-separated columns ``cost accuracy on_front`` with a comment header."""
    on = {id(m) for m in front}
    lines = ["# cost accuracy on_front"]
    for m in sorted(models, key=lambda m: (m.cost, m.val_accuracy)):
        lines.append(f"{m.cost!r} {m.val_accuracy!r} {int(id(m) in on)}")
    return "\n".join(lines) + "\n"
