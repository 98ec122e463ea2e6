"""Experiment configuration files (YAML).

An experiment file has these top-level sections; every key is optional and
falls back to the default shown in :data:`DEFAULTS`. The ``graph`` and
``dataset`` sections replace their defaults as a whole::

    seed: 0
    graph:            # generator name plus its arguments
      generator: dense          # dense | budget_toy | resnet_fabric | cnf | file
      dims: [2, 16, 16, 16, 2]
      edges: all                # "all" forward pairs, or a list of [src, dst]
    dataset:
      name: two_moons           # two_moons | digits | linear_task
      n: 600
      val_fraction: 0.25
    budget:
      cost: flops               # flops | params | distributed
      max_cost: 300
      lambda: 0.002
      machines: 1               # distributed only
      policy: GreedyList        # distributed only
      noise: null               # or [uniform|gaussian, scale]
    train:                      # fields of TrainConfig
      epochs: 40
      ...
    sweep:                      # used by the sweep command only
      max_cost: [300, 200, 100]
      lambda: [0.002]           # or {grid: 5} for 10**(m-1)..10**(m+1)
      seeds: [0, 1]
      workers: 1

The only environment variable read is ``BUDGETNAS_OUTPUT_DIR``, which
overrides ``output_dir``.
"""
from __future__ import annotations

import copy
import math
import os

import numpy as np
import yaml

from . import fabrics, zoo
from .costs import make_cost
from .datasets import load_dataset
from .errors import InvalidConfig
from .graph import load_graph
from .trainer import BudgetConfig, TrainConfig

OUTPUT_ENV = "BUDGETNAS_OUTPUT_DIR"

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "graph": {"generator": "dense", "dims": [2, 16, 16, 16, 2], "edges": "all", "activation": "relu"},
    "dataset": {"name": "two_moons", "n": 600, "noise": 0.2, "val_fraction": 0.25},
    "budget": {"cost": "flops", "max_cost": 300.0, "lambda": 0.002, "machines": 1, "policy": "GreedyList",
               "noise": None},
    "train": {"epochs": 40, "burn_in_epochs": 8, "lr": 0.05, "lr_decay_epochs": [30], "arch_lr": 0.5,
              "batch_size": 32},
    "sweep": {"max_cost": None, "lambda": None, "seeds": None, "workers": 1},
}


# these sections are replaced as a whole, since their keys depend on the chosen kind
REPLACED = ("graph", "dataset")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in REPLACED:
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path_or_text, is_text=False) -> dict:
    """Read a YAML experiment file and fill in defaults."""
    try:
        if is_text:
            raw = yaml.safe_load(path_or_text)
        else:
            with open(path_or_text) as f:
                raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise InvalidConfig(f"cannot read config: {e}") from e
    raw = raw or {}
    if not isinstance(raw, dict):
        raise InvalidConfig("config must be a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    if os.environ.get(OUTPUT_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    return cfg


def build_graph_from(spec: dict):
    spec = dict(spec)
    gen = spec.pop("generator", None)
    try:
        if gen == "dense":
            dims = spec.pop("dims")
            edges = spec.pop("edges", "all")
            if edges == "all":
                edges = [(k, i) for i in range(2, len(dims) + 1) for k in range(1, i)]
            return zoo.dense_graph(dims, [tuple(e) for e in edges], spec.pop("activation", "relu"))
        if gen == "budget_toy":
            return zoo.budget_toy(**spec)
        if gen == "resnet_fabric":
            return fabrics.resnet_fabric(**spec)
        if gen == "cnf":
            if "task" in spec and isinstance(spec["task"], list):
                spec["task"] = tuple(spec["task"])
            return fabrics.cnf(**spec)
        if gen == "file":
            return load_graph(spec["path"])
    except (TypeError, KeyError) as e:
        raise InvalidConfig(f"bad arguments for graph generator {gen!r}: {e}") from e
    raise InvalidConfig(f"unknown graph generator {gen!r}")


def build_dataset(spec: dict, seed: int):
    """(train, val) split of the configured dataset."""
    spec = dict(spec)
    name = spec.pop("name")
    frac = float(spec.pop("val_fraction", 0.25))
    if not 0 < frac < 1:
        raise InvalidConfig("val_fraction must lie strictly between 0 and 1")
    try:
        if name == "linear_task":
            data = zoo.linear_task(seed=seed, **spec)
        else:
            data = load_dataset(name, seed, **spec)
    except (TypeError, ValueError) as e:
        raise InvalidConfig(f"bad dataset spec: {e}") from e
    val, train = data.split(frac, seed)
    return train, val


def build_budget(spec: dict, seed: int, max_cost=None, lam=None) -> BudgetConfig:
    noise = spec.get("noise")
    try:
        cost = make_cost(spec["cost"], int(spec.get("machines", 1)), spec.get("policy", "GreedyList"),
                         tuple(noise) if noise else None, seed)
    except ValueError as e:
        raise InvalidConfig(str(e)) from e
    return BudgetConfig(float(spec["max_cost"] if max_cost is None else max_cost),
                        float(spec["lambda"] if lam is None else lam), cost)


def build_train_config(spec: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(**{**spec, "seed": seed})
    except TypeError as e:
        raise InvalidConfig(f"bad train section: {e}") from e


def lambda_grid(max_cost, num=5):
    """``num`` values log-spaced over ``[10**(m-1), 10**(m+1)]``, ``m`` the order of magnitude of ``max_cost``."""
    if max_cost <= 0:
        raise InvalidConfig("a lambda grid needs a positive max_cost")
    m = math.floor(math.log10(max_cost))
    return [float(v) for v in np.logspace(m - 1, m + 1, num)]


def sweep_points(cfg: dict):
    """Every (max_cost, lambda, seed) triple of the sweep section, in a fixed order."""
    sw = cfg["sweep"]
    costs = sw.get("max_cost") or [cfg["budget"]["max_cost"]]
    seeds = sw.get("seeds") or [cfg["seed"]]
    points = []
    for c in costs:
        lams = sw.get("lambda") or [cfg["budget"]["lambda"]]
        if isinstance(lams, dict):
            lams = lambda_grid(float(c), int(lams.get("grid", 5)))
        for lam in lams:
            for s in seeds:
                points.append((float(c), float(lam), int(s)))
    return points
