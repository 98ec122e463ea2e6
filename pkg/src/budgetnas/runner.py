"""Experiment execution: one training run, or a sweep over (max_cost, lambda, seed).

A run directory holds::

    config.yaml        the resolved experiment config
    log.jsonl          one record per epoch plus a summary record
    evaluation.jsonl   the final thresholded model on validation data
    checkpoints/       best model seen at each cost: params.bin, dist.txt, mask.json
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import yaml

from .compute import ParameterStore
from .config import build_budget, build_dataset, build_graph_from, build_train_config, sweep_points
from .errors import InvalidConfig, NotConnected
from .sampler import ArchitectureDistribution
from .selection import dumps_records, evaluate_model, front_csv, pareto_front, plot_data
from .trainer import run_training

log = logging.getLogger(__name__)


def config_digest(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _fmt(v):
    return f"{v:g}"


def run_experiment(cfg: dict, out_dir, max_cost=None, lam=None, seed=None):
    """Train one model; returns ``(TrainingLog, EvaluatedModel or None)``."""
    seed = cfg["seed"] if seed is None else seed
    g = build_graph_from(cfg["graph"])
    train, val = build_dataset(cfg["dataset"], seed)
    budget = build_budget(cfg["budget"], seed, max_cost, lam)
    tcfg = build_train_config(cfg["train"], seed)
    params = ParameterStore.for_graph(g, seed)
    dist = ArchitectureDistribution.for_graph(g, tcfg.init_logit, rng_seed=seed)
    run = {"max_cost": budget.max_cost, "lambda": budget.lam, "seed": seed, "config_sha": config_digest(cfg)}

    def tag(rec):
        rec["run"] = run

    tlog = run_training(g, dist, params, budget, tcfg, train, val, on_epoch=tag)
    tlog.records[0]["run"] = run
    tlog.records[0]["experiment"] = cfg
    if tlog.summary is not None:
        tlog.summary["run"] = run

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)
    with open(os.path.join(out_dir, "log.jsonl"), "w") as f:
        f.write(tlog.to_jsonl())
    for cost, ck in sorted(tlog.checkpoints.items()):
        d = os.path.join(out_dir, "checkpoints", _fmt(cost))
        os.makedirs(d, exist_ok=True)
        ck.params.save(os.path.join(d, "params.bin"))
        with open(os.path.join(d, "dist.txt"), "w") as f:
            f.write(ck.dist.to_text())
        with open(os.path.join(d, "mask.json"), "w") as f:
            f.write(ck.mask.to_json())

    model = None
    if tcfg.loss == "CrossEntropy":
        meta = {**run, "epoch": tcfg.epochs}
        try:
            model = evaluate_model(g, dist, params, val, budget.cost, "ArgmaxMask", checkpoint=os.fspath(out_dir),
                                   metadata=meta)
        except NotConnected:
            log.warning("run %s ended with a disconnected architecture", out_dir)
    with open(os.path.join(out_dir, "evaluation.jsonl"), "w") as f:
        f.write(dumps_records([model]) if model is not None else "")
    return tlog, model


def _sweep_job(args):
    cfg, out_dir, c, lam, s = args
    return run_experiment(cfg, out_dir, c, lam, s)[1]


def run_sweep(cfg: dict, out_dir, workers=None):
    """Run every sweep point and write ``evaluations.jsonl``, ``front.csv`` and ``front.dat``.

    Returns ``(points, models, front)``; ``models[j]`` is None when point
    ``j`` ended disconnected.
    """
    if cfg["train"].get("loss", "CrossEntropy") != "CrossEntropy":
        raise InvalidConfig("sweeps select on validation accuracy and need a classification loss")
    points = sweep_points(cfg)
    jobs = [(cfg, os.path.join(out_dir, f"C{_fmt(c)}_lam{_fmt(lam)}_seed{s}"), c, lam, s) for c, lam, s in points]
    workers = workers or int(cfg["sweep"].get("workers", 1))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            models = list(pool.map(_sweep_job, jobs))
    else:
        models = [_sweep_job(j) for j in jobs]
    found = [m for m in models if m is not None]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "evaluations.jsonl"), "w") as f:
        f.write(dumps_records(found))
    front = pareto_front(found) if found else []
    with open(os.path.join(out_dir, "front.csv"), "w") as f:
        f.write(front_csv(front))
    with open(os.path.join(out_dir, "front.dat"), "w") as f:
        f.write(plot_data(found, front))
    return points, models, front


def front_max_cost_by_budget(points, models):
    """For each max_cost (descending), the largest cost on the Pareto front of its runs."""
    out = []
    for c in sorted({p[0] for p in points}, reverse=True):
        ms = [m for p, m in zip(points, models) if p[0] == c and m is not None]
        out.append((c, max(m.cost for m in pareto_front(ms)) if ms else None))
    return out
