import json

from budgetnas.config import load_config
from budgetnas.runner import config_digest, front_max_cost_by_budget, run_experiment, run_sweep
from budgetnas.selection import EvaluatedModel

TINY = """\
dataset: {name: two_moons, n: 120, val_fraction: 0.25}
graph: {generator: dense, dims: [2, 6, 6, 2]}
budget: {cost: flops, max_cost: 40, lambda: 0.01}
train: {epochs: 3, burn_in_epochs: 1, lr_decay_epochs: []}
sweep: {max_cost: [40, 20], seeds: [0, 1]}
"""


def test_digest_depends_on_content():
    a = load_config(TINY, is_text=True)
    b = load_config(TINY.replace("n: 120", "n: 121"), is_text=True)
    assert config_digest(a) == config_digest(dict(a)) != config_digest(b)


def test_experiment_tags_every_record(tmp_path):
    cfg = load_config(TINY, is_text=True)
    log, model = run_experiment(cfg, tmp_path, max_cost=20.0, lam=0.5, seed=4)
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert all(r["run"] == {"max_cost": 20.0, "lambda": 0.5, "seed": 4, "config_sha": config_digest(cfg)}
               for r in records)
    assert model.metadata["seed"] == 4


def test_parallel_sweep_matches_serial(tmp_path):
    cfg = load_config(TINY, is_text=True)
    pts1, serial, _ = run_sweep(cfg, tmp_path / "a", workers=1)
    pts2, parallel, _ = run_sweep(cfg, tmp_path / "b", workers=2)
    assert pts1 == pts2 and len(pts1) == 4
    key = lambda m: None if m is None else (m.val_accuracy, m.cost)
    assert [key(m) for m in serial] == [key(m) for m in parallel]
    for run in ("C40_lam0.01_seed0", "C20_lam0.01_seed1"):
        assert (tmp_path / "a" / run / "log.jsonl").read_bytes() == (tmp_path / "b" / run / "log.jsonl").read_bytes()


def test_front_max_cost_by_budget():
    pts = [(10.0, 1.0, 0), (10.0, 1.0, 1), (5.0, 1.0, 0), (5.0, 1.0, 1)]
    ms = [EvaluatedModel("a", 0.9, 8.0), EvaluatedModel("b", 0.8, 9.0), None, EvaluatedModel("c", 0.7, 4.0)]
    assert front_max_cost_by_budget(pts, ms) == [(10.0, 8.0), (5.0, 4.0)]
    assert front_max_cost_by_budget(pts[2:3], [None]) == [(5.0, None)]
