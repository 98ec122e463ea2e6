import json

import pytest

from budgetnas import cli
from budgetnas.graph import load_graph

TINY = """\
seed: 1
dataset: {name: two_moons, n: 120, val_fraction: 0.25}
graph: {generator: dense, dims: [2, 6, 6, 2]}
budget: {cost: flops, max_cost: 40, lambda: 0.01}
train: {epochs: 3, burn_in_epochs: 1, lr_decay_epochs: []}
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(TINY)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("argv,edges", [
    (["resnet_fabric", "-k", "3", "-n", "3"], 1 + 9 + 2 * 7),
    (["cnf", "-n", "2", "-H", "3", "--filters", "2", "--input-shape", "1", "4", "4"], 1 + 7 + 4),
    (["figure", "--which", "1"], 10),
    (["budget_toy"], 6),
])
def test_gen_writes_loadable_graph(tmp_path, capsys, argv, edges):
    out = tmp_path / "g.jsonl"
    code, _, _ = run(capsys, "gen", *argv, "-o", out)
    assert code == 0
    assert load_graph(out).num_edges == edges


def test_cost_of_resnet20_main_row(tmp_path, capsys):
    g, m = tmp_path / "g.jsonl", tmp_path / "m.json"
    assert run(capsys, "gen", "resnet_fabric", "-n", "3", "-o", g, "--main-mask", m)[0] == 0
    code, out, _ = run(capsys, "cost", g, "--mask", m)
    assert code == 0
    assert json.loads(out) == {"kind": "Flops", "value": 40813184.0, "unit": "mult-adds"}


def test_distributed_cost_with_schedule(tmp_path, capsys):
    g, sched = tmp_path / "g.jsonl", tmp_path / "s.csv"
    run(capsys, "gen", "figure", "-o", g)
    code, out, _ = run(capsys, "cost", g, "--kind", "distributed", "--machines", "2", "--schedule-csv", sched)
    assert code == 0 and json.loads(out)["value"] == 6
    assert sched.read_text().splitlines()[0] == "edge,op,machine,cycle"
    assert len(sched.read_text().splitlines()) == 10


def test_train_writes_run_directory(tmp_path, capsys, tiny_config):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", tiny_config, "--out", out)
    assert code == 0
    summary = json.loads(stdout)
    assert summary["epochs"] == 3 and summary["out_dir"] == str(out)
    records = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    assert [r["event"] for r in records] == ["init", "epoch", "epoch", "epoch", "summary"]
    assert records[0]["experiment"]["seed"] == 1
    assert all(r["run"]["seed"] == 1 for r in records)
    assert (out / "config.yaml").exists() and (out / "evaluation.jsonl").exists()
    for ck in (out / "checkpoints").iterdir():
        assert {p.name for p in ck.iterdir()} == {"params.bin", "dist.txt", "mask.json"}


def test_sweep_then_select(tmp_path, capsys, tiny_config):
    text = TINY + "sweep: {max_cost: [40, 10], seeds: [0]}\n"
    tiny_config.write_text(text)
    out = tmp_path / "sweep"
    code, stdout, _ = run(capsys, "sweep", tiny_config, "--out", out)
    assert code == 0
    lines = [json.loads(line) for line in stdout.splitlines()]
    assert len(lines) == 3 and lines[-1]["event"] == "front"
    code, csv, _ = run(capsys, "select", out / "evaluations.jsonl", "--plot", tmp_path / "p.dat")
    assert code == 0 and csv.startswith("cost,accuracy,checkpoint\n")
    assert (tmp_path / "p.dat").read_text().startswith("# cost accuracy on_front")


def test_user_errors_exit_1(tmp_path, capsys):
    assert run(capsys, "gen", "resnet_fabric", "-n", "0")[0] == 1
    code, _, err = run(capsys, "cost", tmp_path / "missing.jsonl")
    assert code == 1 and err.startswith("error:")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {epochs: 2, burn_in_epochs: 5}\n")
    assert run(capsys, "train", bad)[0] == 1


def test_internal_error_exit_2(monkeypatch, capsys):
    def boom(args):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "cmd_select", boom)
    assert run(capsys, "select", "x")[0] == 2


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2


def test_verify_quick(capsys):
    code, out, _ = run(capsys, "verify", "--quick")
    assert code == 0
    lines = out.splitlines()
    assert lines and all(line.startswith("[PASS]") for line in lines)


def test_lambda_zero_training_has_no_penalty(tmp_path, capsys, tiny_config):
    tiny_config.write_text(TINY.replace("lambda: 0.01", "lambda: 0"))
    assert run(capsys, "train", tiny_config, "--out", tmp_path / "r")[0] == 0
    records = [json.loads(line) for line in (tmp_path / "r" / "log.jsonl").read_text().splitlines()]
    assert all(r["train_penalty"] == 0 for r in records if r["event"] == "epoch")


def test_cnf_w8_params(tmp_path, capsys):
    g = tmp_path / "cnf.jsonl"
    assert run(capsys, "gen", "cnf", "-n", "8", "-H", "6", "-o", g)[0] == 0
    code, out, _ = run(capsys, "cost", g, "--kind", "params")
    assert code == 0 and json.loads(out)["value"] == pytest.approx(18.04e6, rel=0.05)


def test_chain_distributed_cost_is_edge_count(tmp_path, capsys):
    from budgetnas import zoo
    from budgetnas.graph import save_graph
    path = tmp_path / "chain.jsonl"
    save_graph(zoo.chain_graph(6), path)
    code, out, _ = run(capsys, "cost", path, "--kind", "distributed")
    assert code == 0 and json.loads(out)["value"] == 5


def test_default_config_cost_falls_under_binding_budget(tmp_path, capsys):
    path = tmp_path / "default.yaml"
    path.write_text("seed: 0\n")
    assert run(capsys, "train", path, "--out", tmp_path / "r")[0] == 0
    epochs = [json.loads(line) for line in (tmp_path / "r" / "log.jsonl").read_text().splitlines()]
    sampled = [r["train_cost"] for r in epochs if r.get("phase") == "sampled"]
    full = [r["train_cost"] for r in epochs if r.get("phase") == "burn_in"]
    assert sampled[-1] < sampled[0] < full[0]
    assert sampled[-1] <= 300
