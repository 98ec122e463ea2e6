"""Command line entry point: ``budgetnas gen|cost|train|sweep|select|verify``.

Exit codes: 0 success, 1 user error (bad input, config or graph), 2 internal
error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile

from . import fabrics, zoo
from .config import load_config
from .costs import make_cost
from .errors import BudgetNASError
from .graph import Mask, dumps_graph, load_graph
from .runner import front_max_cost_by_budget, run_experiment, run_sweep
from .selection import front_csv, pareto_front, plot_data, read_records

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def cmd_gen(args):
    if args.family == "resnet_fabric":
        g = fabrics.resnet_fabric(args.groups, args.width, args.filters or 16, tuple(args.input_shape),
                                  args.classes, args.toy_scale)
        if args.main_mask:
            _write(fabrics.resnet_mask(args.groups, args.width).to_json() + "\n", args.main_mask)
    elif args.family == "cnf":
        task = (args.task, args.classes)
        g = fabrics.cnf(args.width, args.height, args.filters or 128, tuple(args.input_shape), task, args.toy_scale)
    elif args.family == "figure":
        g = zoo.figure_networks()[args.which]
    else:
        g = zoo.budget_toy()
    _write(dumps_graph(g), args.output)
    return EXIT_OK


def cmd_cost(args):
    g = load_graph(args.graph)
    if args.mask == "full":
        h = Mask.full(g)
    else:
        with open(args.mask) as f:
            h = Mask.from_json(f.read())
        h.check(g)
    cost = make_cost(args.kind, args.machines, args.policy)
    value = cost.evaluate(g, h)
    rec = {"kind": cost.kind, "value": value, "unit": cost.unit}
    if args.kind == "distributed":
        rec.update(machines=args.machines, policy=args.policy)
        if args.schedule_csv:
            _write(cost.schedule(g, h).to_csv(), args.schedule_csv)
    print(json.dumps(rec))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    out = args.out or os.path.join(cfg["output_dir"], "train")
    tlog, model = run_experiment(cfg, out)
    summary = dict(tlog.summary or {"event": "summary", "epochs": 0})
    summary["out_dir"] = out
    if model is not None:
        summary["evaluation"] = model.to_dict()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_config(args.config)
    out = args.out or os.path.join(cfg["output_dir"], "sweep")
    points, models, front = run_sweep(cfg, out, args.workers)
    for (c, lam, s), m in zip(points, models):
        rec = {"max_cost": c, "lambda": lam, "seed": s}
        rec.update(m.to_dict() if m is not None else {"disconnected": True})
        print(json.dumps(rec, sort_keys=True))
    print(json.dumps({"event": "front", "size": len(front), "out_dir": out,
                      "max_front_cost_by_budget": front_max_cost_by_budget(points, models)}))
    return EXIT_OK


def cmd_select(args):
    models = read_records(args.records)
    front = pareto_front(models)
    _write(front_csv(front), args.csv)
    if args.plot:
        _write(plot_data(models, front), args.plot)
    return EXIT_OK


def cmd_verify(args):
    from . import verify

    checks = [verify.check_cost_tables, verify.check_distributed, verify.check_sampler]
    if not args.quick:
        checks += [verify.check_gradients, lambda: verify.check_optimality(range(args.seeds))]
    results = []
    for check in checks:
        results += check()
    sweep = None
    if not args.quick:
        cfg = load_config("sweep: {max_cost: [600, 300, 150, 75], seeds: [0, 1]}", is_text=True)
        with tempfile.TemporaryDirectory() as d:
            points, models, _ = run_sweep(cfg, d)
        sweep = front_max_cost_by_budget(points, models)
    results += verify.check_selection(budget_sweep=sweep)
    if not args.quick:
        results += verify.check_determinism()
    results.sort(key=lambda r: r.criterion)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_USER


def build_parser():
    p = argparse.ArgumentParser(prog="budgetnas", description="Architecture search under a cost budget.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a super network graph (JSON lines)")
    g.add_argument("family", choices=["resnet_fabric", "cnf", "figure", "budget_toy"])
    g.add_argument("-k", "--groups", type=int, default=3, help="ResNet fabric: number of groups (default 3)")
    g.add_argument("-n", "--width", type=int, default=3,
                   help="ResNet fabric blocks per group, or CNF width W (default 3)")
    g.add_argument("-H", "--height", type=int, default=6, help="CNF height (default 6)")
    g.add_argument("--filters", type=int, default=None, help="base filters (default 16 ResNet, 128 CNF)")
    g.add_argument("--input-shape", type=int, nargs=3, default=[3, 32, 32], metavar=("C", "H", "W"))
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--task", choices=["Classify", "Segment"], default="Classify")
    g.add_argument("--toy-scale", action="store_true", help="small modules carrying reference-size costs")
    g.add_argument("--which", type=int, choices=[0, 1], default=0, help="figure: 0 = 9-module, 1 = 10-module")
    g.add_argument("--main-mask", help="ResNet fabric: also write the plain-ResNet mask here")
    g.add_argument("-o", "--output", help="output file (default stdout)")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("cost", help="cost of a masked graph as one JSON record")
    c.add_argument("graph")
    c.add_argument("--mask", default="full", help="mask JSON file, or 'full' (default)")
    c.add_argument("--kind", choices=["flops", "params", "distributed"], default="flops")
    c.add_argument("--machines", type=int, default=1, help="distributed: machine count (default 1)")
    c.add_argument("--policy", choices=["GreedyList", "BruteForceOptimal"], default="GreedyList")
    c.add_argument("--schedule-csv", help="distributed: write the schedule (edge, op, machine, cycle) here")
    c.set_defaults(func=cmd_cost)

    t = sub.add_parser("train", help="train one budgeted model from a YAML config")
    t.add_argument("config")
    t.add_argument("--out", help="run directory (default <output_dir>/train)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train over a grid of budgets, lambdas and seeds")
    s.add_argument("config")
    s.add_argument("--out", help="sweep directory (default <output_dir>/sweep)")
    s.add_argument("--workers", type=int, default=None, help="parallel runs (default from config)")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("select", help="Pareto front of evaluation records")
    e.add_argument("records", help="JSON-lines evaluation records")
    e.add_argument("--csv", default="-", help="front CSV output (default stdout)")
    e.add_argument("--plot", help="plot-data output")
    e.set_defaults(func=cmd_select)

    v = sub.add_parser("verify", help="run the self-checks and print one line per check")
    v.add_argument("--quick", action="store_true", help="only the fast checks (seconds)")
    v.add_argument("--seeds", type=int, default=20, help="seeds for the optimality check (default 20)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BudgetNASError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception as e:  # noqa: BLE001
        logging.getLogger("budgetnas").exception("internal error")
        print(f"internal error: {e!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
