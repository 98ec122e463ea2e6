"""Sweep the budget on two moons and print the cost/accuracy Pareto front.

Run: python3 demos/pareto_sweep.py [out_dir]
"""
import sys
import tempfile

from budgetnas.config import load_config
from budgetnas.runner import front_max_cost_by_budget, run_sweep

CONFIG = """\
graph: {generator: dense, dims: [2, 16, 16, 16, 2]}
dataset: {name: two_moons, n: 600, noise: 0.2, val_fraction: 0.25}
budget: {cost: flops, lambda: 0.002}
train: {epochs: 40, burn_in_epochs: 8, lr: 0.05, lr_decay_epochs: [30], arch_lr: 0.5}
sweep: {max_cost: [600, 300, 150, 75, 40], seeds: [0, 1]}
"""


def main(out_dir):
    cfg = load_config(CONFIG, is_text=True)
    points, models, front = run_sweep(cfg, out_dir)
    print(f"{'C':>6}{'seed':>6}{'cost':>8}{'val acc':>9}  architecture")
    for (c, _, s), m in zip(points, models):
        if m is None:
            print(f"{c:>6.0f}{s:>6}  disconnected")
            continue
        print(f"{c:>6.0f}{s:>6}{m.cost:>8.0f}{m.val_accuracy:>9.3f}  {m.metadata['architecture']}")
    print("\nPareto front (cost, accuracy):")
    for m in front:
        print(f"  {m.cost:6.0f}  {m.val_accuracy:.3f}")
    print("\nlargest front cost per budget:", front_max_cost_by_budget(points, models))
    print(f"files in {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="budgetnas-sweep-"))
