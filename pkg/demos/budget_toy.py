"""Watch the edge distribution of a small super network settle under a budget.

The toy has two cheap rank-2 branches, a cheap but useless cross edge and an
expensive direct edge. With a budget of 8 the search should keep the two
branches (cost 8) and drop the direct edge. The script compares the result
with brute-force training of every architecture.

Run: python3 demos/budget_toy.py [seed]
"""
import sys

import numpy as np

from budgetnas import zoo
from budgetnas.compute import ParameterStore
from budgetnas.costs import live_edges
from budgetnas.graph import Mask
from budgetnas.sampler import ArchitectureDistribution, threshold_mask
from budgetnas.trainer import TrainConfig, brute_force_objectives, run_training


def main(seed=0):
    g, budget, data, cfg, bf = zoo.optimality_problem()
    cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
    params = ParameterStore.for_graph(g, seed)
    dist = ArchitectureDistribution.for_graph(g, cfg.init_logit, rng_seed=seed)

    def show(rec):
        if rec["epoch"] % 10 == 0:
            probs = " ".join(f"{p:.2f}" for p in dist.gamma)
            print(f"epoch {rec['epoch']:>3} {rec['phase']:<8} loss {rec['train_loss']:.3f} "
                  f"cost {rec['train_cost']:5.1f} entropy {rec['entropy']:.3f}  p = [{probs}]")

    print("edges:", list(g.edge_order))
    run_training(g, dist, params, budget, cfg, data, data, on_epoch=show)
    found = Mask(live_edges(g, threshold_mask(g, dist)))

    table = brute_force_objectives(g, budget, data, 0, bf["bf_steps"], bf["bf_lr"], cfg.loss)
    print("\nbrute force, best five architectures:")
    for h, d in sorted(table.items(), key=lambda kv: kv[1])[:5]:
        mark = "  <- found" if h == found else ""
        print(f"  D = {d:7.3f}  cost {budget.cost.evaluate(g, h):4.0f}  {sorted(h)}{mark}")
    values = np.array(list(table.values()))
    print(f"\nfound {sorted(found)} with D = {table[found]:.3f}; "
          f"optimum {values.min():.3f}, spread {np.ptp(values):.1f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
