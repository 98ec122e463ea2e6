"""Makespan of deep versus wide networks on a few machines.

Both networks have roughly the same number of modules, but only the wide one
can use a second machine. Run: python3 demos/distributed_schedules.py
"""
from budgetnas import fabrics, zoo
from budgetnas.graph import Mask
from budgetnas.schedule import build_op_graph, distributed_cost, optimal_schedule


def main():
    deep, wide = zoo.figure_networks()
    for name, g in (("deep", deep), ("wide", wide)):
        h = Mask.full(g)
        spans = [distributed_cost(g, h, n).makespan for n in (1, 2, 3)]
        best = optimal_schedule(build_op_graph(g, h), 2).makespan
        print(f"{name}: {g.num_edges} modules, makespan on 1/2/3 machines = {spans}, optimum on 2 = {best}")
    print("\nschedule of the wide network on 2 machines:")
    print(distributed_cost(wide, Mask.full(wide), 2).to_csv())

    # a ResNet is a chain, so extra machines only help inside projection blocks
    g = fabrics.resnet_fabric(3, 3, base_filters=2, input_shape=(1, 8, 8))
    h = fabrics.resnet_mask(3, 3)
    print("ResNet-20 unit ops on 1/2 machines:", [distributed_cost(g, h, n).makespan for n in (1, 2)])


if __name__ == "__main__":
    main()
