"""Cost of the plain ResNets inside a ResNet fabric, and of full CNF grids.

Run: python3 demos/cost_tables.py
"""
from budgetnas import fabrics
from budgetnas.costs import flops_cost, params_cost
from budgetnas.graph import Mask


def main():
    print(f"{'network':<12}{'edges':>7}{'MFLOPs':>10}{'Mparams':>10}")
    for depth in (20, 32, 44, 56, 110):
        n = (depth - 2) // 6
        g = fabrics.resnet_fabric(3, n)
        h = fabrics.resnet_mask(3, n)
        print(f"ResNet-{depth:<5}{len(h):>7}{flops_cost(g, h) / 1e6:>10.2f}{params_cost(g, h) / 1e6:>10.2f}")
    for w in (1, 2, 4, 8):
        g = fabrics.cnf(w, 6)
        h = Mask.full(g)
        print(f"CNF W={w:<6}{g.num_edges:>7}{flops_cost(g, h) / 1e6:>10.0f}{params_cost(g, h) / 1e6:>10.2f}")

    # the fabric around ResNet-20 is much bigger than the ResNet it contains
    g = fabrics.resnet_fabric(3, 3)
    print(f"\nResNet fabric k=3 n=3: {g.num_edges} edges, {flops_cost(g, Mask.full(g)) / 1e6:.1f} MFLOPs when full")


if __name__ == "__main__":
    main()
