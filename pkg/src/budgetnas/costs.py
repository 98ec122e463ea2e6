"""Architecture costs C(H * E): Mult-Adds, parameter count, distributed makespan.

All costs are measured on the live part of the masked graph, i.e. the
modules lying on some input-to-output path (what the forward pass actually
runs). A mask that does not connect input to output has no live modules and
therefore zero FLOPs and parameters. The classifier head, when present,
counts as soon as the output is reachable.

One Mult-Add counts as one operation.
"""
from __future__ import annotations

import numpy as np

from .graph import (
    Mask,
    ModuleSpec,
    SuperNetGraph,
    coreachable_to_sink,
    module_output_shape,
    module_param_shapes,
    needs_projection,
    reachable_from_source,
)
from .schedule import default_op_template, distributed_cost


def module_flops(m: ModuleSpec, in_shape) -> int:
    if m.cost_meta is not None and "flops" in m.cost_meta:
        return int(m.cost_meta["flops"])
    hp = m.hyper
    if m.kind == "Identity":
        return 0
    if m.kind == "Dense":
        return hp["in"] * hp["out"]
    if m.kind == "GlobalPoolDense":
        return hp["in_channels"] * hp["classes"]
    cin, cout = hp["in_channels"], hp["out_channels"]
    _, ho, wo = module_output_shape(m, in_shape)
    if m.kind == "BasicBlock":
        per_pixel = 9 * cin * cout + 9 * cout * cout + (cin * cout if needs_projection(m) else 0)
        return ho * wo * per_pixel
    if m.kind == "Projection":
        return ho * wo * cin * cout
    k = hp.get("kernel", 3)
    if m.kind == "UpsampleConv":
        # the convolution runs at the input (coarse) resolution
        _, hi, wi = in_shape
        return hi * wi * cin * cout * k * k
    return ho * wo * cin * cout * k * k


def module_params(m: ModuleSpec) -> int:
    if m.cost_meta is not None and "params" in m.cost_meta:
        return int(m.cost_meta["params"])
    return int(sum(np.prod(s) for s in module_param_shapes(m).values()))


def live_edges(g: SuperNetGraph, h: Mask):
    fwd = reachable_from_source(g, h)
    if g.sink not in fwd:
        return []
    live = fwd & coreachable_to_sink(g, h)
    return [e for e in g.edge_order if e in h and e[0] in live and e[1] in live]


def flops_cost(g: SuperNetGraph, h: Mask) -> int:
    edges = live_edges(g, h)
    total = sum(module_flops(g.edges[(k, i)], g.layer(k).shape) for k, i in edges)
    if edges and g.head is not None:
        total += module_flops(g.head, g.layer(g.sink).shape)
    return int(total)


def params_cost(g: SuperNetGraph, h: Mask) -> int:
    """Parameter count; a param slot shared by several edges is counted once."""
    edges = live_edges(g, h)
    modules = [g.edges[e] for e in edges]
    if edges and g.head is not None:
        modules.append(g.head)
    per_slot = {}
    for m in modules:
        if m.param_slot is not None:
            per_slot.setdefault(m.param_slot, module_params(m))
    return int(sum(per_slot.values()))


class CostEvaluator:
    """Common interface: ``evaluate(g, h)`` returns a non-negative scalar."""

    kind = "abstract"
    unit = ""

    def evaluate(self, g: SuperNetGraph, h: Mask) -> float:
        raise NotImplementedError

    def __call__(self, g, h):
        return self.evaluate(g, h)

    def describe(self) -> dict:
        return {"kind": self.kind, "unit": self.unit}


class FlopsCost(CostEvaluator):
    kind = "Flops"
    unit = "mult-adds"

    def evaluate(self, g, h):
        return float(flops_cost(g, h))


class ParamsCost(CostEvaluator):
    kind = "Params"
    unit = "parameters"

    def evaluate(self, g, h):
        return float(params_cost(g, h))


class DistributedCost(CostEvaluator):
    kind = "Distributed"
    unit = "cycles"

    def __init__(self, machines: int, policy="GreedyList", op_template=default_op_template):
        if machines < 1:
            raise ValueError("need at least one machine")
        self.machines = machines
        self.policy = policy
        self.op_template = op_template

    def schedule(self, g, h):
        return distributed_cost(g, h, self.machines, self.policy, self.op_template)

    def evaluate(self, g, h):
        return float(self.schedule(g, h).makespan)

    def describe(self):
        return {**super().describe(), "machines": self.machines, "policy": self.policy}


class StochasticCost(CostEvaluator):
    """Base cost plus seeded additive noise, clipped at zero.

    ``noise`` is ``("uniform", half_width)`` or ``("gaussian", sigma)``.
    Each call draws a fresh sample from the evaluator's own stream.
    """

    kind = "Stochastic"

    def __init__(self, base: CostEvaluator, noise=("uniform", 0.0), seed=0):
        self.base = base
        self.noise = (str(noise[0]), float(noise[1]))
        if self.noise[0] not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise kind {self.noise[0]!r}")
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    @property
    def unit(self):
        return self.base.unit

    def evaluate(self, g, h):
        value = self.base.evaluate(g, h)
        kind, scale = self.noise
        if scale == 0:
            return value
        eps = self.rng.uniform(-scale, scale) if kind == "uniform" else self.rng.normal(0.0, scale)
        return max(0.0, value + eps)

    def describe(self):
        return {"kind": self.kind, "unit": self.unit, "base": self.base.describe(),
                "noise": list(self.noise), "seed": self.seed}


def evaluate(c: CostEvaluator, g: SuperNetGraph, h: Mask) -> float:
    return c.evaluate(g, h)


def make_cost(kind: str, machines: int = 1, policy="GreedyList", noise=None, seed=0) -> CostEvaluator:
    """Build an evaluator from config-style arguments (``flops``, ``params``, ``distributed``)."""
    key = kind.lower()
    if key == "flops":
        base = FlopsCost()
    elif key == "params":
        base = ParamsCost()
    elif key == "distributed":
        base = DistributedCost(machines, policy)
    else:
        raise ValueError(f"unknown cost kind {kind!r}")
    if noise is not None:
        return StochasticCost(base, noise, seed)
    return base
