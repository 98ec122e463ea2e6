"""Super network DAG: layers, candidate modules on edges, and edge masks.

A :class:`SuperNetGraph` is immutable once built. Layers are stored in a
topological order that is fixed at build time; every other module (sampling,
forward pass, scheduling) walks the graph in that order.

Serialized graphs are JSON-lines files::

    {"format": "budgetnas-graph", "version": 1}
    {"type": "layer", "id": 1, "shape": [3, 32, 32], "activation": null}
    {"type": "edge", "src": 1, "dst": 2, "kind": "Conv2d", "hyper": {...},
     "param_slot": "e1_2", "cost_meta": null}
    {"type": "head", "kind": "GlobalPoolDense", "hyper": {...}, ...}

Layer records come first and in topological order, then edge records in
sampling order, then at most one head record.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CycleDetected,
    DisconnectedLayer,
    GraphError,
    MultipleSinks,
    NotConnected,
    ShapeMismatch,
)

GRAPH_FORMAT = "budgetnas-graph"
MASK_FORMAT = "budgetnas-mask"
FORMAT_VERSION = 1

MODULE_KINDS = (
    "Dense",
    "Conv2d",
    "Projection",
    "Identity",
    "DownsampleConv",
    "UpsampleConv",
    "BasicBlock",
)
HEAD_KINDS = ("GlobalPoolDense",)  # only valid as a head
ALLOWED_HEADS = ("GlobalPoolDense", "Projection")
ACTIVATIONS = (None, "relu")


@dataclass(frozen=True)
class LayerSpec:
    id: int
    shape: tuple[int, ...]
    activation: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.shape or any(d < 1 for d in self.shape):
            raise GraphError(f"layer {self.id}: shape must be non-empty with dims >= 1, got {self.shape}")
        if self.activation not in ACTIVATIONS:
            raise GraphError(f"layer {self.id}: unknown activation {self.activation!r}")


@dataclass(frozen=True, eq=True)
class ModuleSpec:
    """A candidate module sitting on one edge (or the classifier head).

    ``hyper`` holds the kind-specific integers: ``in``/``out`` for Dense,
    ``in_channels``/``out_channels``/``kernel``/``stride`` for the
    convolutions, ``factor`` for UpsampleConv, ``classes`` for the head.
    ``cost_meta`` optionally overrides the analytic cost of the module with
    ``{"flops": ..., "params": ..., "ops": ...}``; toy-scale fabrics use it to
    carry the full-size costs of a shrunken module.
    """

    kind: str
    hyper: Mapping[str, int] = field(default_factory=dict)
    param_slot: str | None = None
    cost_meta: Mapping[str, int] | None = None

    def __post_init__(self):
        if self.kind not in MODULE_KINDS + HEAD_KINDS:
            raise GraphError(f"unknown module kind {self.kind!r}")
        object.__setattr__(self, "hyper", MappingProxyType(dict(self.hyper)))
        if self.cost_meta is not None:
            object.__setattr__(self, "cost_meta", MappingProxyType(dict(self.cost_meta)))
        if self.kind == "Identity" and self.param_slot is not None:
            raise GraphError("Identity modules have no parameters")
        if self.kind != "Identity" and self.param_slot is None:
            raise GraphError(f"{self.kind} module needs a param_slot")

    __hash__ = None  # hyper is a mapping

    def to_dict(self):
        return {
            "kind": self.kind,
            "hyper": dict(self.hyper),
            "param_slot": self.param_slot,
            "cost_meta": None if self.cost_meta is None else dict(self.cost_meta),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("hyper", {}), d.get("param_slot"), d.get("cost_meta"))


def _conv_out(size, kernel, stride):
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def _need(cond, message, edge):
    if not cond:
        raise ShapeMismatch(message, edge)


def module_output_shape(m: ModuleSpec, in_shape, edge=None) -> tuple[int, ...]:
    """Shape produced by ``m`` on an input of shape ``in_shape`` (batch axis excluded)."""
    in_shape = tuple(in_shape)
    hp = m.hyper
    if m.kind == "Identity":
        return in_shape
    if m.kind == "Dense":
        _need(in_shape == (hp["in"],), f"Dense expects input ({hp['in']},), got {in_shape}", edge)
        return (hp["out"],)
    if m.kind == "GlobalPoolDense":
        _need(len(in_shape) in (1, 3) and in_shape[0] == hp["in_channels"],
              f"head expects {hp['in_channels']} channels, got {in_shape}", edge)
        return (hp["classes"],)
    _need(len(in_shape) == 3, f"{m.kind} expects a (C, H, W) input, got {in_shape}", edge)
    c, h, w = in_shape
    _need(c == hp["in_channels"], f"{m.kind} expects {hp['in_channels']} input channels, got {c}", edge)
    cout = hp["out_channels"]
    if m.kind == "UpsampleConv":
        k, f = hp.get("kernel", 3), hp.get("factor", 2)
        return (cout, _conv_out(h, k, 1) * f, _conv_out(w, k, 1) * f)
    if m.kind == "Projection":
        k, s = 1, hp.get("stride", 1)
    elif m.kind == "DownsampleConv":
        k, s = hp.get("kernel", 3), hp.get("stride", 2)
    elif m.kind == "BasicBlock":
        k, s = 3, hp.get("stride", 1)
    else:  # Conv2d
        k, s = hp.get("kernel", 3), hp.get("stride", 1)
    return (cout, _conv_out(h, k, s), _conv_out(w, k, s))


def needs_projection(m: ModuleSpec) -> bool:
    """True for a BasicBlock whose shortcut must be a 1x1 projection."""
    hp = m.hyper
    return m.kind == "BasicBlock" and (hp.get("stride", 1) != 1 or hp["in_channels"] != hp["out_channels"])


def module_param_shapes(m: ModuleSpec) -> dict[str, tuple[int, ...]]:
    """Parameter tensors declared by ``m``, keyed by ``<param_slot>.<name>``."""
    hp, s = m.hyper, m.param_slot
    if m.kind == "Identity":
        return {}
    if m.kind == "Dense":
        return {f"{s}.w": (hp["in"], hp["out"]), f"{s}.b": (hp["out"],)}
    if m.kind == "GlobalPoolDense":
        return {f"{s}.w": (hp["in_channels"], hp["classes"]), f"{s}.b": (hp["classes"],)}
    cin, cout = hp["in_channels"], hp["out_channels"]
    if m.kind == "Projection":
        return {f"{s}.w": (cout, cin, 1, 1), f"{s}.b": (cout,)}
    if m.kind == "BasicBlock":
        shapes = {f"{s}.w": (cout, cin, 3, 3), f"{s}.b": (cout,),
                  f"{s}.w2": (cout, cout, 3, 3), f"{s}.b2": (cout,)}
        if needs_projection(m):
            shapes.update({f"{s}.pw": (cout, cin, 1, 1), f"{s}.pb": (cout,)})
        return shapes
    k = hp.get("kernel", 3)
    return {f"{s}.w": (cout, cin, k, k), f"{s}.b": (cout,)}


class SuperNetGraph:
    """Validated, immutable super network.

    Use :func:`build_graph` to construct one. ``edge_order`` is the canonical
    edge ordering (destination layer in topological order, then ascending
    source position); per-edge arrays such as logits are aligned with it.
    """

    def __init__(self, layers, edges, head=None):
        # unvalidated; callers go through build_graph
        self._init(layers, edges, head)

    def _init(self, layers, edges, head):
        self.layers = tuple(layers)
        self.pos = MappingProxyType({l.id: p for p, l in enumerate(self.layers)})
        self._layer = MappingProxyType({l.id: l for l in self.layers})
        self.source = self.layers[0].id
        self.sink = self.layers[-1].id
        order = sorted(edges, key=lambda e: (self.pos[e[1]], self.pos[e[0]]))
        self.edge_order = tuple(order)
        self.edges = MappingProxyType({e: edges[e] for e in order})
        self.edge_index = MappingProxyType({e: j for j, e in enumerate(order)})
        inc = {l.id: [] for l in self.layers}
        out = {l.id: [] for l in self.layers}
        for k, i in order:
            inc[i].append(k)
            out[k].append(i)
        self.incoming = MappingProxyType({i: tuple(v) for i, v in inc.items()})
        self.outgoing = MappingProxyType({k: tuple(sorted(v, key=self.pos.__getitem__)) for k, v in out.items()})
        self.head = head

    def layer(self, layer_id) -> LayerSpec:
        return self._layer[layer_id]

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def num_edges(self):
        return len(self.edge_order)

    @property
    def output_shape(self):
        if self.head is not None:
            return module_output_shape(self.head, self.layer(self.sink).shape)
        return self.layer(self.sink).shape

    def adjacency(self) -> np.ndarray:
        """Dense N x N 0/1 view of E, indexed by topological position."""
        n = self.num_layers
        a = np.zeros((n, n), dtype=np.int8)
        for k, i in self.edge_order:
            a[self.pos[k], self.pos[i]] = 1
        return a

    def __eq__(self, other):
        if not isinstance(other, SuperNetGraph):
            return NotImplemented
        return (self.layers == other.layers and self.edge_order == other.edge_order
                and all(self.edges[e] == other.edges[e] for e in self.edge_order)
                and self.head == other.head)

    __hash__ = None

    def __repr__(self):
        return f"SuperNetGraph(layers={self.num_layers}, edges={self.num_edges}, head={self.head is not None})"


def _toposort(layer_ids, edges):
    rank = {lid: r for r, lid in enumerate(layer_ids)}
    indeg = {lid: 0 for lid in layer_ids}
    succ = {lid: [] for lid in layer_ids}
    for k, i in edges:
        indeg[i] += 1
        succ[k].append(i)
    heap = [(rank[l], l) for l in layer_ids if indeg[l] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, l = heapq.heappop(heap)
        order.append(l)
        for i in succ[l]:
            indeg[i] -= 1
            if indeg[i] == 0:
                heapq.heappush(heap, (rank[i], i))
    if len(order) != len(layer_ids):
        stuck = sorted(l for l in layer_ids if indeg[l] > 0)
        raise CycleDetected(f"edges form a cycle through layers {stuck}")
    return order


def build_graph(layers: Iterable[LayerSpec], edges, head: ModuleSpec | None = None) -> SuperNetGraph:
    """Validate layers and ``(src, dst, ModuleSpec)`` triples into a graph.

    The first listed layer is the input ``l_1``; the unique layer without
    outgoing edges is the output. Incoming modules of a layer must all
    produce exactly that layer's shape.
    """
    layers = list(layers)
    if not layers:
        raise GraphError("a graph needs at least one layer")
    by_id = {}
    for l in layers:
        if l.id in by_id:
            raise GraphError(f"duplicate layer id {l.id}")
        by_id[l.id] = l
    emap = {}
    for src, dst, m in edges:
        for lid in (src, dst):
            if lid not in by_id:
                raise GraphError(f"edge ({src}, {dst}) references unknown layer {lid}")
        if src == dst:
            raise CycleDetected(f"self-loop on layer {src}")
        if (src, dst) in emap:
            raise GraphError(f"duplicate edge ({src}, {dst})")
        emap[(src, dst)] = m

    order = _toposort([l.id for l in layers], emap)
    has_in = {i for _, i in emap}
    has_out = {k for k, _ in emap}
    input_id = layers[0].id
    if input_id in has_in:
        raise GraphError(f"input layer {input_id} must not have incoming edges")
    if len(layers) > 1:
        for lid in order:
            if lid != input_id and lid not in has_in:
                raise DisconnectedLayer(lid, f"layer {lid} has no incoming edge (only the input may be a source)")
        sinks = [lid for lid in order if lid not in has_out]
        if len(sinks) > 1:
            raise MultipleSinks(f"graph has several output layers: {sinks}")

    for (k, i), m in emap.items():
        if m.kind in HEAD_KINDS:
            raise GraphError(f"edge ({k}, {i}): {m.kind} is only valid as a head")
        got = module_output_shape(m, by_id[k].shape, edge=(k, i))
        if got != by_id[i].shape:
            raise ShapeMismatch(f"edge ({k}, {i}) {m.kind} produces {got}, layer {i} has shape {by_id[i].shape}", (k, i))
    if head is not None:
        if head.kind not in ALLOWED_HEADS:
            raise GraphError(f"{head.kind} cannot be used as a head")
        module_output_shape(head, by_id[order[-1]].shape, edge="head")

    return SuperNetGraph([by_id[l] for l in order], emap, head)


class Mask:
    """Binary edge selection H, stored as the set of selected edges."""

    __slots__ = ("selected",)

    def __init__(self, selected=()):
        object.__setattr__(self, "selected", frozenset((int(k), int(i)) for k, i in selected))

    def __setattr__(self, name, value):
        raise AttributeError("Mask is immutable")

    @classmethod
    def full(cls, g: SuperNetGraph):
        return cls(g.edge_order)

    @classmethod
    def from_bits(cls, g: SuperNetGraph, bits):
        bits = np.asarray(bits)
        if bits.shape != (g.num_edges,):
            raise ValueError(f"expected {g.num_edges} bits, got shape {bits.shape}")
        return cls(e for e, b in zip(g.edge_order, bits) if b)

    def to_bits(self, g: SuperNetGraph) -> np.ndarray:
        return np.array([e in self.selected for e in g.edge_order], dtype=np.int8)

    def conforms(self, g: SuperNetGraph) -> bool:
        return all(e in g.edges for e in self.selected)

    def check(self, g: SuperNetGraph):
        bad = sorted(e for e in self.selected if e not in g.edges)
        if bad:
            raise GraphError(f"mask selects edges absent from the graph: {bad}")

    def __contains__(self, edge):
        return tuple(edge) in self.selected

    def __getitem__(self, edge):
        return int(tuple(edge) in self.selected)

    def __len__(self):
        return len(self.selected)

    def __iter__(self):
        return iter(sorted(self.selected))

    def __eq__(self, other):
        return isinstance(other, Mask) and self.selected == other.selected

    def __hash__(self):
        return hash(self.selected)

    def __repr__(self):
        return f"Mask({sorted(self.selected)})"

    def to_json(self) -> str:
        return json.dumps({"format": MASK_FORMAT, "version": FORMAT_VERSION,
                           "edges": [list(e) for e in sorted(self.selected)]})

    @classmethod
    def from_json(cls, text: str):
        d = json.loads(text)
        if d.get("format") != MASK_FORMAT:
            raise GraphError("not a budgetnas mask file")
        return cls(tuple(e) for e in d["edges"])


def reachable_from_source(g: SuperNetGraph, h: Mask) -> set:
    seen = {g.source}
    for layer in g.layers[1:]:
        i = layer.id
        if any(k in seen and (k, i) in h for k in g.incoming[i]):
            seen.add(i)
    return seen


def coreachable_to_sink(g: SuperNetGraph, h: Mask) -> set:
    seen = {g.sink}
    for layer in reversed(g.layers[:-1]):
        k = layer.id
        if any(i in seen and (k, i) in h for i in g.outgoing[k]):
            seen.add(k)
    return seen


def is_output_connected(g: SuperNetGraph, h: Mask) -> bool:
    return g.sink in reachable_from_source(g, h)


def sub_architecture(g: SuperNetGraph, h: Mask) -> SuperNetGraph:
    """Graph restricted to the selected edges that lie on an input-to-output path."""
    h.check(g)
    fwd = reachable_from_source(g, h)
    if g.sink not in fwd:
        raise NotConnected("mask does not connect the input layer to the output layer")
    keep = fwd & coreachable_to_sink(g, h)
    layers = [l for l in g.layers if l.id in keep]
    edges = {e: g.edges[e] for e in g.edge_order if e in h and e[0] in keep and e[1] in keep}
    return SuperNetGraph(layers, edges, g.head)


def dumps_graph(g: SuperNetGraph) -> str:
    lines = [json.dumps({"format": GRAPH_FORMAT, "version": FORMAT_VERSION})]
    for l in g.layers:
        lines.append(json.dumps({"type": "layer", "id": l.id, "shape": list(l.shape), "activation": l.activation}))
    for k, i in g.edge_order:
        lines.append(json.dumps({"type": "edge", "src": k, "dst": i, **g.edges[(k, i)].to_dict()}))
    if g.head is not None:
        lines.append(json.dumps({"type": "head", **g.head.to_dict()}))
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> SuperNetGraph:
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records or records[0].get("format") != GRAPH_FORMAT:
        raise GraphError("not a budgetnas graph file")
    if records[0].get("version") != FORMAT_VERSION:
        raise GraphError(f"unsupported graph format version {records[0].get('version')}")
    layers, edges, head = [], [], None
    for r in records[1:]:
        t = r.get("type")
        if t == "layer":
            layers.append(LayerSpec(r["id"], r["shape"], r.get("activation")))
        elif t == "edge":
            edges.append((r["src"], r["dst"], ModuleSpec.from_dict(r)))
        elif t == "head":
            head = ModuleSpec.from_dict(r)
        else:
            raise GraphError(f"unknown record type {t!r}")
    return build_graph(layers, edges, head)


def save_graph(g: SuperNetGraph, path):
    with open(path, "w") as f:
        f.write(dumps_graph(g))


def load_graph(path) -> SuperNetGraph:
    with open(path) as f:
        return loads_graph(f.read())
