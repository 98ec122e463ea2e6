"""Generators for the two convolutional super network families.

ResNet Fabric
    ``k`` groups of ``n`` basic blocks each. Layer ``(g, j)`` is the output of
    block ``j`` of group ``g``; block ``j`` of group ``g >= 2`` also reads the
    previous group's layers ``j-1, j, j+1`` (those that exist) through
    stride-2 blocks with 1x1 projection shortcuts. The main row (stem, then
    every block in sequence) is a plain ResNet-(6n+2).

Convolutional Neural Fabric
    A ``W x H`` grid; row ``s`` holds feature maps at resolution
    ``input / 2**(s-1)``. Node ``(l, s)`` sums a stride-2 conv of
    ``(l-1, s-1)``, a same-scale conv of ``(l-1, s)`` and an upsampled conv of
    ``(l-1, s+1)``, then applies ReLU. Only the first and last columns have
    vertical edges.

With ``toy_scale=True`` modules are built at the requested (small) sizes but
carry, in ``cost_meta``, the analytic costs of the same topology at full
size, so cost reports stay meaningful while training stays cheap.
"""
from __future__ import annotations

from .costs import module_flops, module_params
from .errors import InvalidConfig
from .graph import LayerSpec, ModuleSpec, build_graph, module_output_shape
from .graph import Mask, SuperNetGraph

RESNET_REFERENCE = {"base_filters": 16, "input_shape": (3, 32, 32)}


def _slot(k, i):
    return f"e{k}_{i}"


def _block(cin, cout, stride, k, i):
    return ModuleSpec("BasicBlock", {"in_channels": cin, "out_channels": cout, "stride": stride}, _slot(k, i))


def resnet_fabric_layer_id(width_n: int, group: int, j: int) -> int:
    """Layer id of block output ``j`` (0..n) of ``group`` (1-based); ``(1, 0)`` is the stem."""
    if group == 1:
        return 2 + j
    if j == 0:
        return resnet_fabric_layer_id(width_n, group - 1, width_n)
    return 2 + width_n + (group - 2) * width_n + j


def _resnet_fabric(k, n, base_filters, input_shape, num_classes):
    cin, size, _ = input_shape
    layers = [LayerSpec(1, input_shape)]
    edges = []
    stem = ModuleSpec("Conv2d", {"in_channels": cin, "out_channels": base_filters, "kernel": 3, "stride": 1}, _slot(1, 2))
    layers.append(LayerSpec(2, (base_filters, size, size), "relu"))
    edges.append((1, 2, stem))
    shapes = {2: (base_filters, size, size)}
    for g in range(1, k + 1):
        filters = base_filters * 2 ** (g - 1)
        for j in range(1, n + 1):
            dst = resnet_fabric_layer_id(n, g, j)
            src = resnet_fabric_layer_id(n, g, j - 1)
            stride = 2 if (g > 1 and j == 1) else 1
            m = _block(shapes[src][0], filters, stride, src, dst)
            shapes[dst] = module_output_shape(m, shapes[src])
            layers.append(LayerSpec(dst, shapes[dst]))
            edges.append((src, dst, m))
            if g == 1:
                continue
            for mm in (j - 1, j, j + 1):
                if not 1 <= mm <= n or (j == 1 and mm == n):
                    continue
                cross = resnet_fabric_layer_id(n, g - 1, mm)
                edges.append((cross, dst, _block(shapes[cross][0], filters, 2, cross, dst)))
    last = resnet_fabric_layer_id(n, k, n)
    head = ModuleSpec("GlobalPoolDense", {"in_channels": shapes[last][0], "classes": num_classes}, "head")
    return build_graph(layers, edges, head)


def _with_cost_meta(small: SuperNetGraph, ref: SuperNetGraph) -> SuperNetGraph:
    assert small.edge_order == ref.edge_order
    edges = []
    for k, i in small.edge_order:
        m, r = small.edges[(k, i)], ref.edges[(k, i)]
        meta = {"flops": module_flops(r, ref.layer(k).shape), "params": module_params(r)}
        edges.append((k, i, ModuleSpec(m.kind, m.hyper, m.param_slot, meta)))
    head = small.head
    if head is not None:
        rh = ref.head
        meta = {"flops": module_flops(rh, ref.layer(ref.sink).shape), "params": module_params(rh)}
        head = ModuleSpec(head.kind, head.hyper, head.param_slot, meta)
    return build_graph(small.layers, edges, head)


def _check_halvings(size, halvings, what):
    if size < 2 ** halvings:
        raise InvalidConfig(f"{what}: input size {size} cannot be halved {halvings} times")


def resnet_fabric(groups_k: int, width_n: int, base_filters=16, input_shape=(3, 32, 32), num_classes=10,
                  toy_scale=False) -> SuperNetGraph:
    if groups_k < 1 or width_n < 1:
        raise InvalidConfig(f"need groups_k >= 1 and width_n >= 1, got {groups_k}, {width_n}")
    if base_filters < 1 or num_classes < 1:
        raise InvalidConfig("base_filters and num_classes must be positive")
    input_shape = tuple(input_shape)
    if len(input_shape) != 3:
        raise InvalidConfig(f"input_shape must be (C, H, W), got {input_shape}")
    _check_halvings(input_shape[1], groups_k - 1, "resnet_fabric")
    g = _resnet_fabric(groups_k, width_n, base_filters, input_shape, num_classes)
    if toy_scale:
        ref = _resnet_fabric(groups_k, width_n, RESNET_REFERENCE["base_filters"],
                             RESNET_REFERENCE["input_shape"], num_classes)
        g = _with_cost_meta(g, ref)
    return g


def resnet_mask(groups_k: int, width_n: int) -> Mask:
    """The main-row edges: the plain ResNet-(6n+2) inside the fabric."""
    edges = [(1, 2)]
    for g in range(1, groups_k + 1):
        for j in range(1, width_n + 1):
            edges.append((resnet_fabric_layer_id(width_n, g, j - 1), resnet_fabric_layer_id(width_n, g, j)))
    return Mask(edges)


# -- convolutional neural fabrics --------------------------------------------

def cnf_layer_id(height_H: int, column: int, scale: int) -> int:
    return 1 + (column - 1) * height_H + scale


def _conv(kind, f_in, f_out, k, i, **extra):
    return ModuleSpec(kind, {"in_channels": f_in, "out_channels": f_out, "kernel": 3, **extra}, _slot(k, i))


def _cnf(W, H, filters, input_shape, task):
    cin, size, _ = input_shape
    sizes = [size]
    for _ in range(H - 1):
        sizes.append((sizes[-1] + 1) // 2)
    if task[0] == "Classify" and sizes[-1] != 1:
        raise InvalidConfig(f"classification CNF must halve {size}x{size} down to 1x1 in {H} scales")
    if any(sizes[s] * 2 != sizes[s - 1] for s in range(1, H)):
        raise InvalidConfig(f"input size {size} must be divisible by 2**{H - 1}")
    node = lambda l, s: cnf_layer_id(H, l, s)
    layers = [LayerSpec(1, input_shape)]
    for l in range(1, W + 1):
        for s in range(1, H + 1):
            layers.append(LayerSpec(node(l, s), (filters, sizes[s - 1], sizes[s - 1]), "relu"))
    edges = [(1, node(1, 1), _conv("Conv2d", cin, filters, 1, node(1, 1), stride=1))]

    def down(a, b):
        edges.append((a, b, _conv("DownsampleConv", filters, filters, a, b, stride=2)))

    def same(a, b):
        edges.append((a, b, _conv("Conv2d", filters, filters, a, b, stride=1)))

    def up(a, b):
        edges.append((a, b, _conv("UpsampleConv", filters, filters, a, b, factor=2)))

    for s in range(2, H + 1):
        down(node(1, s - 1), node(1, s))
    for l in range(2, W + 1):
        for s in range(1, H + 1):
            if s > 1:
                down(node(l - 1, s - 1), node(l, s))
            same(node(l - 1, s), node(l, s))
            if s < H:
                up(node(l - 1, s + 1), node(l, s))
    if task[0] == "Classify":
        if W > 1:
            for s in range(2, H + 1):
                down(node(W, s - 1), node(W, s))
        out = node(W, H)
        head = ModuleSpec("GlobalPoolDense", {"in_channels": filters, "classes": task[1]}, "head")
        # put the output layer last
        layers = [l for l in layers if l.id != out] + [next(l for l in layers if l.id == out)]
    else:
        for s in range(H - 1, 0, -1):
            up(node(W, s + 1), node(W, s))
        out = node(W, 1)
        head = ModuleSpec("Projection", {"in_channels": filters, "out_channels": task[1], "stride": 1}, "head")
        layers = [l for l in layers if l.id != out] + [next(l for l in layers if l.id == out)]
    return build_graph(layers, edges, head)


def _parse_task(task):
    if isinstance(task, str):
        task = (task, 10 if task == "Classify" else 3)
    kind, classes = task
    if kind not in ("Classify", "Segment") or int(classes) < 1:
        raise InvalidConfig(f"task must be ('Classify', classes) or ('Segment', classes), got {task!r}")
    return kind, int(classes)


def cnf(width_W: int, height_H: int, filters=128, input_shape=(3, 32, 32), task=("Classify", 10),
        toy_scale=False) -> SuperNetGraph:
    task = _parse_task(task)
    if width_W < 1 or height_H < 1 or filters < 1:
        raise InvalidConfig(f"need positive width, height and filters, got {width_W}, {height_H}, {filters}")
    if task[0] == "Segment" and width_W < 2:
        raise InvalidConfig("a segmentation fabric needs at least two columns")
    input_shape = tuple(input_shape)
    if len(input_shape) != 3:
        raise InvalidConfig(f"input_shape must be (C, H, W), got {input_shape}")
    g = _cnf(width_W, height_H, filters, input_shape, task)
    if toy_scale:
        ref_filters = 128 if task[0] == "Classify" else 64
        ref_size = 2 ** (height_H - 1)
        ref = _cnf(width_W, height_H, ref_filters, (3, ref_size, ref_size), task)
        g = _with_cost_meta(g, ref)
    return g

