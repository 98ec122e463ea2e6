"""Reverse-mode execution of super network modules and the masked forward pass.

Tensors are numpy arrays with a leading batch axis. Every differentiable op
records a vector-Jacobian closure on a :class:`Tape`; :func:`backward` replays
the tape in reverse and accumulates parameter gradients into the
:class:`ParameterStore`. Pass ``tape=None`` for inference.

The code is dtype-agnostic. Parameters default to float32; gradient checks
may run the same code in float64.
"""
from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyTape, NotConnected, ShapeMismatch
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

CHECKPOINT_MAGIC = b"BNASPRM\0"
CHECKPOINT_VERSION = 1


class Value:
    """A node of the computation: forward data plus the gradient reaching it."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = data
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Value):
    """Leaf value owned by a ParameterStore; its grad buffer persists across tapes."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(data)


class Tape:
    def __init__(self):
        self.records = []
        self.output = None

    def __len__(self):
        return len(self.records)


def _emit(tape, data, parents, vjp):
    out = Value(data)
    if tape is not None:
        tape.records.append((out, parents, vjp))
        tape.output = out
    return out


def backward(tape: Tape, loss_grad, params: ParameterStore | None = None):
    """Back-propagate ``loss_grad`` from ``tape.output`` through every recorded op.

    Gradients are accumulated (not overwritten) into the grad buffers of the
    parameters reached. ``params`` is accepted for symmetry with the forward
    call; the parameter leaves already reference their store's buffers.
    """
    if not tape.records:
        raise EmptyTape("nothing was recorded on this tape")
    out = tape.output
    loss_grad = np.asarray(loss_grad, dtype=out.data.dtype)
    if loss_grad.shape != out.data.shape:
        raise ShapeMismatch(f"loss gradient shape {loss_grad.shape} != output shape {out.data.shape}")
    out.grad = loss_grad
    for node, parents, vjp in reversed(tape.records):
        if node.grad is None:
            continue
        for parent, g in zip(parents, vjp(node.grad)):
            if g is None:
                continue
            if isinstance(parent, Param):
                parent.grad += g
            elif parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# -- primitive ops -----------------------------------------------------------

def linear(x: Value, w: Param, b: Param, tape=None) -> Value:
    xd = x.data
    out = xd @ w.data + b.data

    def vjp(g):
        return g @ w.data.T, xd.T @ g, g.sum(axis=0)

    return _emit(tape, out, (x, w, b), vjp)


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo, x.shape


def conv2d(x: Value, w: Param, b: Param, stride=1, tape=None) -> Value:
    """Cross-correlation with zero padding ``kernel // 2`` (same-size at stride 1)."""
    xd = x.data
    cout, cin, k, _ = w.data.shape
    pad = k // 2
    cols, ho, wo, padded_shape = _im2col(xd, k, stride, pad)
    wmat = w.data.reshape(cout, -1)
    bsz = xd.shape[0]
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def vjp(g):
        gr = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gr.T @ cols).reshape(w.data.shape)
        gb = gr.sum(axis=0)
        dcols = (gr @ wmat).reshape(bsz, ho, wo, cin, k, k)
        dxp = np.zeros(padded_shape, dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:padded_shape[2] - pad, pad:padded_shape[3] - pad] if pad else dxp
        return dx, gw, gb

    return _emit(tape, np.ascontiguousarray(out), (x, w, b), vjp)


def upsample(x: Value, factor: int, tape=None) -> Value:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def vjp(g):
        b, c, h, w = g.shape
        return (g.reshape(b, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5)),)

    return _emit(tape, out, (x,), vjp)


def relu(x: Value, tape=None) -> Value:
    on = x.data > 0
    return _emit(tape, x.data * on, (x,), lambda g: (g * on,))


def add(values, tape=None) -> Value:
    """Sum in the given order; the order fixes floating-point rounding."""
    if len(values) == 1:
        return values[0]
    out = values[0].data
    for v in values[1:]:
        out = out + v.data
    return _emit(tape, out, tuple(values), lambda g: (g,) * len(values))


def global_avg_pool(x: Value, tape=None) -> Value:
    if x.data.ndim == 2:
        return x
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))
    return _emit(tape, out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape),))


# -- parameters --------------------------------------------------------------

class ParameterStore:
    """All module weights theta, keyed by ``<param_slot>.<tensor>`` names."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    @classmethod
    def for_graph(cls, g: SuperNetGraph, seed=0, dtype=np.float32):
        """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
        store = cls()
        rng = np.random.default_rng(seed)
        modules = [g.edges[e] for e in g.edge_order]
        if g.head is not None:
            modules.append(g.head)
        for m in modules:
            for name, shape in module_param_shapes(m).items():
                if name in store._params:
                    continue
                if len(shape) == 1:
                    data = np.zeros(shape, dtype=dtype)
                else:
                    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
                    bound = np.sqrt(6.0 / fan_in)
                    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
                store.add(name, data)
        return store

    def add(self, name, data):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        self._params[name] = Param(name, np.ascontiguousarray(data))

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state):
        for n, arr in state.items():
            self._params[n].data[...] = arr

    def astype(self, dtype):
        """Independent copy with every tensor cast to ``dtype``; grads start at zero."""
        other = ParameterStore()
        for n, p in self._params.items():
            other.add(n, p.data.astype(dtype, copy=True))
        return other

    def copy(self):
        other = ParameterStore()
        for n, p in self._params.items():
            other.add(n, p.data.copy())
        return other

    def num_values(self):
        return sum(p.data.size for p in self._params.values())

    def to_bytes(self) -> bytes:
        """Versioned binary checkpoint: names, shapes, raw little-endian float32."""
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(self._params))]
        for n, p in self._params.items():
            raw = n.encode()
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes):
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a budgetnas parameter checkpoint")
        version, count = struct.unpack_from("<II", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 16
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
            store.add(name, data)
        return store

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# -- modules and networks ----------------------------------------------------

def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(np.asarray(x))


def apply_module(m: ModuleSpec, x, params: ParameterStore, tape: Tape | None = None) -> Value:
    """Run one module on a batch. ``x`` has shape ``(batch, *layer_shape)``."""
    x = as_value(x)
    expected = module_output_shape(m, x.data.shape[1:])
    s, hp = m.param_slot, m.hyper
    if m.kind == "Identity":
        return x
    if m.kind == "Dense":
        out = linear(x, params[f"{s}.w"], params[f"{s}.b"], tape)
    elif m.kind == "GlobalPoolDense":
        out = linear(global_avg_pool(x, tape), params[f"{s}.w"], params[f"{s}.b"], tape)
    elif m.kind in ("Conv2d", "Projection"):
        out = conv2d(x, params[f"{s}.w"], params[f"{s}.b"], hp.get("stride", 1), tape)
    elif m.kind == "DownsampleConv":
        out = conv2d(x, params[f"{s}.w"], params[f"{s}.b"], hp.get("stride", 2), tape)
    elif m.kind == "UpsampleConv":
        # conv at the coarse resolution, then nearest-neighbour upsampling
        y = conv2d(x, params[f"{s}.w"], params[f"{s}.b"], 1, tape)
        out = upsample(y, hp.get("factor", 2), tape)
    elif m.kind == "BasicBlock":
        y = relu(conv2d(x, params[f"{s}.w"], params[f"{s}.b"], hp.get("stride", 1), tape), tape)
        y = conv2d(y, params[f"{s}.w2"], params[f"{s}.b2"], 1, tape)
        if needs_projection(m):
            sc = conv2d(x, params[f"{s}.pw"], params[f"{s}.pb"], hp.get("stride", 1), tape)
        else:
            sc = x
        out = relu(add([y, sc], tape), tape)
    else:
        raise ValueError(f"cannot apply module kind {m.kind!r}")
    assert out.data.shape[1:] == expected, (m.kind, out.data.shape, expected)
    return out


def active_layers(g: SuperNetGraph, h: Mask) -> set:
    """Layers that receive input from l_1 and feed l_N under ``h``."""
    return reachable_from_source(g, h) & coreachable_to_sink(g, h)


def ssn_forward(g: SuperNetGraph, h: Mask, x, params: ParameterStore, tape: Tape | None = None) -> Value:
    """Masked forward pass: each layer sums its selected incoming modules.

    Layers with no selected, live input hold no value, and modules reading
    them contribute nothing; the result therefore equals the plain forward
    pass of ``sub_architecture(g, h)``. Incoming terms are added in ascending
    source order.
    """
    x = as_value(x)
    if x.data.shape[1:] != g.layer(g.source).shape:
        raise ShapeMismatch(f"input shape {x.data.shape[1:]} != layer {g.source} shape {g.layer(g.source).shape}")
    live = active_layers(g, h)
    if g.sink not in live:
        raise NotConnected("mask does not connect the input layer to the output layer")
    values = {g.source: x}
    for layer in g.layers[1:]:
        i = layer.id
        if i not in live:
            continue
        terms = [apply_module(g.edges[(k, i)], values[k], params, tape)
                 for k in g.incoming[i] if k in live and (k, i) in h]
        v = add(terms, tape)
        if layer.activation == "relu":
            v = relu(v, tape)
        values[i] = v
    out = values[g.sink]
    if tape is not None:
        tape.output = out
    return out


def predict(g: SuperNetGraph, h: Mask, x, params: ParameterStore, tape: Tape | None = None) -> Value:
    """Masked forward pass followed by the classifier head, if the graph has one."""
    out = ssn_forward(g, h, x, params, tape)
    if g.head is not None:
        out = apply_module(g.head, out, params, tape)
        if tape is not None:
            tape.output = out
    return out


# -- losses ------------------------------------------------------------------

LOSS_KINDS = ("CrossEntropy", "SquaredError")


def loss_per_example(pred, target, kind="CrossEntropy"):
    """Per-example losses and their gradient with respect to ``pred``.

    CrossEntropy takes logits ``(batch, classes)`` and integer labels;
    SquaredError takes matching shapes and sums over non-batch axes.
    """
    pred = np.asarray(pred)
    if kind == "CrossEntropy":
        target = np.asarray(target, dtype=np.int64)
        if pred.ndim != 2 or target.shape != (pred.shape[0],):
            raise ShapeMismatch(f"CrossEntropy needs (batch, classes) logits and (batch,) labels, got {pred.shape}, {target.shape}")
        z = pred - pred.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(pred.shape[0])
        losses = lse - z[rows, target]
        grad = np.exp(z - lse[:, None])
        grad[rows, target] -= 1
        return losses, grad
    if kind == "SquaredError":
        target = np.asarray(target, dtype=pred.dtype)
        if target.shape != pred.shape:
            raise ShapeMismatch(f"SquaredError shapes differ: {pred.shape} vs {target.shape}")
        diff = pred - target
        return (diff ** 2).reshape(len(diff), -1).sum(axis=1), 2 * diff
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_delta(pred, target, kind="CrossEntropy") -> float:
    """Mean loss over the batch. A 1-D ``pred`` is treated as one example."""
    pred = np.asarray(pred.data if isinstance(pred, Value) else pred)
    if pred.ndim == 1:
        pred = pred[None]
        target = np.asarray(target)[None]
    losses, _ = loss_per_example(pred, target, kind)
    return float(losses.mean())
