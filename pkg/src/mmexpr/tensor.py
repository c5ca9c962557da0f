"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

All model math in this package runs through the ops defined here. A Graph
records every executed operation in order; ``backward`` replays the tape in
reverse, accumulating gradients into the participating leaf tensors. Separate
graphs are independent and may be used concurrently; a single graph has one
writer during forward/backward.

Broadcasting is deliberately restricted: ``add`` supports a 1-D bias against
the trailing axis, everything else requires exact shapes. Constant scalar
multiplication is its own op (``scale``) so no tensor broadcasting is needed.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

DTYPE = np.float32

OP_KINDS = (
    "matmul", "add", "mul", "scale", "concat", "sigmoid", "tanh", "relu",
    "softmax", "log_softmax", "dropout", "layer_norm", "slice", "transpose",
    "sum", "mean",
)


class Tensor:
    """Dense float32 array, optionally tracked for gradients.

    ``grad`` is populated (same shape as ``data``) by ``backward`` for leaf
    tensors created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # note: ascontiguousarray would promote 0-d to 1-d; asarray keeps ()
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Copy of the values, cut off from any graph."""
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Node:
    """One executed operation: inputs, output, backward rule, and its attrs.

    ``attrs`` keeps the op's parameters (axis, rate, the realized dropout
    mask, ...) so a recorded graph can be audited or replayed.
    """

    __slots__ = ("kind", "inputs", "output", "backward_fn", "attrs")

    def __init__(self, kind, inputs, output, backward_fn, attrs):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.attrs = attrs


class Graph:
    """Ordered tape of operation records; every node's inputs precede it.

    With ``record=False`` the graph validates and computes but keeps no tape
    and marks outputs grad-free (inference mode).
    """

    def __init__(self, record: bool = True):
        self.nodes: list[Node] = []
        self.record = record
        self._nan_checked: set[int] = set()

    # -- generic entry point -------------------------------------------------

    def apply(self, kind: str, inputs, **attrs) -> Tensor:
        """Execute one op on already-validated Tensor inputs and record it."""
        if kind not in _OP_TABLE:
            raise ValueError(f"unknown op kind {kind!r}")
        inputs = tuple(inputs)
        for t in inputs:
            if not isinstance(t, Tensor):
                raise TypeError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
            self._reject_nan(kind, t)
        with np.errstate(over="ignore", invalid="ignore"):
            out_data, backward_fn = _OP_TABLE[kind](inputs, attrs)
        requires = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires)
        if requires:
            self.nodes.append(Node(kind, inputs, out, backward_fn, attrs))
        return out

    def _reject_nan(self, kind, t: Tensor):
        # np.min propagates NaN, so one scan detects it; memoized per graph
        # because parameters recur in every op of a step.
        key = id(t)
        if key in self._nan_checked:
            return
        if t.data.size and math.isnan(float(np.min(t.data))):
            raise ValueError(f"{kind}: NaN in input tensor"
                             + (f" {t.name!r}" if t.name else ""))
        self._nan_checked.add(key)

    # -- op shorthands --------------------------------------------------------

    def matmul(self, a, b):
        return self.apply("matmul", (a, b))

    def add(self, a, b):
        return self.apply("add", (a, b))

    def mul(self, a, b):
        return self.apply("mul", (a, b))

    def scale(self, x, factor: float):
        return self.apply("scale", (x,), factor=factor)

    def concat(self, tensors, axis: int = 0):
        return self.apply("concat", tuple(tensors), axis=axis)

    def sigmoid(self, x):
        return self.apply("sigmoid", (x,))

    def tanh(self, x):
        return self.apply("tanh", (x,))

    def relu(self, x):
        return self.apply("relu", (x,))

    def softmax(self, x):
        return self.apply("softmax", (x,))

    def log_softmax(self, x):
        return self.apply("log_softmax", (x,))

    def dropout(self, x, rate: float, rng=None, mask=None):
        return self.apply("dropout", (x,), rate=rate, rng=rng, mask=mask)

    def layer_norm(self, x, gain, shift, eps: float = 1e-5):
        return self.apply("layer_norm", (x, gain, shift), eps=eps)

    def slice(self, x, axis: int, start: int, stop: int):
        return self.apply("slice", (x,), axis=axis, start=start, stop=stop)

    def transpose(self, x, axes=None):
        return self.apply("transpose", (x,), axes=axes)

    def sum(self, x):
        return self.apply("sum", (x,))

    def mean(self, x):
        return self.apply("mean", (x,))

    def backward(self, loss: Tensor):
        backward(loss, self)


def forward_op(graph: Graph, kind: str, inputs, **attrs) -> Tensor:
    """Functional alias for ``Graph.apply``."""
    return graph.apply(kind, inputs, **attrs)


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    ``loss`` must be scalar. Repeated calls on the same graph overwrite leaf
    gradients with identical values (the walk has no side effects of its own).
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tracked tensor")

    produced = {id(n.output) for n in graph.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    owned: set[int] = set()  # buffers safe for in-place accumulation

    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, input_grads):
            if gt is None or not t.requires_grad:
                continue
            tid = id(t)
            acc = grads.get(tid)
            if acc is None:
                grads[tid] = gt  # may alias another buffer; not owned yet
            elif tid in owned:
                np.add(acc, gt, out=acc)
            else:
                grads[tid] = acc + gt
                owned.add(tid)
            if tid not in produced:
                leaves[tid] = t

    for tid, t in leaves.items():
        t.grad = np.asarray(grads[tid], dtype=DTYPE, order="C")


# -- op implementations -------------------------------------------------------
#
# Each returns (out_data, backward_fn) where backward_fn maps the output
# gradient to a tuple of per-input gradients (None where not needed).


def _op_matmul(inputs, attrs):
    a, b = _arity(inputs, 2, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = g @ bd.T if na else None
        gb = ad.T @ g if nb else None
        return ga, gb

    return ad @ bd, bw


def _op_add(inputs, attrs):
    a, b = _arity(inputs, 2, "add")
    if a.shape == b.shape:
        reduce_b = False
    elif b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[-1] == b.shape[0]:
        reduce_b = True  # bias broadcast over leading axes
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    lead = tuple(range(a.data.ndim - 1))

    def bw(g):
        gb = g.sum(axis=lead) if reduce_b else g
        return g, gb

    return a.data + b.data, bw


def _op_mul(inputs, attrs):
    a, b = _arity(inputs, 2, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (g * bd if na else None, g * ad if nb else None)

    return ad * bd, bw


def _op_scale(inputs, attrs):
    (x,) = _arity(inputs, 1, "scale")
    factor = float(attrs["factor"])
    if not math.isfinite(factor):
        raise ValueError(f"scale: factor must be finite, got {factor}")
    f32 = DTYPE(factor)

    def bw(g):
        return (g * f32,)

    return x.data * f32, bw


def _op_concat(inputs, attrs):
    if not inputs:
        raise ShapeError("concat: needs at least one input")
    axis = int(attrs.get("axis", 0))
    ndim = inputs[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    axis %= ndim
    base = list(inputs[0].shape)
    for t in inputs[1:]:
        other = list(t.shape)
        if len(other) != ndim or other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {inputs[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in inputs]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return np.concatenate([t.data for t in inputs], axis=axis), bw


def _op_sigmoid(inputs, attrs):
    (x,) = _arity(inputs, 1, "sigmoid")
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return out, bw


def _op_tanh(inputs, attrs):
    (x,) = _arity(inputs, 1, "tanh")
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return out, bw


def _op_relu(inputs, attrs):
    (x,) = _arity(inputs, 1, "relu")
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return np.where(mask, x.data, DTYPE(0)), bw


def _softmax_data(xd):
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _op_softmax(inputs, attrs):
    (x,) = _arity(inputs, 1, "softmax")
    out = _softmax_data(x.data)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return out, bw


def _op_log_softmax(inputs, attrs):
    (x,) = _arity(inputs, 1, "log_softmax")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return out, bw


def _op_dropout(inputs, attrs):
    (x,) = _arity(inputs, 1, "dropout")
    rate = float(attrs["rate"])
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    mask = attrs.get("mask")
    if mask is None:
        rng = attrs.get("rng")
        if rng is None:
            raise ValueError("dropout: either rng or an explicit mask is required")
        mask = rng.random(x.shape, dtype=np.float32) >= rate
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    attrs["mask_used"] = mask  # realized mask, kept on the tape node for replay
    # inverted scaling: expectation matches eval mode, which applies no-op
    keep = mask.astype(DTYPE) / DTYPE(1.0 - rate)

    def bw(g):
        return (g * keep,)

    return x.data * keep, bw


def _op_layer_norm(inputs, attrs):
    x, gain, shift = _arity(inputs, 3, "layer_norm")
    eps = float(attrs.get("eps", 1e-5))
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/shift must have shape ({d},), got {gain.shape} and {shift.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    normed = centered * inv
    lead = tuple(range(xd.ndim - 1))
    nx, ng, ns = x.requires_grad, gain.requires_grad, shift.requires_grad

    def bw(g):
        gx = None
        if nx:
            dn = g * gain.data
            gx = inv * (dn - dn.mean(axis=-1, keepdims=True)
                        - normed * (dn * normed).mean(axis=-1, keepdims=True))
        ggain = (g * normed).sum(axis=lead) if ng else None
        gshift = g.sum(axis=lead) if ns else None
        return gx, ggain, gshift

    return normed * gain.data + shift.data, bw


def _op_slice(inputs, attrs):
    (x,) = _arity(inputs, 1, "slice")
    axis, start, stop = int(attrs["axis"]), int(attrs["start"]), int(attrs["stop"])
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"slice: axis {axis} out of range for shape {x.shape}")
    axis %= ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {x.shape} axis {axis}")
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(ndim))
    xshape = x.shape

    def bw(g):
        gx = np.zeros(xshape, dtype=DTYPE)
        gx[index] = g
        return (gx,)

    return x.data[index].copy(), bw


def _op_transpose(inputs, attrs):
    (x,) = _arity(inputs, 1, "transpose")
    axes = attrs.get("axes")
    if axes is not None:
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(x.data.ndim)):
            raise ShapeError(f"transpose: axes {axes} is not a permutation for shape {x.shape}")
        inverse = tuple(np.argsort(axes))
    else:
        inverse = None

    def bw(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return np.ascontiguousarray(np.transpose(x.data, axes)), bw


def _op_sum(inputs, attrs):
    (x,) = _arity(inputs, 1, "sum")
    shape = x.shape

    def bw(g):
        return (np.full(shape, g, dtype=DTYPE),)

    return np.asarray(x.data.sum(dtype=DTYPE)), bw


def _op_mean(inputs, attrs):
    (x,) = _arity(inputs, 1, "mean")
    shape = x.shape
    inv_n = DTYPE(1.0 / x.size)

    def bw(g):
        return (np.full(shape, g * inv_n, dtype=DTYPE),)

    return np.asarray(x.data.mean(dtype=DTYPE)), bw


def _arity(inputs, n, kind):
    if len(inputs) != n:
        raise ShapeError(f"{kind}: expects {n} input(s), got {len(inputs)}")
    return inputs


_OP_TABLE = {
    "matmul": _op_matmul,
    "add": _op_add,
    "mul": _op_mul,
    "scale": _op_scale,
    "concat": _op_concat,
    "sigmoid": _op_sigmoid,
    "tanh": _op_tanh,
    "relu": _op_relu,
    "softmax": _op_softmax,
    "log_softmax": _op_log_softmax,
    "dropout": _op_dropout,
    "layer_norm": _op_layer_norm,
    "slice": _op_slice,
    "transpose": _op_transpose,
    "sum": _op_sum,
    "mean": _op_mean,
}
