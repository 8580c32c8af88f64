"""A small reverse-mode differentiation engine over float64 numpy arrays.

Values live on a :class:`Tape`. Every op appends a node whose inputs are
earlier nodes, so a reverse walk over the node list is a valid topological
order for backpropagation.

Op inventory: matmul, bmm, add, mul, concat, sigmoid, tanh, softmax, log,
glu, gather_row, take, sum, scale, reshape. ``add`` and ``mul`` follow numpy
broadcasting; gradients are summed back to the input shape.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFinite, ShapeMismatch

LOG_FLOOR = 1e-12


class Tensor:
    """Immutable value recorded on a tape."""

    __slots__ = ("tape", "id", "data")

    def __init__(self, tape: "Tape", node_id: int, data: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x):
    # tanh form is overflow-free
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# Each op: forward(values, attrs) -> (out, saved); backward(g, values, out, saved, attrs) -> grads


def _matmul_fwd(vals, attrs):
    a, b = vals
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_bwd(g, vals, out, saved, attrs):
    a, b = vals
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
    return ga, gb


def _bmm_fwd(vals, attrs):
    a, b = vals
    if attrs.get("transpose_b"):
        b = np.swapaxes(b, -1, -2)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"bmm {vals[0].shape} @ {vals[1].shape}")
    return np.matmul(a, b), None


def _bmm_bwd(g, vals, out, saved, attrs):
    a, b = vals
    if attrs.get("transpose_b"):
        # out = a @ b^T
        return np.matmul(g, b), np.matmul(np.swapaxes(g, -1, -2), a)
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


def _add_fwd(vals, attrs):
    try:
        return vals[0] + vals[1], None
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def _add_bwd(g, vals, out, saved, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _mul_fwd(vals, attrs):
    try:
        return vals[0] * vals[1], None
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def _mul_bwd(g, vals, out, saved, attrs):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _concat_fwd(vals, attrs):
    try:
        return np.concatenate(vals, axis=attrs.get("axis", -1)), None
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def _concat_bwd(g, vals, out, saved, attrs):
    axis = attrs.get("axis", -1)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return np.split(g, cuts, axis=axis)


def _sigmoid_fwd(vals, attrs):
    return _sigmoid(vals[0]), None


def _sigmoid_bwd(g, vals, out, saved, attrs):
    return (g * out * (1.0 - out),)


def _tanh_fwd(vals, attrs):
    return np.tanh(vals[0]), None


def _tanh_bwd(g, vals, out, saved, attrs):
    return (g * (1.0 - out * out),)


def _softmax_fwd(vals, attrs):
    x = vals[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, vals, out, saved, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_fwd(vals, attrs):
    x = vals[0]
    floored = np.maximum(x, LOG_FLOOR)
    return np.log(floored), floored


def _log_bwd(g, vals, out, floored, attrs):
    return (np.where(vals[0] > LOG_FLOOR, g / floored, 0.0),)


def _glu_fwd(vals, attrs):
    x = vals[0]
    if x.shape[-1] % 2:
        raise ShapeMismatch(f"glu needs an even last axis, got {x.shape}")
    half = x.shape[-1] // 2
    gate = _sigmoid(x[..., half:])
    return x[..., :half] * gate, gate


def _glu_bwd(g, vals, out, gate, attrs):
    x = vals[0]
    half = x.shape[-1] // 2
    lin = x[..., :half]
    return (np.concatenate([g * gate, g * lin * gate * (1.0 - gate)], axis=-1),)


def _gather_row_fwd(vals, attrs):
    table, idx = vals[0], attrs["idx"]
    if table.ndim != 2:
        raise ShapeMismatch(f"gather_row needs a matrix, got {table.shape}")
    return table[idx], None


def _gather_row_bwd(g, vals, out, saved, attrs):
    gt = np.zeros_like(vals[0])
    np.add.at(gt, attrs["idx"], g)
    return (gt,)


def _take_fwd(vals, attrs):
    return np.take(vals[0], attrs["index"], axis=attrs["axis"]), None


def _take_bwd(g, vals, out, saved, attrs):
    gx = np.zeros_like(vals[0])
    where = [slice(None)] * gx.ndim
    where[attrs["axis"]] = attrs["index"]
    gx[tuple(where)] = g
    return (gx,)


def _sum_fwd(vals, attrs):
    return np.asarray(vals[0].sum(axis=attrs.get("axis"))), None


def _sum_bwd(g, vals, out, saved, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _scale_fwd(vals, attrs):
    return vals[0] * attrs["c"], None


def _scale_bwd(g, vals, out, saved, attrs):
    return (g * attrs["c"],)


def _reshape_fwd(vals, attrs):
    try:
        return vals[0].reshape(attrs["shape"]), None
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def _reshape_bwd(g, vals, out, saved, attrs):
    return (g.reshape(vals[0].shape),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "bmm": (_bmm_fwd, _bmm_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "log": (_log_fwd, _log_bwd),
    "glu": (_glu_fwd, _glu_bwd),
    "gather_row": (_gather_row_fwd, _gather_row_bwd),
    "take": (_take_fwd, _take_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
}


def _frozen(array) -> np.ndarray:
    arr = np.array(array, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Tape:
    """Append-only record of a computation.

    With ``record=False`` the tape only evaluates values (inference mode) and
    :meth:`backward` is unavailable.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[tuple] = []  # (op, input ids, saved, attrs); None for leaves
        self._values: list[np.ndarray] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self._values)

    def _push(self, data, node) -> Tensor:
        node_id = len(self._values)
        if self.record:
            self._values.append(data)
            self._nodes.append(node)
        else:
            # values of earlier nodes are never needed again in inference mode
            self._values.append(None)
        return Tensor(self, node_id, data)

    def const(self, array) -> Tensor:
        return self._push(_frozen(array), None)

    def param(self, name: str, array) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = self.const(array)
        self.params[name] = t.id
        return t

    def forward(self, op: str, *inputs: Tensor, **attrs) -> Tensor:
        fwd, _ = OPS[op]
        for t in inputs:
            if t.tape is not self:
                raise ValueError("input tensor belongs to a different tape")
        vals = [t.data for t in inputs]
        with np.errstate(over="ignore", invalid="ignore"):
            out, saved = fwd(vals, attrs)
        out = np.asarray(out, dtype=np.float64)
        node_id = len(self._values)
        if not np.isfinite(out).all():
            raise NonFinite(f"{op} produced a non-finite value at node {node_id}", node_id)
        out.setflags(write=False)
        return self._push(out, (op, tuple(t.id for t in inputs), saved, attrs))

    # convenience wrappers
    def matmul(self, a, b):
        return self.forward("matmul", a, b)

    def bmm(self, a, b, transpose_b: bool = False):
        """Batched product over matching leading axes, optionally with ``b`` transposed."""
        return self.forward("bmm", a, b, transpose_b=transpose_b)

    def add(self, a, b):
        return self.forward("add", a, b)

    def mul(self, a, b):
        return self.forward("mul", a, b)

    def concat(self, *xs, axis=-1):
        return self.forward("concat", *xs, axis=axis)

    def sigmoid(self, x):
        return self.forward("sigmoid", x)

    def tanh(self, x):
        return self.forward("tanh", x)

    def softmax(self, x):
        return self.forward("softmax", x)

    def log(self, x):
        return self.forward("log", x)

    def glu(self, x):
        return self.forward("glu", x)

    def gather_row(self, table, idx):
        return self.forward("gather_row", table, idx=np.asarray(idx, dtype=np.int64))

    def take(self, x, index: int, axis: int):
        """One slice of ``x`` along ``axis`` (the axis is dropped)."""
        return self.forward("take", x, index=int(index), axis=int(axis))

    def sum(self, x, axis=None):
        return self.forward("sum", x, axis=axis)

    def scale(self, x, c: float):
        return self.forward("scale", x, c=float(c))

    def reshape(self, x, shape):
        return self.forward("reshape", x, shape=tuple(shape))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter."""
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if loss.tape is not self or loss.data.size != 1:
            raise ShapeMismatch("loss must be a scalar on this tape")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        owned: set[int] = set()  # gradient buffers safe to update in place
        for node_id in range(loss.id, -1, -1):
            node = self._nodes[node_id]
            if node is None or node_id not in grads:
                continue
            g = grads.pop(node_id)
            op, input_ids, saved, attrs = node
            if op == "take":
                self._take_into(grads, owned, node_id, input_ids[0], g, attrs)
                continue
            vals = [self._values[i] for i in input_ids]
            in_grads = OPS[op][1](g, vals, self._values[node_id], saved, attrs)
            for i, gi in zip(input_ids, in_grads):
                if not np.isfinite(gi).all():
                    raise NonFinite(f"non-finite gradient flowing out of node {node_id} ({op})", node_id)
                if i not in grads:
                    grads[i] = gi
                elif i in owned:
                    grads[i] += gi
                else:
                    grads[i] = grads[i] + gi
                    owned.add(i)
        return {
            name: grads.get(i, np.zeros_like(self._values[i]))
            for name, i in self.params.items()
        }


    def _take_into(self, grads, owned, node_id, src, g, attrs):
        # scatter straight into the source buffer instead of materialising a dense gradient
        if not np.isfinite(g).all():
            raise NonFinite(f"non-finite gradient flowing out of node {node_id} (take)", node_id)
        if src not in owned:
            buf = np.zeros_like(self._values[src])
            if src in grads:
                buf += grads[src]
            grads[src] = buf
            owned.add(src)
        where = [slice(None)] * g.ndim
        where.insert(attrs["axis"], attrs["index"])
        grads[src][tuple(where)] += g


def grad_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f(tape, param_tensors)`` must build a scalar loss. Up to ``max_coords``
    coordinates are sampled uniformly across all parameters. The relative
    error of one coordinate is ``|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values, record):
        tape = Tape(record=record)
        tensors = {k: tape.param(k, v) for k, v in values.items()}
        return tape, f(tape, tensors)

    tape, loss = evaluate(params, True)
    analytic = tape.backward(loss)

    coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for name, flat in coords:
        shifted = dict(params)
        arr = params[name].copy()
        base = arr.flat[flat]
        arr.flat[flat] = base + eps
        shifted[name] = arr
        up = evaluate(shifted, False)[1].item()
        arr = arr.copy()
        arr.flat[flat] = base - eps
        shifted[name] = arr
        down = evaluate(shifted, False)[1].item()
        fd = (up - down) / (2 * eps)
        ad = float(analytic[name].flat[flat])
        worst = max(worst, abs(ad - fd) / max(1.0, abs(ad) + abs(fd)))
    return worst
