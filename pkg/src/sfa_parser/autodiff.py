"""Minimal reverse-mode differentiation over numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  Outside of a
tape nothing is recorded, which doubles as inference mode::

    with Tape() as tape:
        loss = model.loss(example)
        tape.backward(loss)

Leaf tensors created with ``requires_grad=True`` accumulate gradients across
backward passes until :meth:`Tensor.zero_grad` is called.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "ewmul",
    "affine",
    "concat",
    "stack",
    "sigmoid",
    "tanh",
    "exp",
    "log_sigmoid",
    "softmax_over_positions",
    "max_over_heads",
    "window_mean",
    "dropout",
    "cross_entropy",
    "binary_cross_entropy",
    "einsum",
    "outer",
    "lstm",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Nodes are appended as operations run, so the record is already in
    topological order; backward walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, node: "Tensor") -> None:
        node._node_id = len(self.nodes)
        node._tape = self
        self.nodes.append(node)

    def backward(self, root: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if root.data.size != 1:
                raise ValueError(f"backward needs an explicit grad for shape {root.shape}")
            grad = np.ones_like(root.data)
        if root._tape is not self:
            # root is a leaf or was recorded elsewhere: nothing to propagate
            if root.requires_grad:
                root._accumulate(grad)
            return
        root._accumulate(grad)
        for node in reversed(self.nodes[: root._node_id + 1]):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            # free intermediate buffers; leaves are never recorded
            node.grad = None
            node._backward = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, np.generic):
            data = np.asarray(data)  # keep the scalar's precision
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._tape: Optional[Tape] = None
        self._node_id = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        tape = self._tape
        if tape is None:
            raise RuntimeError("tensor was not recorded on a tape")
        tape.backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)

    def sum(self, axis=None) -> "Tensor":
        return _sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return mul(_sum(self, axis), 1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return _transpose(self, axes or None)


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _send(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


# ---------------------------------------------------------------- arithmetic


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


ewmul = mul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (..., in)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def _sum(x: Tensor, axis) -> Tensor:
    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def _reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def _transpose(x: Tensor, axes) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(x.data, axes), (x,), backward)


def _index(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            x._accumulate(full)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _send(t, part)

    return _make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from None

    def backward(g):
        for i, t in enumerate(tensors):
            _send(t, np.take(g, i, axis=axis))

    return _make(out, tensors, backward)


# ------------------------------------------------------------- nonlinearities


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        x._accumulate(g * y)

    return _make(y, (x,), backward)


def log_sigmoid(x: Tensor) -> Tensor:
    z = x.data
    y = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        x._accumulate(g * _sigmoid(-z))

    return _make(y, (x,), backward)


# ------------------------------------------------------------ attention stages


def softmax_over_positions(e: Tensor, axis: int = 0) -> Tensor:
    """Softmax along the sequence axis; each head column sums to one."""
    z = e.data - e.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=axis, keepdims=True)

    def backward(g):
        e._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (e,), backward)


def max_over_heads(a: Tensor, axis: int = -1) -> Tensor:
    """Max-pool across attention heads.

    Gradient flows to the first (lowest index) maximal entry only.
    """
    if a.shape[axis] < 1:
        raise DimensionError(f"max_over_heads: empty head axis in shape {a.shape}")
    idx = np.argmax(a.data, axis=axis)
    y = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a._accumulate(full)

    return _make(y, (a,), backward)


def window_mean(a: Tensor, t: int, axis: int = 0) -> Tensor:
    """Forward-looking mean over ``t`` positions: ``out[j] = sum(a[j:j+t]) / t``.

    Positions past the end count as zero; the divisor is always ``t``.
    """
    if int(t) != t or t < 1:
        raise ValueError(f"window size must be a positive integer, got {t!r}")
    t = int(t)
    x = np.moveaxis(a.data, axis, -1)
    n = x.shape[-1]
    y = x.copy()
    for k in range(1, min(t, n)):
        y[..., : n - k] += x[..., k:]
    y = np.moveaxis(y / t, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        # input k receives from outputs j with j <= k < j + t
        gx = gm.copy()
        for k in range(1, min(t, n)):
            gx[..., k:] += gm[..., : n - k]
        a._accumulate(np.moveaxis(gx / t, -1, axis))

    return _make(y, (a,), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), backward)


# --------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean categorical cross-entropy of ``logits`` (..., c) against class indices."""
    target = np.asarray(target, dtype=np.int64)
    z = logits.data
    if z.shape[:-1] != target.shape:
        raise DimensionError(f"cross_entropy: logits {z.shape} vs targets {target.shape}")
    count = max(target.size, 1)
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    picked = np.take_along_axis(logp, target[..., None], axis=-1)
    loss = -picked.sum() / count

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None], np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        logits._accumulate(g * p / count)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def binary_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean per-cell binary cross-entropy of ``logits`` against 0/1 targets."""
    y = np.asarray(target, dtype=logits.dtype)
    z = logits.data
    if z.shape != y.shape:
        raise DimensionError(f"binary_cross_entropy: logits {z.shape} vs targets {y.shape}")
    count = max(z.size, 1)
    # log(1 + exp(-|z|)) form is stable for both signs
    per_cell = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = per_cell.sum() / count

    def backward(g):
        logits._accumulate(g * (_sigmoid(z) - y) / count)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# -------------------------------------------------------------------- einsum


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum, e.g. ``einsum("ik,ijk->ij", q, v)``.

    Each operand's subscripts must be distinct letters.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise DimensionError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    sizes: dict[str, int] = {}
    for sub_, op in zip(in_subs, operands):
        if len(sub_) != op.ndim or len(set(sub_)) != len(sub_):
            raise DimensionError(f"einsum: subscripts {sub_!r} invalid for shape {op.shape}")
        for letter, dim in zip(sub_, op.shape):
            if sizes.setdefault(letter, dim) != dim:
                shapes = [o.shape for o in operands]
                raise DimensionError(f"einsum {subscripts!r}: size mismatch on {letter!r} for shapes {shapes}")
    out = np.einsum(subscripts, *[o.data for o in operands], optimize=True)

    def backward(g):
        for i, (sub_, op) in enumerate(zip(in_subs, operands)):
            if not op.requires_grad:
                continue
            others = [(s, o.data) for j, (s, o) in enumerate(zip(in_subs, operands)) if j != i]
            present = set(out_sub).union(*[set(s) for s, _ in others])
            kept = "".join(ch for ch in sub_ if ch in present)
            spec = ",".join([out_sub] + [s for s, _ in others]) + "->" + kept
            part = np.einsum(spec, g, *[d for _, d in others], optimize=True)
            if kept != sub_:
                # letters summed only inside this operand: broadcast back
                expand = [ch for ch in sub_]
                shape = [sizes[ch] if ch in kept else 1 for ch in expand]
                part = np.broadcast_to(part.reshape(shape), op.shape)
            op._accumulate(part)

    return _make(out, operands, backward)


def outer(u: Tensor, v: Tensor) -> Tensor:
    return einsum("i,j->ij", u, v)


# ---------------------------------------------------------------------- LSTM


def lstm(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    mask: Optional[np.ndarray] = None,
    reverse: bool = False,
) -> Tensor:
    """Run one LSTM direction over a padded batch.

    ``x`` is (batch, time, in); weights are (in, 4h) and (h, 4h) with gate
    order input, forget, cell, output.  Where ``mask`` is 0 the state is
    carried over unchanged, so for ``reverse=True`` with right padding each
    sequence starts from the zero state at its own last token.  Returns
    hidden states of shape (batch, time, h).
    """
    if x.ndim != 3:
        raise DimensionError(f"lstm: expected (batch, time, in) input, got {x.shape}")
    batch, steps, _ = x.shape
    hidden = w_hh.shape[0]
    if w_ih.shape != (x.shape[2], 4 * hidden) or w_hh.shape != (hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise DimensionError(f"lstm: weights {w_ih.shape}, {w_hh.shape}, {bias.shape} do not fit input {x.shape}")
    dt = x.dtype
    m = np.ones((batch, steps), dtype=dt) if mask is None else np.asarray(mask, dtype=dt)
    order = range(steps - 1, -1, -1) if reverse else range(steps)

    z_in = x.data @ w_ih.data + bias.data
    whh = w_hh.data
    h = np.zeros((batch, hidden), dtype=dt)
    c = np.zeros((batch, hidden), dtype=dt)
    out = np.empty((batch, steps, hidden), dtype=dt)
    cache = []
    for t in order:
        z = z_in[:, t] + h @ whh
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden : 2 * hidden])
        gc = np.tanh(z[:, 2 * hidden : 3 * hidden])
        o = _sigmoid(z[:, 3 * hidden :])
        c_new = f * c + i * gc
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t, None]
        cache.append((t, h, c, i, f, gc, o, tc, mt))
        c = mt * c_new + (1.0 - mt) * c
        h = mt * h_new + (1.0 - mt) * h
        out[:, t] = h

    def backward(g):
        dz_all = np.zeros((batch, steps, 4 * hidden), dtype=dt)
        h_prev_all = np.zeros((batch, steps, hidden), dtype=dt)
        dh = np.zeros((batch, hidden), dtype=dt)
        dc = np.zeros((batch, hidden), dtype=dt)
        for t, h_prev, c_prev, i, f, gc, o, tc, mt in reversed(cache):
            dh = dh + g[:, t]
            dh_new = mt * dh
            dc_new = mt * dc + dh_new * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [
                    dc_new * gc * i * (1.0 - i),
                    dc_new * c_prev * f * (1.0 - f),
                    dc_new * i * (1.0 - gc * gc),
                    dh_new * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            dz_all[:, t] = dz
            h_prev_all[:, t] = h_prev
            dh = (1.0 - mt) * dh + dz @ whh.T
            dc = (1.0 - mt) * dc + dc_new * f
        flat = dz_all.reshape(-1, 4 * hidden)
        if x.requires_grad:
            x._accumulate(dz_all @ w_ih.data.T)
        if w_ih.requires_grad:
            w_ih._accumulate(x.data.reshape(-1, x.shape[2]).T @ flat)
        if w_hh.requires_grad:
            w_hh._accumulate(h_prev_all.reshape(-1, hidden).T @ flat)
        if bias.requires_grad:
            bias._accumulate(flat.sum(axis=0))

    return _make(out, (x, w_ih, w_hh, bias), backward)
