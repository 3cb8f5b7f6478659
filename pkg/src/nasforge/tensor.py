"""Dense float64 tensors with a reverse-mode gradient tape.

Design notes:
  * float64 everywhere; desk-scale sizes make precision cheaper than
    chasing fp32 drift.
  * No implicit broadcasting in binary elementwise ops.  Padding and
    broadcasting are explicit ops (``fit_axis``, ``add_vec``) so that
    pad-then-combine semantics stay visible at call sites.
  * relu subgradient at 0 is defined as 0.
  * A Tape lives for one forward pass and is discarded after backward();
    there are no higher-order gradients.
  * Tensors are immutable after construction except for ``grad``; a tape
    is confined to a single worker.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible for an operation."""


class Tensor:
    """A dense float64 array that can participate in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops from one forward pass.

    Records are appended in execution order, which is topological by
    construction: every input of a record was produced (or was a leaf)
    before the record itself.  ``backward`` replays the records in
    reverse and visits every node exactly once.
    """

    def __init__(self):
        self._records = []          # (out, inputs, backward_fn)
        self._produced = set()      # id() of tensors created on this tape
        self._leaves = {}           # id() -> leaf tensor, insertion ordered

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def watch(self, t: Tensor):
        """Register a leaf so it receives a grad buffer even if unused."""
        if t.requires_grad and id(t) not in self._produced:
            self._leaves.setdefault(id(t), t)

    def _record(self, out: Tensor, inputs, backward_fn):
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._records.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._records)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate ``grad`` on every requires_grad leaf reachable on the tape.

    Gradients equal the analytic chain-rule composition; unused leaves get
    zero buffers.  Running twice on the same tape reproduces bit-identical
    results because the replay order and accumulation order are fixed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, backward_fn(g)):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
    out_grads = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
        out_grads[key] = leaf.grad
    return out_grads


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """a @ b with ``a`` 2-D or higher and ``b`` 2-D (applied on the last axis)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2:
        raise ShapeError(f"matmul expects (..xk) x (kxn), got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = None
        return ga, gb

    return _emit(out, (a, b), bw)


def batched_matmul(a, b) -> Tensor:
    """Per-batch matmul: [B,m,k] x [B,k,n] -> [B,m,n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"batched_matmul expects 3-D operands, got {a.shape} x {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"batched_matmul batch extents differ: {a.shape} x {b.shape}")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        ga = g @ np.swapaxes(b.data, 1, 2) if a.requires_grad else None
        gb = np.swapaxes(a.data, 1, 2) @ g if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bw)


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, -1, -2), a.requires_grad)
    return _emit(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)
    return _emit(out, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = Tensor(s, a.requires_grad)
    return _emit(out, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid_np(x):
    # split form avoids overflow in exp for large |x|
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    z[~pos] = e / (1.0 + e)
    return z


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires equal shapes, got {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)
    return _emit(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)
    return _emit(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)
    return _emit(out, (a, b), lambda g: (g * b.data, g * a.data))


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "sub": sub}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch form of the pointwise ops: relu/sigmoid unary, add/mul/sub binary."""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(a) if b is None else fn(a, b)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c, a.requires_grad)
    return _emit(out, (a,), lambda g: (g * c,))


def add_vec(a, v, axis: int) -> Tensor:
    """Explicitly broadcast-add a 1-D vector ``v`` along ``axis`` of ``a``."""
    a, v = as_tensor(a), as_tensor(v)
    if v.ndim != 1 or a.shape[axis] != v.shape[0]:
        raise ShapeError(f"add_vec needs v of extent {a.shape[axis]} on axis {axis}, got {v.shape}")
    ax = axis % a.ndim
    vshape = [1] * a.ndim
    vshape[ax] = v.shape[0]
    out = Tensor(a.data + v.data.reshape(vshape), a.requires_grad or v.requires_grad)
    sum_axes = tuple(i for i in range(a.ndim) if i != ax)

    def bw(g):
        gv = g.sum(axis=sum_axes) if v.requires_grad else None
        return (g if a.requires_grad else None), gv

    return _emit(out, (a, v), bw)


def concat(axis: int, parts) -> Tensor:
    """Concatenate along ``axis``; zero-extent parts permitted."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one part")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat non-axis extents differ: {parts[0].shape} vs {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 any(p.requires_grad for p in parts))
    sizes = [p.shape[axis] for p in parts]

    def bw(g):
        offs = np.cumsum([0] + sizes)
        grads = []
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return grads

    return _emit(out, tuple(parts), bw)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(idx)], a.requires_grad)

    def bw(g):
        z = np.zeros_like(a.data)
        z[tuple(idx)] = g
        return (z,)

    return _emit(out, (a,), bw)


def split_axis(a, axis: int, sizes):
    """Inverse of concat: split into consecutive chunks of the given sizes."""
    out, off = [], 0
    for s in sizes:
        out.append(slice_axis(a, axis, off, off + s))
        off += s
    return out


def fit_axis(a, axis: int, size: int) -> Tensor:
    """Pad with zeros or truncate along ``axis`` to the requested extent."""
    a = as_tensor(a)
    cur = a.shape[axis]
    if cur == size:
        return a
    if cur > size:
        return slice_axis(a, axis, 0, size)
    pad_shape = list(a.shape)
    pad_shape[axis] = size - cur
    return concat(axis, [a, constant(np.zeros(pad_shape))])


def mask_axis(a, axis: int, d: int) -> Tensor:
    """Zero out entries with index >= d along ``axis`` (dimension masking)."""
    a = as_tensor(a)
    extent = a.shape[axis]
    if not 0 <= d <= extent:
        raise ShapeError(f"mask width {d} outside [0, {extent}] on axis {axis}")
    mshape = [1] * a.ndim
    mshape[axis % a.ndim] = extent
    m = (np.arange(extent) < d).astype(np.float64).reshape(mshape)
    out = Tensor(a.data * m, a.requires_grad)
    return _emit(out, (a,), lambda g: (g * m,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), a.requires_grad)
    return _emit(out, (a,), lambda g: (np.full(a.shape, float(g)),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), a.requires_grad)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(out, (a,), bw)


def embedding_lookup(table, ids) -> Tensor:
    """Gather table rows: [V x dim] indexed by an integer matrix [B x F]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id outside [0, {v}): min={ids.min()}, max={ids.max()}")
    out = Tensor(table.data[ids], table.requires_grad)

    def bw(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (z,)

    return _emit(out, (table,), bw)


def gather_axis1(a, idx) -> Tensor:
    """Select middle-axis positions of a [B,N,d] tensor by constant indices."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[:, idx, :], a.requires_grad)

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (np.arange(a.shape[0])[:, None], idx[None, :]), g)
        return (z,)

    return _emit(out, (a,), bw)


def triu_flatten(a) -> Tensor:
    """Strict upper triangle of the trailing square, flattened: [B,n,n] -> [B,n(n-1)/2]."""
    a = as_tensor(a)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ShapeError(f"triu_flatten expects [B,n,n], got {a.shape}")
    n = a.shape[1]
    iu = np.triu_indices(n, k=1)
    out = Tensor(a.data[:, iu[0], iu[1]], a.requires_grad)

    def bw(g):
        z = np.zeros_like(a.data)
        z[:, iu[0], iu[1]] = g
        return (z,)

    return _emit(out, (a,), bw)


def layer_norm(a, gamma, beta, eps: float = 1e-5, active: int | None = None) -> Tensor:
    """Normalize over the last axis, then affine (gamma init 1, beta init 0).

    ``active`` restricts both the statistics and the output to the first
    ``active`` entries of the last axis; the remainder stays exactly zero.
    This is what keeps dimension-masked supernet evaluation equal to the
    extracted standalone model.
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    n = d if active is None else int(active)
    if not 1 <= n <= d:
        raise ShapeError(f"layer_norm active width {n} outside [1, {d}]")
    x = a.data[..., :n]
    mu = x.mean(axis=-1, keepdims=True)
    diff = x - mu
    var = (diff * diff).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv
    y = np.zeros_like(a.data)
    y[..., :n] = xhat * gamma.data[:n] + beta.data[:n]
    out = Tensor(y, a.requires_grad or gamma.requires_grad or beta.requires_grad)
    lead = tuple(range(a.ndim - 1))

    def bw(g):
        gn = g[..., :n]
        ga = None
        if a.requires_grad:
            q = gn * gamma.data[:n]
            mq = q.mean(axis=-1, keepdims=True)
            mqx = (q * xhat).mean(axis=-1, keepdims=True)
            dx = (q - mq - xhat * mqx) * inv
            ga = np.zeros_like(a.data)
            ga[..., :n] = dx
        gg = gb = None
        if gamma.requires_grad:
            gg = np.zeros_like(gamma.data)
            gg[:n] = (gn * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = np.zeros_like(beta.data)
            gb[:n] = gn.sum(axis=lead)
        return ga, gg, gb

    return _emit(out, (a, gamma, beta), bw)


def softmax_last(a, key_mask=None) -> Tensor:
    """Softmax over the last axis; positions where ``key_mask`` is False get
    exactly zero probability (used for inactive attention keys)."""
    a = as_tensor(a)
    x = a.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (x.shape[-1],):
            raise ShapeError(f"key_mask needs shape ({x.shape[-1]},), got {key_mask.shape}")
        if not key_mask.any():
            raise ShapeError("softmax needs at least one active key")
        x = np.where(key_mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    if key_mask is not None:
        e = np.where(key_mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, a.requires_grad)

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _emit(out, (a,), bw)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross entropy on raw logits (numerically stable)."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    z = logits.data
    if z.shape != y.shape:
        raise ShapeError(f"logits/labels shapes differ: {z.shape} vs {y.shape}")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(per.mean(), logits.requires_grad)

    def bw(g):
        return ((_sigmoid_np(z) - y) * (float(g) / z.size),)

    return _emit(out, (logits,), bw)


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    Error per entry is |analytic - numeric| / (|analytic| + 1e-8), maximized
    over the entries of ``x``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x, requires_grad=True)
    x.requires_grad = True
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued f")
    backward(y, tape)
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
