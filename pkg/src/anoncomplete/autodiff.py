"""Reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded as backward
closures; ``Tape.backward`` replays them in exact reverse order. Outside a tape
the same functions just compute values, which is what inference and
finite-difference checks use.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

CHECK_FINITE = True

_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self):
        self.records: list[Callable[[], None]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, fn: Callable[[], None]) -> None:
        self.records.append(fn)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(loss.data)
        loss.grad = grad
        for fn in reversed(self.records):
            fn()
        self.records = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def check_finite(data: np.ndarray, what: str) -> None:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


def _make(data: np.ndarray, inputs: Sequence[Tensor], vjp, what: str) -> Tensor:
    check_finite(data, what)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        def backprop():
            g = out.grad
            if g is None:
                return
            for t, gi in zip(inputs, vjp(g)):
                if gi is not None and t.requires_grad:
                    accumulate(t, gi)

        tape.record(backprop)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (np.where(pick_a, g, 0), np.where(pick_a, 0, g)), "minimum")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                            _unbroadcast(np.where(mask, 0, g), b.shape)), "where")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = -np.logaddexp(0, -x)
    return _make(y, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), vjp, "log_softmax")


# ----------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None) -> Tensor:
    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), vjp, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape),), "mean")


# ----------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, vjp, "linear")


def bmv(m: Tensor, x: Tensor) -> Tensor:
    """Batched matrix-vector product: (B, n, d) x (B, d) -> (B, n)."""
    if m.data.ndim != 3 or x.data.ndim != 2 or m.shape[0] != x.shape[0] or m.shape[2] != x.shape[1]:
        raise ShapeError(f"bmv shape mismatch {m.shape} x {x.shape}")
    out = np.einsum("bnd,bd->bn", m.data, x.data)

    def vjp(g):
        return g[:, :, None] * x.data[:, None, :], np.einsum("bn,bnd->bd", g, m.data)

    return _make(out, (m, x), vjp, "bmv")


def weighted_sum(w: Tensor, m: Tensor) -> Tensor:
    """(B, n) weights applied to (B, n, d) rows -> (B, d)."""
    if w.data.ndim != 2 or m.data.ndim != 3 or w.shape != m.shape[:2]:
        raise ShapeError(f"weighted_sum shape mismatch {w.shape}, {m.shape}")
    out = np.einsum("bn,bnd->bd", w.data, m.data)

    def vjp(g):
        return np.einsum("bd,bnd->bn", g, m.data), w.data[:, :, None] * g[:, None, :]

    return _make(out, (w, m), vjp, "weighted_sum")


# ----------------------------------------------------------------- structure

def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(ts)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def stack(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = list(ts)

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _make(np.stack([t.data for t in ts], axis=axis), ts, vjp, "stack")


def slice_(a: Tensor, key) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key]), (a,), vjp, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a vector ``n`` times as rows of a matrix."""
    return _make(np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,),
                 lambda g: (g.sum(axis=0),), "broadcast_rows")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; backward scatters into looked-up rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), vjp, "embedding")


def pick(a: Tensor, idx) -> Tensor:
    """Select one entry per row: (B, n) with (B,) indices -> (B,)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _make(a.data[rows, idx], (a,), vjp, "pick")


def gather_steps(steps: Sequence[Tensor], idx, fallback: np.ndarray) -> Tensor:
    """Row ``b`` comes from ``steps[idx[b]]`` (or ``fallback[b]`` when ``idx[b] < 0``).

    Used to fetch per-item hidden states from different time steps.
    """
    idx = np.asarray(idx, dtype=np.int64)
    out = np.array(fallback, copy=True)
    used = sorted(set(int(i) for i in idx if i >= 0))
    for j in used:
        rows = idx == j
        out[rows] = steps[j].data[rows]
    inputs = [steps[j] for j in used]

    def vjp(g):
        return [np.where((idx == j)[:, None], g, 0) for j in used]

    return _make(out, inputs, vjp, "gather_steps")


# ----------------------------------------------------------------- recurrent cell

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, candidate, output).

    ``w`` has shape (in + hidden, 4 * hidden) and acts on ``concat(x, h)``.
    """
    hid = h.shape[-1]
    if w.shape != (x.shape[-1] + hid, 4 * hid) or b.shape != (4 * hid,):
        raise ShapeError(f"lstm params {w.shape}/{b.shape} do not fit input {x.shape}, state {h.shape}")
    xh = np.concatenate([x.data, h.data], axis=-1)
    z = xh @ w.data + b.data
    i = _sigmoid(z[..., :hid])
    f = _sigmoid(z[..., hid:2 * hid])
    gg = np.tanh(z[..., 2 * hid:3 * hid])
    o = _sigmoid(z[..., 3 * hid:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    check_finite(h_new, "lstm_cell")

    tape = active_tape()
    inputs = (x, h, c, w, b)
    needs = tape is not None and any(t.requires_grad for t in inputs)
    h_out = Tensor(h_new, requires_grad=needs)
    c_out = Tensor(c_new, requires_grad=needs)
    if needs:
        def backprop():
            gh, gc = h_out.grad, c_out.grad
            if gh is None and gc is None:
                return
            gh = np.zeros_like(h_new) if gh is None else gh
            gc_total = (np.zeros_like(c_new) if gc is None else gc) + gh * o * (1 - tc * tc)
            dz = np.concatenate([
                gc_total * gg * i * (1 - i),
                gc_total * c.data * f * (1 - f),
                gc_total * i * (1 - gg * gg),
                gh * tc * o * (1 - o),
            ], axis=-1)
            dxh = dz @ w.data.T
            grads = (
                dxh[..., :x.shape[-1]],
                dxh[..., x.shape[-1]:],
                gc_total * f,
                xh.reshape(-1, xh.shape[-1]).T @ dz.reshape(-1, dz.shape[-1]),
                dz.reshape(-1, dz.shape[-1]).sum(axis=0),
            )
            for t, gi in zip(inputs, grads):
                if t.requires_grad:
                    accumulate(t, gi)

        tape.record(backprop)
    return h_out, c_out


# ----------------------------------------------------------------- gradient check

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = 200, seed: int = 0, floor: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` must rebuild its computation from the current ``params`` data on each
    call. Tensors larger than ``max_coords`` are checked on a random subsample.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            up = float(f().data)
            flat[k] = orig - eps
            down = float(f().data)
            flat[k] = orig
            num = (up - down) / (2 * eps)
            ana = float(a.reshape(-1)[k])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
