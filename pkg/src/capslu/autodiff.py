"""Dense tensors with tape-style reverse-mode differentiation.

Every forward op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``Tensor.backward``
walks the recorded graph once in reverse topological order.

Only the operations the SLU models need are provided. Broadcasting follows
numpy for ``add``/``mul``/``matmul``; gradients are reduced back to the
parent shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Raise ``FloatingPointError`` whenever an op produces NaN or Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # operator sugar
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A learnable leaf tensor; ``grad`` always exists and has the value's shape."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(np.array(value, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), bw)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        return (g * pos,)

    return _result(y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return _result(y, (x,), bw)


def log(x: Tensor) -> Tensor:
    y = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _result(y, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside ``[lo, hi]``."""
    inside = (x.data >= lo) & (x.data <= hi)
    y = np.clip(x.data, lo, hi)

    def bw(g):
        return (g * inside,)

    return _result(y, (x,), bw)


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``mask`` is true, constant ``fill`` elsewhere."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    y = np.where(mask, x.data, fill).astype(x.dtype, copy=False)

    def bw(g):
        return (g * mask,)

    return _result(y, (x,), bw)


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, bw)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(out, (x,), bw)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    out = np.expand_dims(x.data, axis)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def max_(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def bw(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        scale = np.where(nk > 0, np.expand_dims(g, axis) / safe, 0.0)
        return (scale * x.data,)

    return _result(n, (x,), bw)


def scalar_product(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return sum_(mul(a, b), axis=axis)


def squash(x: Tensor, axis: int = -1) -> Tensor:
    """Capsule nonlinearity: ``|x|^2/(1+|x|^2) * x/|x|``, with ``squash(0) = 0``.

    Evaluated as ``x * n/(1+n^2)``, which is the same map without the 0/0 at
    the origin. The Jacobian there is the zero matrix (the map is quadratic
    near 0), so no epsilon is needed.
    """
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    n2 = n * n
    scale = n / (1.0 + n2)
    y = x.data * scale

    def bw(g):
        # d/dx [x f(n)] = f(n) I + f'(n) x x^T / n,  f'(n) = (1-n^2)/(1+n^2)^2
        fprime = (1.0 - n2) / (1.0 + n2) ** 2
        safe = np.where(n > 0, n, 1.0)
        proj = np.where(n > 0, np.sum(g * x.data, axis=axis, keepdims=True) / safe, 0.0)
        return (g * scale + fprime * proj * x.data,)

    return _result(y, (x,), bw)


# ---------------------------------------------------------------- sequence ops

def subsample_time(x: Tensor, stride: int = 2, axis: int = -2) -> Tensor:
    """Keep frames 0, stride, 2*stride, ... along the time axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(0, None, stride)
    return getitem(x, tuple(idx))


def _gru_scan(xp: np.ndarray, U: np.ndarray, m: np.ndarray):
    """Run K independent GRU recurrences in lockstep.

    ``xp`` (K, B, T, 3n) holds input projections plus bias, already in
    processing order; ``U`` is (K, n, 3n); ``m`` (K, B, T) is the frame mask.
    """
    K, B, T, n3 = xp.shape
    n = n3 // 3
    dt = xp.dtype
    U_zr, U_h = U[:, :, :2 * n], U[:, :, 2 * n:]
    hs = np.empty((K, B, T, n), dtype=dt)       # state entering step t
    zr_all = np.empty((K, B, T, 2 * n), dtype=dt)
    cs = np.empty((K, B, T, n), dtype=dt)
    out = np.empty((K, B, T, n), dtype=dt)
    h = np.zeros((K, B, n), dtype=dt)
    for t in range(T):
        a = xp[:, :, t]
        zr = np.matmul(h, U_zr)
        zr += a[..., :2 * n]
        zr *= 0.5
        np.tanh(zr, out=zr)
        zr += 1.0
        zr *= 0.5
        z, r = zr[..., :n], zr[..., n:]
        c = np.matmul(r * h, U_h)
        c += a[..., 2 * n:]
        np.tanh(c, out=c)
        hs[:, :, t] = h
        zr_all[:, :, t] = zr
        cs[:, :, t] = c
        step = z * (c - h)
        step *= m[:, :, t, None]
        out[:, :, t] = step
        out[:, :, t] += m[:, :, t, None] * h
        h = h + step
    return out, (hs, zr_all, cs)


def _gru_scan_backward(g: np.ndarray, cache, U: np.ndarray, m: np.ndarray):
    hs, zr_all, cs = cache
    K, B, T, n = hs.shape
    U_zrT = np.swapaxes(U[:, :, :2 * n], 1, 2)
    U_hT = np.swapaxes(U[:, :, 2 * n:], 1, 2)
    dxp = np.empty((K, B, T, 3 * n), dtype=hs.dtype)
    dh = np.zeros((K, B, n), dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        mt = m[:, :, t, None]
        hp, c = hs[:, :, t], cs[:, :, t]
        z, r = zr_all[:, :, t, :n], zr_all[:, :, t, n:]
        dtot = dh + mt * g[:, :, t]
        dhn = mt * dtot                     # padded steps: state passes straight through
        dh = dtot - dhn * z
        dc = dhn * z * (1.0 - c * c)
        drh = np.matmul(dc, U_hT)
        dz = dhn * (c - hp) * z * (1.0 - z)
        dr = drh * hp * r * (1.0 - r)
        dh += drh * r
        dxp[:, :, t, :n] = dz
        dxp[:, :, t, n:2 * n] = dr
        dxp[:, :, t, 2 * n:] = dc
        dh += np.matmul(dxp[:, :, t, :2 * n], U_zrT)
    hflat = hs.reshape(K, B * T, n)
    rh = (zr_all[..., n:] * hs).reshape(K, B * T, n)
    flat = dxp.reshape(K, B * T, 3 * n)
    dU = np.concatenate([np.matmul(np.swapaxes(hflat, 1, 2), flat[:, :, :2 * n]),
                         np.matmul(np.swapaxes(rh, 1, 2), flat[:, :, 2 * n:])], axis=2)
    return dxp, dU


def _check_gru(D: int, W: Tensor, U: Tensor, b: Tensor) -> None:
    n = U.shape[0]
    if W.shape != (D, 3 * n) or U.shape != (n, 3 * n) or b.shape != (3 * n,):
        raise ValueError(f"GRU parameter shapes {W.shape}, {U.shape}, {b.shape} "
                         f"do not fit input width {D}")


def _multi_gru(x: Tensor, weights: Sequence[tuple[Tensor, Tensor, Tensor]],
               reverse: Sequence[bool], mask) -> Tensor:
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ValueError(f"GRU input must be (time, features) or (batch, time, features), got {x.shape}")
    B, T, D = xd.shape
    for W, U, b in weights:
        _check_gru(D, W, U, b)
    dt = xd.dtype
    m = np.ones((B, T), dtype=dt) if mask is None else np.asarray(mask, dtype=dt).reshape(B, T)
    flat_x = xd.reshape(B * T, D)
    xp = np.stack([(flat_x @ W.data + b.data).reshape(B, T, -1) for W, U, b in weights])
    Us = np.stack([U.data for _, U, _ in weights])
    ms = np.stack([m] * len(weights))
    for k, rev in enumerate(reverse):
        if rev:
            xp[k] = xp[k][:, ::-1]
            ms[k] = ms[k][:, ::-1]
    out, cache = _gru_scan(xp, Us, ms)
    for k, rev in enumerate(reverse):
        if rev:
            out[k] = out[k][:, ::-1]
    res = np.concatenate(list(out), axis=-1)
    res = res[0] if squeeze else res

    def bw(g):
        g = g[None] if squeeze else g
        n = Us.shape[1]
        gs = np.stack([g[..., k * n:(k + 1) * n] for k in range(len(weights))])
        for k, rev in enumerate(reverse):
            if rev:
                gs[k] = gs[k][:, ::-1]
        dxp, dU = _gru_scan_backward(gs, cache, Us, ms)
        grads = []
        gx = np.zeros((B * T, D), dtype=dt) if x.requires_grad else None
        for k, ((W, U, b), rev) in enumerate(zip(weights, reverse)):
            d = dxp[k][:, ::-1] if rev else dxp[k]
            d = d.reshape(B * T, -1)
            if gx is not None:
                gx += d @ W.data.T
            grads += [flat_x.T @ d if W.requires_grad else None,
                      dU[k] if U.requires_grad else None,
                      d.sum(axis=0) if b.requires_grad else None]
        if gx is not None:
            gx = gx.reshape(B, T, D)
            gx = gx[0] if squeeze else gx
        return (gx, *grads)

    parents = [x] + [p for trio in weights for p in trio]
    return _result(res, parents, bw)


def gru_layer(x: Tensor, W: Tensor, U: Tensor, b: Tensor, mask: np.ndarray | None = None,
              reverse: bool = False) -> Tensor:
    """One GRU direction over a (batch, time, features) or (time, features) sequence.

    Gate columns of ``W`` (D x 3U), ``U`` (U x 3U) and ``b`` (3U) are ordered
    update, reset, candidate; the reset gate multiplies the previous state
    before the candidate's recurrent product. ``mask`` (batch, time) marks
    valid frames: on padded frames the state is carried unchanged and the
    output is zero, so a padded utterance gets exactly the states of the
    unpadded one in either direction.

    The recurrence is a single tape node with a hand-written
    backpropagation-through-time rule.
    """
    return _multi_gru(x, [(W, U, b)], [reverse], mask)


def bigru_layer(x: Tensor, fwd: tuple[Tensor, Tensor, Tensor], bwd: tuple[Tensor, Tensor, Tensor],
                mask: np.ndarray | None = None) -> Tensor:
    """Both directions in lockstep; output is ``concat([forward, backward], -1)``.

    Numerically identical to two :func:`gru_layer` calls, roughly half the
    loop overhead.
    """
    return _multi_gru(x, [fwd, bwd], [False, True], mask)


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
