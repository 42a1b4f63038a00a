"""Tape-based reverse-mode differentiation over numpy arrays.

Every op accepts ``Var`` or plain arrays. An op records itself on the tape of
its first taped input; ops on untaped inputs return constant ``Var`` values
and record nothing, which is how frozen or inference evaluation avoids the
bookkeeping cost.

Array ops support leading batch dimensions: ``conv1d`` takes ``x[..., L, Cin]``
and ``dense`` takes ``x[..., n]``.
"""
from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operands violate an op's shape contract."""


class Var:
    __slots__ = ("value", "_tape", "parents", "vjp", "index", "name")

    def __init__(self, value, tape=None, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        # weak, so a dropped tape frees its graph without waiting for the cycle collector
        self._tape = None if tape is None else weakref.ref(tape)
        self.parents = parents
        self.vjp = vjp
        self.index = -1
        self.name = name

    @property
    def tape(self) -> Tape | None:
        return None if self._tape is None else self._tape()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, taped={self.tape is not None})"

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
        return neg(self)


class Tape:
    """Forward recording; ``backward`` replays it in exact reverse order."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), tape=self, name=name)
        v.index = len(self.nodes)
        self.nodes.append(v)
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = v
        return v

    def watch(self, params) -> dict[str, Var]:
        """Register every tensor of a ParamStore (or mapping) as a named leaf."""
        items = params.items() if hasattr(params, "items") else params
        return {name: self.leaf(arr, name) for name, arr in items}

    def record(self, value: np.ndarray, parents: tuple, vjp: Callable) -> Var:
        v = Var(value, tape=self, parents=parents, vjp=vjp)
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _taped(x) -> bool:
    return isinstance(x, Var) and x.tape is not None


def _emit(out: np.ndarray, parents: tuple, vjp: Callable) -> Var:
    for p in parents:
        if _taped(p):
            return p.tape.record(out, parents, vjp)
    return Var(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a gradient for every named leaf on the tape; leaves the loss does
    not depend on get zeros.
    """
    if not _taped(loss) or loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.vjp is None:
            leaf_grads[node.index] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not _taped(parent):
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    return {
        name: leaf_grads.get(v.index, np.zeros_like(v.value))
        for name, v in tape.leaves.items()
    }


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Var:
    av, bv = value(a), value(b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    av, bv = value(a), value(b)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def neg(a) -> Var:
    return _emit(-value(a), (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    """Elementwise product with numpy broadcasting."""
    av, bv = value(a), value(b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def hadamard(a, b) -> Var:
    """Strict elementwise product: operands must share a shape."""
    if value(a).shape != value(b).shape:
        raise ShapeError(f"hadamard shapes differ: {value(a).shape} vs {value(b).shape}")
    return mul(a, b)


def sigmoid(x) -> Var:
    out = expit(value(x))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Var:
    out = np.tanh(value(x))
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> Var:
    out = np.exp(value(x))
    return _emit(out, (x,), lambda g: (g * out,))


def pointwise(op: str, x) -> Var:
    if op == "sigmoid":
        return sigmoid(x)
    if op == "tanh":
        return tanh(x)
    raise ValueError(f"unknown pointwise op {op!r}")


# -- reductions and reshaping ------------------------------------------------


def sum(x, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    xv = value(x)
    out = xv.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _emit(np.asarray(out), (x,), vjp)


def mean(x, axis: int | None = None) -> Var:
    xv = value(x)
    n = xv.size if axis is None else xv.shape[axis]
    out = xv.mean(axis=axis)

    def vjp(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _emit(np.asarray(out), (x,), vjp)


def mean_pool(x) -> Var:
    """Average over the position axis: ``[..., L, C] -> [..., C]``."""
    if value(x).ndim < 2:
        raise ShapeError("mean_pool expects at least [L, C]")
    return mean(x, axis=-2)


def concat(xs: Sequence, axis: int = -1) -> Var:
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(out, tuple(xs), vjp)


def split(x, parts: int, axis: int = -1) -> list[Var]:
    xv = value(x)
    if xv.shape[axis] % parts:
        raise ShapeError(f"cannot split axis of {xv.shape[axis]} into {parts}")
    width = xv.shape[axis] // parts
    ax = axis % xv.ndim
    outs = []
    for i in range(parts):
        index = [slice(None)] * xv.ndim
        index[ax] = slice(i * width, (i + 1) * width)
        index = tuple(index)

        def vjp(g, index=index):
            full = np.zeros_like(xv)
            full[index] = g
            return (full,)

        outs.append(_emit(xv[index], (x,), vjp))
    return outs


def take(x, i: int, axis: int) -> Var:
    """Select index ``i`` along ``axis`` (that axis is dropped)."""
    xv = value(x)
    ax = axis % xv.ndim
    index = [slice(None)] * xv.ndim
    index[ax] = i
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(xv)
        full[index] = g
        return (full,)

    return _emit(xv[index], (x,), vjp)


def stack(xs: Sequence, axis: int = 0) -> Var:
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(vals)))

    return _emit(out, tuple(xs), vjp)


def log_softmax(x, axis: int = -1) -> Var:
    xv = value(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), vjp)


# -- linear maps ---------------------------------------------------------------


def conv1d(x, w, b=None) -> Var:
    """Same-padded 1-D convolution along the position axis.

    ``x[..., L, Cin]``, ``w[k, Cin, Cout]`` (k odd), ``b[Cout]``;
    ``out[p, co] = b[co] + sum_{dk, ci} x[p + dk - (k-1)/2, ci] * w[dk, ci, co]``
    with out-of-range positions read as zero.
    """
    xv, wv = value(x), value(w)
    if wv.ndim != 3 or xv.ndim < 2:
        raise ShapeError(f"conv1d expects x[..., L, Cin] and w[k, Cin, Cout], got {xv.shape}, {wv.shape}")
    k, cin, cout = wv.shape
    if k % 2 == 0:
        raise ShapeError("conv1d kernel size must be odd")
    if xv.shape[-1] != cin:
        raise ShapeError(f"conv1d input channels {xv.shape[-1]} != kernel channels {cin}")
    if b is not None and value(b).shape != (cout,):
        raise ShapeError(f"conv1d bias shape {value(b).shape} != ({cout},)")
    L = xv.shape[-2]
    lead = xv.shape[:-2]
    pad = (k - 1) // 2
    # im2col: cols[..., p, dk, ci] = x[..., p + dk - pad, ci]
    xp = np.zeros(lead + (L + 2 * pad, cin))
    xp[..., pad : pad + L, :] = xv
    cols = sliding_window_view(xp, k, axis=-2).swapaxes(-1, -2).reshape(-1, k * cin)
    w2 = wv.reshape(k * cin, cout)
    out = (cols @ w2).reshape(lead + (L, cout))
    if b is not None:
        out += value(b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        dx = None
        if _taped(x):
            dcols = (g2 @ w2.T).reshape(lead + (L, k, cin))
            dxp = np.zeros(lead + (L + 2 * pad, cin))
            for dk in range(k):
                dxp[..., dk : dk + L, :] += dcols[..., dk, :]
            dx = dxp[..., pad : pad + L, :]
        dw = (cols.T @ g2).reshape(k, cin, cout) if _taped(w) else None
        db = g2.sum(axis=0) if b is not None and _taped(b) else None
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, vjp)


def dense(x, w, b=None) -> Var:
    """Affine map ``x[..., n] @ w[n, m] + b[m]``."""
    xv, wv = value(x), value(w)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"dense shapes incompatible: {xv.shape} @ {wv.shape}")
    if b is not None and value(b).shape != (wv.shape[1],):
        raise ShapeError(f"dense bias shape {value(b).shape} != ({wv.shape[1]},)")
    out = xv @ wv
    if b is not None:
        out = out + value(b)

    def vjp(g):
        dx = g @ wv.T if _taped(x) else None
        dw = xv.reshape(-1, wv.shape[0]).T @ g.reshape(-1, wv.shape[1]) if _taped(w) else None
        db = g.reshape(-1, wv.shape[1]).sum(axis=0) if b is not None and _taped(b) else None
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, vjp)


def mse(a, b) -> Var:
    """Mean of squared differences over all elements."""
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mse shapes differ: {av.shape} vs {bv.shape}")
    diff = av - bv
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def vjp(g):
        d = (2.0 / n) * g * diff
        return (d, -d)

    return _emit(out, (a, b), vjp)


def sq_dist(a, b) -> Var:
    """Squared Euclidean distance over the last axis."""
    d = sub(a, b)
    return sum(mul(d, d), axis=-1)


def as_vars(arrays: Iterable[np.ndarray]) -> list[Var]:
    return [Var(a) for a in arrays]
