"""Small dense-tensor engine with reverse-mode gradients and Adam.

Only the primitives needed by the detector zoo and the attacks are provided.
Every op accepts a single sample or a leading batch axis. Computation is
recorded on the active :class:`Tape` (if any); ``Tape.gradient`` replays the
record backwards.

    with Tape() as tape:
        x = Tensor(image)
        loss = softmax_cross_entropy(model.forward(x), label)
    dx = tape.gradient(loss, x)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A tensor would contain NaN or Inf."""


class Tensor:
    """Dense float32 array carrying an identity for the gradient tape."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, *, copy: bool = False):
        arr = np.array(data, dtype=DTYPE, copy=True) if copy else np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # operator sugar, recorded like any other op
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
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------

@dataclass
class Record:
    """One primitive application: ``output = OPS[op].forward(*inputs, **params)``."""

    op: str
    inputs: tuple
    output: Tensor
    params: dict
    ctx: object


@dataclass
class Tape:
    """Ordered record of primitive applications (a computation record)."""

    records: list[Record] = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def gradient(self, loss: Tensor, wrt):
        return gradient(self, loss, wrt)

    def replay(self) -> list[np.ndarray]:
        """Re-run every record forward from its recorded inputs."""
        outs = []
        for rec in self.records:
            arrays = [None if t is None else t.data for t in rec.inputs]
            out, _ = OPS[rec.op].forward(*arrays, **rec.params)
            outs.append(out)
        return outs


_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("active_tape", default=None)


@dataclass(frozen=True)
class Op:
    forward: Callable
    backward: Callable  # (ctx, grad_out, needs) -> tuple of input grads (None if not needed)


OPS: dict[str, Op] = {}


def _register(name: str, forward: Callable, backward: Callable) -> None:
    OPS[name] = Op(forward, backward)


def _apply(name: str, inputs: Sequence, **params) -> Tensor:
    tensors = tuple(None if x is None else as_tensor(x) for x in inputs)
    arrays = [None if t is None else t.data for t in tensors]
    out_arr, ctx = OPS[name].forward(*arrays, **params)
    out = Tensor(out_arr)
    tape = _ACTIVE.get()
    if tape is not None:
        tape.records.append(Record(name, tensors, out, params, ctx))
    return out


def gradient(record: Tape, loss: Tensor, wrt):
    """Adjoint of the scalar ``loss`` with respect to ``wrt`` (a tensor or a list).

    A ``wrt`` tensor that does not influence ``loss`` gets a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)

    # forward pass over the record: which tensors depend on any target
    live = {id(t) for t in targets}
    needed_records = []
    for rec in record.records:
        if any(t is not None and id(t) in live for t in rec.inputs):
            live.add(id(rec.output))
            needed_records.append(rec)

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(needed_records):
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        needs = tuple(t is not None and id(t) in live for t in rec.inputs)
        grads = OPS[rec.op].backward(rec.ctx, g, needs)
        for t, gi, need in zip(rec.inputs, grads, needs):
            if not need or gi is None:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi

    result = []
    for t in targets:
        g = adj.get(id(t))
        result.append(Tensor(np.zeros_like(t.data) if g is None else g.astype(DTYPE, copy=False)))
    return result[0] if single else result


# ---------------------------------------------------------------------------
# Elementwise and reshaping primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)


def _sub_fwd(a, b):
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, -_unbroadcast(g, sb) if needs[1] else None)


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_bwd(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _sum_fwd(x, axis=None):
    return np.sum(x, axis=axis, dtype=DTYPE), (x.shape, axis)


def _sum_bwd(ctx, g, needs):
    shape, axis = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).astype(DTYPE),)


def _reshape_fwd(x, shape):
    return x.reshape(shape), x.shape


def _reshape_bwd(ctx, g, needs):
    return (g.reshape(ctx),)


def _relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(mask, g, needs):
    return (g * mask,)


def _tanh_fwd(x):
    y = np.tanh(x)
    return y, y


def _tanh_bwd(y, g, needs):
    return (g * (1 - y * y),)


_register("add", _add_fwd, _add_bwd)
_register("sub", _sub_fwd, _sub_bwd)
_register("mul", _mul_fwd, _mul_bwd)
_register("sum", _sum_fwd, _sum_bwd)
_register("reshape", _reshape_fwd, _reshape_bwd)
_register("relu", _relu_fwd, _relu_bwd)
_register("tanh", _tanh_fwd, _tanh_bwd)


def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", (a, b))


def tsum(x, axis: int | tuple | None = None) -> Tensor:
    return _apply("sum", (x,), axis=axis)


def reshape(x, shape: tuple) -> Tensor:
    return _apply("reshape", (x,), shape=tuple(shape))


def flatten(x: Tensor) -> Tensor:
    """Flatten all but the leading batch axis (4-D input) or everything (3-D)."""
    if x.data.ndim == 4:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def relu(x) -> Tensor:
    return _apply("relu", (x,))


def tanh_map(x) -> Tensor:
    return _apply("tanh", (x,))


# ---------------------------------------------------------------------------
# Convolution, pooling, dense
# ---------------------------------------------------------------------------

def _conv_fwd(x, w, b, stride=1, padding=0):
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects input [C,H,W] or [N,C,H,W] and kernels [Co,Ci,k,k], got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, kernels {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{wd} (+{padding})")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    # channel-major working layout: rows of cols are (c, i, j), columns are (n, y, x)
    xp = np.zeros((c, n, hp, wp), dtype=DTYPE)
    xp[:, :, padding:padding + h, padding:padding + wd] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    wmat = w.reshape(co, c * k * k)
    out = wmat @ cols
    if b is not None:
        out += b[:, None]
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if single:
        out = out[0]
    ctx = (cols, wmat, w.shape, (n, c, h, wd), (ho, wo), stride, padding, single, b is not None)
    return np.ascontiguousarray(out), ctx


def _conv_bwd(ctx, g, needs):
    cols, wmat, wshape, (n, c, h, wd), (ho, wo), stride, padding, single, has_bias = ctx
    if single:
        g = g[None]
    co, _, k, _ = wshape
    gflat = g.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
    gx = gw = gb = None
    if needs[1]:
        gw = (gflat @ cols.T).reshape(wshape)
    if has_bias and needs[2]:
        gb = gflat.sum(axis=1)
    if needs[0]:
        dcols = (wmat.T @ gflat).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        gx = dxp[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3)
        gx = gx[0] if single else np.ascontiguousarray(gx)
    return gx, gw, gb


def _pool_fwd(x):
    single = x.ndim == 3
    if single:
        x = x[None]
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    r = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]
    return out, (idx, x.shape, single)


def _pool_bwd(ctx, g, needs):
    idx, (n, c, h, w), single = ctx
    if single:
        g = g[None]
    r = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
    np.put_along_axis(r, idx[..., None], g[..., None], axis=-1)
    gx = r.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (gx[0] if single else gx,)


def _dense_fwd(x, w, b):
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} incompatible with weights {w.shape}")
    return x @ w.T + b, (x, w)


def _dense_bwd(ctx, g, needs):
    x, w = ctx
    gx = g @ w if needs[0] else None
    gw = gb = None
    if needs[1]:
        gw = np.outer(g, x) if x.ndim == 1 else g.T @ x
    if needs[2]:
        gb = g if g.ndim == 1 else g.sum(axis=0)
    return gx, gw, gb


_register("conv2d", _conv_fwd, _conv_bwd)
_register("maxpool2", _pool_fwd, _pool_bwd)
_register("dense", _dense_fwd, _dense_bwd)


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation (no kernel flip)."""
    return _apply("conv2d", (x, kernels, bias), stride=int(stride), padding=int(padding))


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first cell in row-major order."""
    return _apply("maxpool2", (x,))


def dense(x, weights, bias) -> Tensor:
    return _apply("dense", (x, weights, bias))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _xent_fwd(z, labels):
    single = z.ndim == 1
    z64 = np.atleast_2d(z).astype(np.float64)
    lab = np.atleast_1d(labels).astype(np.int64)
    if z64.shape[1] != 2 or lab.shape[0] != z64.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {np.shape(labels)}")
    m = z64.max(axis=1, keepdims=True)
    e = np.exp(z64 - m)
    top = z64.argmax(axis=1)
    rest = e.sum(axis=1) - e[np.arange(len(top)), top]  # exactly the non-max terms
    lse = m[:, 0] + np.log1p(rest)
    per = lse - z64[np.arange(len(lab)), lab]
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(lab)), lab] = 1.0
    loss = per.mean()
    return np.asarray(loss, dtype=DTYPE), ((p - onehot) / len(lab), single)


def _xent_bwd(ctx, g, needs):
    dz, single = ctx
    dz = (dz * float(g)).astype(DTYPE)
    return (dz[0] if single else dz,)


_register("softmax_cross_entropy", _xent_fwd, _xent_bwd)


def softmax_cross_entropy(logits, label) -> Tensor:
    """Mean two-class softmax cross-entropy, computed in shifted log-sum-exp form."""
    lab = np.asarray(label)
    return _apply("softmax_cross_entropy", (logits,), labels=lab)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def fresh(cls, like: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(like, dtype=DTYPE), np.zeros_like(like, dtype=DTYPE), **hyper)


def adam_update(params: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step. Returns new arrays; inputs are left untouched."""
    params = params.data if isinstance(params, Tensor) else params
    grad = grad.data if isinstance(grad, Tensor) else grad
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ShapeError(f"adam_update: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = (b1 * state.m + (1 - b1) * grad).astype(DTYPE)
    v = (b2 * state.v + (1 - b2) * grad * grad).astype(DTYPE)
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    new = (params - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(DTYPE)
    return new, AdamState(m, v, t, state.lr, b1, b2, state.eps)
