"""Dense tensors with reverse-mode autodiff on a replayable tape.

Every differentiable operation in the package is built on the Tensor type
defined here.  Tensors wrap contiguous row-major numpy buffers (f32 or f64);
gradients are computed by replaying a topologically ordered GradTape in
reverse.  Tensors are treated as immutable once created.

Summation order is numpy's default row-major reduction, which is
deterministic for fixed inputs, so identical inputs give bit-identical
outputs across runs.
"""

from __future__ import annotations

import json
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NumericalError, ShapeError

# sigmoid inputs are clamped here before exponentiation; with temperatures
# as small as 0.01 the scaled logits overflow f32 otherwise
SIGMOID_CLAMP = 40.0


def _as_array(x, dtype=None):
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if dtype is not None:
        a = a.astype(dtype)
    return np.ascontiguousarray(a)


class Tensor:
    """N-d float array, optionally participating in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None,
                 _parents=(), _backward=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents)
        self.grad = None
        self.name = name
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode gradient of this scalar w.r.t. all requires_grad leaves."""
        if self.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        if not np.isfinite(self.data).all():
            raise NumericalError("backward() on non-finite loss")
        tape = GradTape.trace(self)
        self.grad = np.ones_like(self.data)
        tape.replay()

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


class GradTape:
    """Topologically ordered record of the ops reaching one output tensor.

    Replaying the tape in reverse visits every node exactly once and
    populates .grad on every requires_grad leaf.  Single-threaded by design;
    parallelism lives across independent tapes.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "GradTape":
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
                if id(p) not in seen:
                    stack.append((p, False))
        return GradTape(order)

    def replay(self):
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b):
    a, b = _wrap(a), _wrap(b, a)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    parents = (a, b)
    track = a.requires_grad or b.requires_grad

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(bwd_a(g, a.data, b.data, out_data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(bwd_b(g, a.data, b.data, out_data), b.shape))

    return Tensor(out_data, _parents=parents if track else (),
                  _backward=_backward if track else None)


def _unary(a, fwd, bwd):
    a = _wrap(a)
    out_data = fwd(a.data)
    track = a.requires_grad

    def _backward(g):
        a._accumulate(bwd(g, a.data, out_data))

    return Tensor(out_data, _parents=(a,) if track else (),
                  _backward=_backward if track else None)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    a, b = _wrap(a), _wrap(b, a)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def texp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o)


def tlog(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _unary(a, np.log, lambda g, x, o: g / x)


def tsqrt(a):
    a = _wrap(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    return _unary(a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def sigmoid(a):
    def fwd(x):
        z = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
        return 1.0 / (1.0 + np.exp(-z))

    # saturated region has analytically ~0 gradient; the clamp keeps it
    # exactly 0 there, which the grad checker also sees
    def bwd(g, x, o):
        d = o * (1.0 - o)
        return np.where(np.abs(x) <= SIGMOID_CLAMP, g * d, 0.0)

    return _unary(a, fwd, bwd)


def clamp(a, lo=None, hi=None):
    def fwd(x):
        return np.clip(x, lo, hi)

    def bwd(g, x, o):
        mask = np.ones_like(x)
        if lo is not None:
            mask = mask * (x >= lo)
        if hi is not None:
            mask = mask * (x <= hi)
        return g * mask

    return _unary(a, fwd, bwd)


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, o: g * (x > 0))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": texp, "log": tlog, "sigmoid": sigmoid, "clamp": clamp,
}


def elementwise(op_kind: str, a, b=None, **kwargs):
    """Dispatch an elementwise op by name (binary ops require b)."""
    if op_kind not in _ELEMENTWISE:
        raise DomainError(f"unknown elementwise op {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ShapeError(f"{op_kind} requires two operands")
        return fn(a, b)
    return fn(a, **kwargs)


# -- reductions / shape -----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)

    def bwd(g, x, o):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.shape).copy()

    return _unary(a, lambda x: x.sum(axis=axis, keepdims=keepdims), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def tmax(a, axis=None, keepdims=False):
    """Max reduction; gradient flows to the first-occurring max (deterministic)."""
    a = _wrap(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def _backward(g):
        expanded = out_data if keepdims or axis is None else np.expand_dims(out_data, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        hit = a.data == expanded
        # keep only the first max along the reduced axis
        if axis is None:
            first = np.zeros_like(a.data, dtype=bool)
            first.reshape(-1)[np.argmax(a.data.reshape(-1))] = True
        else:
            idx = np.argmax(a.data, axis=axis)
            first = np.zeros_like(a.data, dtype=bool)
            np.put_along_axis(first, np.expand_dims(idx, axis), True, axis=axis)
        a._accumulate(np.where(first & hit, np.broadcast_to(gg, a.data.shape), 0.0))

    track = a.requires_grad
    return Tensor(out_data, _parents=(a,) if track else (),
                  _backward=_backward if track else None)


def reshape(a, *shape):
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return _unary(a, lambda x: x.reshape(shape),
                  lambda g, x, o: g.reshape(x.shape))


def transpose(a, *axes):
    a = _wrap(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    ax = axes if axes else tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(ax)
    return _unary(a, lambda x: np.ascontiguousarray(x.transpose(ax)),
                  lambda g, x, o: g.transpose(inv))


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    track = any(t.requires_grad for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _backward(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(s, e)
                t._accumulate(g[tuple(sl)])

    return Tensor(out_data, _parents=tuple(tensors) if track else (),
                  _backward=_backward if track else None)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    out_data = a.data @ b.data
    track = a.requires_grad or b.requires_grad

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(out_data, _parents=(a, b) if track else (),
                  _backward=_backward if track else None)


# -- softmax / cross-entropy ------------------------------------------------

def softmax(a, axis=-1):
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    track = a.requires_grad
    return Tensor(out_data, _parents=(a,) if track else (),
                  _backward=_backward if track else None)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Scalar -log softmax(logits)[target] for a 1-d logit vector."""
    logits = _wrap(logits)
    if logits.data.ndim != 1:
        raise ShapeError("softmax_cross_entropy expects a 1-d logit vector")
    k = logits.shape[0]
    if not (0 <= int(target) < k):
        raise ShapeError(f"target {target} out of range [0, {k})")
    z = logits.data - logits.data.max()
    logsumexp = np.log(np.exp(z).sum())
    out_data = np.asarray(logsumexp - z[int(target)], dtype=logits.dtype)

    def _backward(g):
        p = np.exp(z - logsumexp)
        p[int(target)] -= 1.0
        logits._accumulate(g * p)

    track = logits.requires_grad
    return Tensor(out_data, _parents=(logits,) if track else (),
                  _backward=_backward if track else None)


# -- convolutions -----------------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError("kernel larger than padded input")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (b, c, oh, ow, kh, kw),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow, (hp, wp)


def _col2im(gcols, x_shape, kh, kw, stride, padding, oh, ow):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    gx = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
    g6 = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, :, :, i, j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) over B x C x H x W input."""
    x, kernel = _wrap(x), _wrap(kernel, x)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    f, c, kh, kw = kernel.shape
    if c != x.shape[1]:
        raise ShapeError(f"conv2d channel mismatch {x.shape} vs {kernel.shape}")
    cols, oh, ow, _ = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out_data = (cols @ wmat.T).reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2)
    track = x.requires_grad or kernel.requires_grad

    def _backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        if kernel.requires_grad:
            kernel._accumulate((gflat.T @ cols).reshape(kernel.shape))
        if x.requires_grad:
            gcols = gflat @ wmat
            x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding, oh, ow))

    return Tensor(np.ascontiguousarray(out_data),
                  _parents=(x, kernel) if track else (),
                  _backward=_backward if track else None)


def conv3d_temporal(x: Tensor, kernel: Tensor) -> Tensor:
    """Temporal-only 3-d convolution: kernel C' x C x kt x 1 x 1 over B x C x T x H x W."""
    x, kernel = _wrap(x), _wrap(kernel, x)
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError("conv3d_temporal expects 5-d input and kernel")
    co, ci, kt, k1, k2 = kernel.shape
    if k1 != 1 or k2 != 1 or ci != x.shape[1]:
        raise ShapeError("kernel must be C' x C x kt x 1 x 1 with matching C")
    b, c, t, h, w = x.shape
    if kt > t:
        raise ShapeError(f"temporal kernel {kt} exceeds T={t}")
    to = t - kt + 1
    out_data = np.zeros((b, co, to, h, w), dtype=x.dtype)
    kmat = kernel.data[:, :, :, 0, 0]  # co x ci x kt
    for dt in range(kt):
        out_data += np.einsum("oc,bcthw->bothw", kmat[:, :, dt], x.data[:, :, dt:dt + to])
    track = x.requires_grad or kernel.requires_grad

    def _backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for dt in range(kt):
                gx[:, :, dt:dt + to] += np.einsum("oc,bothw->bcthw", kmat[:, :, dt], g)
            x._accumulate(gx)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for dt in range(kt):
                gk[:, :, dt, 0, 0] = np.einsum("bothw,bcthw->oc", g, x.data[:, :, dt:dt + to])
            kernel._accumulate(gk)

    return Tensor(out_data, _parents=(x, kernel) if track else (),
                  _backward=_backward if track else None)


# -- bilinear resize (fixed linear map, differentiable) ----------------------

def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix mapping n_in samples to n_out."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1:
        a[0] = 1.0 / n_in
        return a
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        x = i * scale
        lo = int(np.floor(x))
        hi = min(lo + 1, n_in - 1)
        f = x - lo
        a[i, lo] += 1.0 - f
        a[i, hi] += f
    return a


def resize_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of the trailing two axes of a ...xHxW tensor."""
    x = _wrap(x)
    h, w = x.shape[-2], x.shape[-1]
    oh, ow = out_hw
    ah = _resize_matrix(h, oh, x.dtype)
    aw = _resize_matrix(w, ow, x.dtype)
    # out = Ah @ X @ Aw^T, batched over leading axes
    out_data = np.einsum("oh,...hw,pw->...op", ah, x.data, aw)

    def _backward(g):
        x._accumulate(np.einsum("oh,...op,pw->...hw", ah, g, aw))

    track = x.requires_grad
    return Tensor(out_data, _parents=(x,) if track else (),
                  _backward=_backward if track else None)


# -- parameter utilities ----------------------------------------------------

def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize the last axis of a 2-d tensor, differentiably."""
    sq = tsum(mul(x, x), axis=-1, keepdims=True)
    norm = tsqrt(add(sq, eps))
    return div(x, norm)


# -- gradient checking ------------------------------------------------------

def grad_check(f: Callable[[Sequence[Tensor]], Tensor],
               inputs: Sequence[Tensor],
               step: float = 1e-5,
               tol: float = 1e-4) -> dict:
    """Compare reverse-mode gradients of scalar f against central differences.

    Inputs must be f64.  Returns a report with the per-input max relative
    error and an overall pass flag.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise NumericalError("grad_check requires f64 inputs")
        t.zero_grad()
    loss = f(inputs)
    if not np.isfinite(loss.data).all():
        raise NumericalError("non-finite loss in grad_check")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    errors = []
    frozen = [Tensor(u.data.copy()) for u in inputs]
    for idx, (t, ga) in enumerate(zip(inputs, analytic)):
        gn = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = gn.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            frozen[idx].data.reshape(-1)[k] = orig + step
            fp = f(frozen).item()
            frozen[idx].data.reshape(-1)[k] = orig - step
            fm = f(frozen).item()
            frozen[idx].data.reshape(-1)[k] = orig
            gflat[k] = (fp - fm) / (2.0 * step)
        denom = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0), 1e-8)
        errors.append(float(np.abs(ga - gn).max(initial=0.0) / denom))

    max_err = max(errors) if errors else 0.0
    return {"per_input_rel_err": errors, "max_rel_err": max_err,
            "tol": tol, "passed": max_err <= tol}


# -- serialization ----------------------------------------------------------

def save_tensor(path_prefix: str, t: Tensor | np.ndarray, name: str | None = None):
    """Write raw little-endian buffer to <prefix>.bin and a JSON sidecar."""
    data = t.data if isinstance(t, Tensor) else _as_array(t)
    dtype = "f32" if data.dtype == np.float32 else "f64"
    with open(path_prefix + ".bin", "wb") as fh:
        fh.write(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes())
    with open(path_prefix + ".json", "w") as fh:
        json.dump({"shape": list(data.shape), "dtype": dtype,
                   "name": name or os.path.basename(path_prefix)}, fh)


def load_tensor(path_prefix: str) -> Tensor:
    with open(path_prefix + ".json") as fh:
        meta = json.load(fh)
    np_dtype = np.float32 if meta["dtype"] == "f32" else np.float64
    with open(path_prefix + ".bin", "rb") as fh:
        buf = np.frombuffer(fh.read(), dtype=np.dtype(np_dtype).newbyteorder("<"))
    data = buf.astype(np_dtype).reshape(meta["shape"])
    return Tensor(data, name=meta.get("name"))
