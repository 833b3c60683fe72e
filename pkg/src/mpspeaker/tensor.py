"""Minimal dense-array reverse-mode autodiff, float64 end to end.

The operator set is exactly what the embedder needs: matmul, conv2d,
batchnorm2d, pointwise nonlinearities, shape plumbing, softmax, a fused
cross entropy, and L2 normalization.  Every differentiable op carries its
exact adjoint and is validated by :func:`grad_check` against central finite
differences.

Reductions use numpy's fixed left-to-right pairwise order, so identical
inputs give bit-identical outputs across runs.  A graph and its tensors
belong to one logical thread during forward/backward; frozen tensors may be
shared freely.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A float64 ndarray plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light sugar; the full op set lives in module functions
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _result(data, inputs, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Populate gradients of every requires_grad tensor reachable from ``loss``."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), bwd)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)

    def bwd(g):
        _accumulate(x, g * c)

    return _result(x.data * c, (x,), bwd)


def relu(x):
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * (x.data > 0.0))

    return _result(data, (x,), bwd)


def tanh(x):
    x = _as_tensor(x)
    data = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - data * data))

    return _result(data, (x,), bwd)


def cos(x):
    x = _as_tensor(x)

    def bwd(g):
        _accumulate(x, -g * np.sin(x.data))

    return _result(np.cos(x.data), (x,), bwd)


def arccos_clamped(x, eps=1e-7):
    """arccos with inputs clamped to [-1+eps, 1-eps] to bound the gradient.

    The gradient is zero where the clamp is active (the output is constant
    there).
    """
    x = _as_tensor(x)
    clamped = np.clip(x.data, -1.0 + eps, 1.0 - eps)
    inside = (x.data > -1.0 + eps) & (x.data < 1.0 - eps)

    def bwd(g):
        _accumulate(x, np.where(inside, -g / np.sqrt(1.0 - clamped * clamped), 0.0))

    return _result(np.arccos(clamped), (x,), bwd)


def reshape(x, shape):
    x = _as_tensor(x)

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), bwd)


def flatten(x):
    return reshape(x, (-1,))


def transpose_last2(x):
    """Swap the last two axes (matrix transpose with leading batch dims)."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ValueError(f"transpose_last2 needs >= 2 dims, got shape {x.data.shape}")

    def bwd(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.data, -1, -2), (x,), bwd)


def concat(a, b, axis):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"concat rank mismatch: {a.data.shape} vs {b.data.shape}")
    data = np.concatenate([a.data, b.data], axis=axis)
    split = a.data.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _result(data, (a, b), bwd)


def mean_axis(x, axis=None):
    """Mean over one axis (or over everything when axis is None)."""
    x = _as_tensor(x)
    data = x.data.mean(axis=axis)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        if axis is None:
            _accumulate(x, np.full(x.data.shape, g / count))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis) / count, x.data.shape))

    return _result(data, (x,), bwd)


def softmax_axis(x, axis):
    """Numerically stable softmax; slices along ``axis`` sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - inner))

    return _result(data, (x,), bwd)


def l2_normalize(x, axis):
    """x / max(||x||_2, 1e-12) along ``axis``."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, 1e-12)
    data = x.data / safe
    active = norm > 1e-12

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - np.where(active, data * inner, 0.0)) / safe)

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading dims broadcast as in np.matmul."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner mismatch: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _result(data, (a, b), bwd)


def conv2d(x, weight, stride=(1, 1), pad=(0, 0)):
    """2-d cross correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``weight`` is
    (C_out, C_in, kh, kw).  Output spatial size follows
    floor((H + 2*ph - kh)/sh) + 1.  Implemented as a loop over kernel
    offsets, each a BLAS contraction, so no im2col buffer is materialized.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d wants 3/4-d input and 4-d kernel, got {x.data.shape} and {weight.data.shape}")
    n, ci, h, w = xd.shape
    co, ci_k, kh, kw = weight.data.shape
    if ci != ci_k:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {weight.data.shape}")
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.data.shape}, kernel {weight.data.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, ho, wo, co))
    for a in range(kh):
        for b in range(kw):
            xs = xp[:, :, a : a + sh * ho : sh, b : b + sw * wo : sw]
            # (N,Ci,Ho,Wo) x (Co,Ci) -> (N,Ho,Wo,Co)
            out += np.tensordot(xs, weight.data[:, :, a, b], axes=([1], [1]))
    data = out.transpose(0, 3, 1, 2)
    if unbatched:
        data = data[0]

    def bwd(g):
        gb = g[None] if unbatched else g
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for a in range(kh):
                for b in range(kw):
                    xs = xp[:, :, a : a + sh * ho : sh, b : b + sw * wo : sw]
                    gw[:, :, a, b] = np.tensordot(gb, xs, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(weight, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    # (N,Co,Ho,Wo) x (Co,Ci) -> (N,Ci,Ho,Wo)
                    contrib = np.tensordot(gb, weight.data[:, :, a, b], axes=([1], [0]))
                    gxp[:, :, a : a + sh * ho : sh, b : b + sw * wo : sw] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
            _accumulate(x, gx[0] if unbatched else gx)

    return _result(data, (x, weight), bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics for eval-mode normalization."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def for_channels(cls, c):
        return cls(np.zeros(c), np.ones(c))


def batchnorm2d(x, gamma, beta, state: BatchNormState, training, eps=1e-5, momentum=0.1):
    """Per-channel normalization with learnable scale/shift.

    Accepts (C, H, W) or (N, C, H, W).  In training mode the batch mean and
    biased variance over everything but the channel axis are used and the
    running statistics updated as (1 - momentum) * old + momentum * batch;
    eval mode normalizes with the stored running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ValueError(f"batchnorm2d wants 3/4-d input, got shape {x.data.shape}")
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batchnorm2d params must have shape ({c},)")
    axes = (0, 2, 3)
    pshape = (1, c, 1, 1)

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1.0 - momentum) * state.running_var + momentum * var
    else:
        mean = state.running_mean
        var = state.running_var

    std = np.sqrt(var + eps).reshape(pshape)
    xhat = (xd - mean.reshape(pshape)) / std
    data = gamma.data.reshape(pshape) * xhat + beta.data.reshape(pshape)
    if unbatched:
        data = data[0]

    def bwd(g):
        gb = g[None] if unbatched else g
        _accumulate(gamma, (gb * xhat).sum(axis=axes))
        _accumulate(beta, gb.sum(axis=axes))
        if x.requires_grad:
            gxhat = gb * gamma.data.reshape(pshape)
            if training:
                m = xd.size // c
                gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                      - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / m) / std
            else:
                gx = gxhat / std
            _accumulate(x, gx[0] if unbatched else gx)

    return _result(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# fused classification loss
# ---------------------------------------------------------------------------


def cross_entropy_logits(logits, labels):
    """Mean negative log softmax at the true class; fused for stability.

    ``logits`` is (N, C); ``labels`` an int array of N class indices.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be (N, C), got shape {logits.data.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes: {labels.min()}..{labels.max()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    data = np.float64((lse - logits.data[np.arange(n), labels]).mean())

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, g * p / n)

    return _result(data, (logits,), bwd)


# ---------------------------------------------------------------------------
# verification and persistence
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map the tensor to a scalar Tensor without mutating it.  The
    relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    for i in range(x.data.size):
        saved = x.data.flat[i]
        x.data.flat[i] = saved + h
        hi = float(f(x).data)
        x.data.flat[i] = saved - h
        lo = float(f(x).data)
        x.data.flat[i] = saved
        numeric.flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


_CKPT_MAGIC = b"MPCK"


def save_checkpoint(path, arrays):
    """Write named float64 arrays: magic MPCK, u32 count, then per entry
    u16 name length, UTF-8 name, u8 rank, u32 dims, float64 data."""
    items = list(arrays.items())
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, value in items:
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered {name: ndarray} dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, want {_CKPT_MAGIC!r}")
    (count,) = struct.unpack("<I", blob[4:8])
    pos = 8
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", blob[pos : pos + 2])
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = blob[pos]
        pos += 1
        dims = struct.unpack(f"<{rank}I", blob[pos : pos + 4 * rank])
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob[pos : pos + 8 * n], dtype="<f8")
        if arr.size != n:
            raise ValueError(f"{path}: truncated data for parameter {name!r}")
        pos += 8 * n
        out[name] = arr.reshape(dims).copy()
    return out
