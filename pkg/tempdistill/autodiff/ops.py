"""
Differentiable primitives. Every op computes its forward value with numpy and hands the tape a
closure that maps the output gradient to one gradient per input (None when the input is constant).
"""

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, record
from ..errors import InvalidArgument, InvalidState


LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def unbroadcast(grad:np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    if grad.shape == tuple(shape):
        return grad

    for _ in range(grad.ndim - len(shape)):
        grad = grad.sum(axis=0)

    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)

    return grad


# --- numeric kernels (no tape) ---

def _softmax_kernel(z:np.ndarray, tau:float, mask:Optional[np.ndarray], axis:int) -> np.ndarray:
    s = z / tau
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    top = np.max(s, axis=axis, keepdims=True)
    if mask is not None and not np.all(np.isfinite(top)):
        raise InvalidState("fully masked attention row")
    e = np.exp(s - top)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_kernel(z:np.ndarray, axis:int=-1) -> np.ndarray:
    top = np.max(z, axis=axis, keepdims=True)
    shifted = z - top
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_with_temperature(logits, tau:float) -> np.ndarray:
    """p_i = exp(z_i/tau) / sum_j exp(z_j/tau) over the last axis, with max-subtraction"""
    z = np.asarray(logits, dtype=np.float64)
    if not tau > 0:
        raise InvalidArgument(f"temperature must be positive, got {tau}")
    if z.size == 0 or z.shape[-1] == 0:
        raise InvalidArgument("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("logits must be finite")
    return _softmax_kernel(z, tau, None, -1)


# --- elementwise ---

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    return record("mul", (a, b), x * y,
        lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    return record("div", (a, b), x / y,
        lambda g: (unbroadcast(g / y, x.shape), unbroadcast(-g * x / (y * y), y.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return record("log", (a,), np.log(x), lambda g: (g / x,))


def gelu(a) -> Tensor:
    """tanh approximation, as in BERT/BART"""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return record("gelu", (a,), out, backward)


def masked_fill(a, mask:np.ndarray, value:float) -> Tensor:
    """Replace entries where mask is True with a constant"""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return record("masked_fill", (a,), np.where(mask, value, a.data),
        lambda g: (np.where(mask, 0.0, g),))


def dropout(a, rate:float, rng:Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. Identity when rate is 0 or there is no generator (inference)"""
    a = as_tensor(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return record("dropout", (a,), a.data * keep, lambda g: (g * keep,))


# --- shape ---

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise InvalidArgument("matmul operands need at least two dimensions")

    def backward(g):
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return unbroadcast(gx, x.shape), unbroadcast(gy, y.shape)

    return record("matmul", (a, b), np.matmul(x, y), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(orig),))


def transpose(a, axes:Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", (a,), np.transpose(a.data, axes),
        lambda g: (np.transpose(g, inverse),))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors:Sequence, axis:int=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgument("nothing to concatenate")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
        lambda g: tuple(np.split(g, splits, axis=axis)))


def _expand_reduced(g:np.ndarray, shape, axis, keepdims:bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims:bool=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims),
        lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims:bool=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return record("mean", (a,), np.mean(a.data, axis=axis, keepdims=keepdims),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,))


# --- normalisation and lookup ---

def softmax(a, axis:int=-1, tau:float=1.0, mask:Optional[np.ndarray]=None) -> Tensor:
    """Softmax of a/tau. Masked (False) positions get exactly zero probability"""
    a = as_tensor(a)
    if not tau > 0:
        raise InvalidArgument(f"temperature must be positive, got {tau}")
    p = _softmax_kernel(a.data, tau, mask, axis)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)) / tau,)

    return record("softmax", (a,), p, backward)


def log_softmax(a, axis:int=-1) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax_kernel(a.data, axis)

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return record("log_softmax", (a,), out, backward)


def layer_norm(a, scale, offset, eps:float=LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale and shift"""
    a, scale, offset = as_tensor(a), as_tensor(scale), as_tensor(offset)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv_std
    gamma = scale.data
    n = x.shape[-1]

    def backward(g):
        dxhat = g * gamma
        dx = inv_std / n * (n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (a, scale, offset), xhat * gamma + offset.data, backward)


def embedding(weight, ids) -> Tensor:
    """Row lookup weight[ids]; ids may have any shape"""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    rows = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise InvalidArgument(f"token id out of range for an embedding of {rows} rows")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return record("embedding", (weight,), weight.data[ids], backward)


def gather(a, ids) -> Tensor:
    """Pick a[..., ids[...]] along the last axis"""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)[..., None]
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, ids, g[..., None], axis=-1)
        return (ga,)

    return record("gather", (a,), np.take_along_axis(a.data, ids, axis=-1)[..., 0], backward)


def label_smoothed_nll(logits, targets, epsilon:float, mask:Optional[np.ndarray]=None) -> Tensor:
    """Mean over (unmasked) steps of (1-eps)*(-log p_target) + eps*mean_j(-log p_j)"""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]

    if not 0.0 <= epsilon < 1.0:
        raise InvalidArgument(f"label smoothing must be in [0, 1), got {epsilon}")
    if targets.shape != logits.shape[:-1]:
        raise InvalidArgument(f"targets of shape {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise InvalidArgument(f"target id out of range for vocabulary of {vocab}")

    weights = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise InvalidArgument("no unmasked steps to average over")

    logp = _log_softmax_kernel(logits.data)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    smooth = -logp.mean(axis=-1)
    per_step = (1.0 - epsilon) * nll + epsilon * smooth
    loss = np.sum(per_step * weights) / total

    def backward(g):
        target = np.exp(logp) - epsilon / vocab
        np.put_along_axis(target, targets[..., None],
            np.take_along_axis(target, targets[..., None], axis=-1) - (1.0 - epsilon), axis=-1)
        return (target * (weights / total * g)[..., None],)

    return record("label_smoothed_nll", (logits,), np.asarray(loss), backward)


# operator sugar

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__rmatmul__ = lambda self, other: matmul(other, self)
Tensor.sum = sum
Tensor.mean = mean
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
