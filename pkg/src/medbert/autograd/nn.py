"""Neural-network ops on :class:`Tensor`: normalisation, attention pieces, losses."""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, ShapeError, VocabRangeError
from .tensor import IndexedGrad, Tensor, make_node

MASK_VALUE = -1e9


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` then apply gain and bias."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs axis size {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd, bd = gain.data.reshape(bshape), bias.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axis, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        dgain = (g * xhat).sum(axis=other) if gain.requires_grad else None
        dbias = g.sum(axis=other) if bias.requires_grad else None
        return dx, dgain, dbias

    return make_node(out, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity unless ``train`` and ``rate > 0``."""
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabRangeError(
            f"ids in [{ids.min()}, {ids.max()}] outside table of {table.shape[0]} rows"
        )
    return make_node(
        table.data[ids], (table,), lambda g: (IndexedGrad(ids, g, True),), "embedding"
    )


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of integer ``targets`` under ``logits`` [N, C].

    A 1-d ``logits`` with a scalar target is treated as a batch of one.
    """
    targets = np.atleast_1d(np.asarray(targets))
    if logits.ndim == 1:
        from .tensor import reshape

        logits = reshape(logits, (1, -1))
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(len(targets))
    nll = (np.log(s[:, 0]) + m[:, 0]) - x[rows, targets]
    n = len(targets)

    def backward(g):
        p = e / s
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return make_node(np.asarray(nll.mean(), dtype=x.dtype), (logits,), backward, "cross_entropy")


def binary_cross_entropy_logit(logit: Tensor, labels) -> Tensor:
    """Mean logistic loss, stable for large ``|logit|``."""
    x = logit.data
    y = np.broadcast_to(np.asarray(labels, dtype=x.dtype), x.shape)
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = max(x.size, 1)

    def backward(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((sig - y) * (g / n),)

    return make_node(np.asarray(loss.mean(), dtype=x.dtype), (logit,), backward, "bce_logit")
