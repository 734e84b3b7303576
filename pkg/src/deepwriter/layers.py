"""Forward and backward passes for the layer types of the network.

Batched images are ``(C, H, W, N)`` (batch innermost) and feature vectors
``(N, D)``. Each ``*_forward`` returns ``(out, cache)`` and the matching
``*_backward`` consumes the cache. Single-sample callers can use the
unbatched wrappers ``conv2d``/``maxpool2d``/``fully_connected``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

_CONV_RE = re.compile(r"^(\d+)C(\d+)(?:S(\d+))?(?:P(\d+))?$")
_POOL_RE = re.compile(r"^M(\d+)(?:S(\d+))?$")


@dataclass(frozen=True)
class ConvSpec:
    """Convolution in ``αCβSσPθ`` notation."""

    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise DomainError(f"invalid convolution {self}")

    @classmethod
    def parse(cls, text: str) -> "ConvSpec":
        """Parse notation such as ``96C5S2`` or ``256C3S1P1``."""
        m = _CONV_RE.match(text.strip())
        if not m:
            raise DomainError(f"cannot parse convolution notation {text!r}")
        a, b, s, p = m.groups()
        return cls(int(a), int(b), int(s or 1), int(p or 0))

    def __str__(self) -> str:
        s = f"{self.out_channels}C{self.kernel}S{self.stride}"
        return s + (f"P{self.padding}" if self.padding else "")

    def output_side(self, side: int) -> int:
        padded = side + 2 * self.padding
        if padded < self.kernel:
            raise ShapeError(
                f"kernel {self.kernel} larger than padded input {padded} for {self}")
        return (padded - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class PoolSpec:
    """Max-pooling in ``MβSσ`` notation."""

    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise DomainError(f"invalid pooling {self}")

    @classmethod
    def parse(cls, text: str) -> "PoolSpec":
        m = _POOL_RE.match(text.strip())
        if not m:
            raise DomainError(f"cannot parse pooling notation {text!r}")
        b, s = m.groups()
        return cls(int(b), int(s or b))

    def __str__(self) -> str:
        return f"M{self.window}S{self.stride}"

    def output_side(self, side: int) -> int:
        if side < self.window:
            raise ShapeError(f"pool window {self.window} larger than input {side}")
        return (side - self.window) // self.stride + 1


@dataclass
class LayerParams:
    """Weights and biases of one conv or fully-connected layer.

    Conv weights are ``(out, in, k, k)``; fully-connected weights ``(out, in)``.
    """

    weights: np.ndarray
    biases: np.ndarray
    lr_mult: float = 1.0

    def __post_init__(self):
        if self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias dims {list(self.biases.shape)} do not match "
                f"{self.weights.shape[0]} outputs")
        if self.lr_mult <= 0:
            raise DomainError("lr_mult must be positive")

    @property
    def size(self) -> int:
        return int(self.weights.size + self.biases.size)


# -- convolution ---------------------------------------------------------------
# Batched spatial tensors use the (C, H, W, N) layout: the batch is the
# innermost axis so every strided window slice moves N contiguous values.

def conv2d_forward(x: np.ndarray, params: LayerParams, spec: ConvSpec):
    c, h, w, n = x.shape
    f, wc, k, _ = params.weights.shape
    if c != wc:
        raise ShapeError(f"conv input has {c} channels, weights expect {wc}")
    if k != spec.kernel or f != spec.out_channels:
        raise ShapeError(f"weights {list(params.weights.shape)} do not match {spec}")
    ho, wo = spec.output_side(h), spec.output_side(w)
    s, p = spec.stride, spec.padding
    if p:
        xp = np.zeros((c, h + 2 * p, w + 2 * p, n), dtype=x.dtype)
        xp[:, p:p + h, p:p + w] = x
    else:
        xp = x

    # cols[c, i, j, y, x, n] = xp[c, i + s*y, j + s*x, n]
    cols = np.empty((c, k, k, ho, wo, n), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + s * ho:s, j:j + s * wo:s]
    cols = cols.reshape(c * k * k, ho * wo * n)
    out = params.weights.reshape(f, -1) @ cols
    out += params.biases[:, None]
    return out.reshape(f, ho, wo, n), (x.shape, cols, params, spec)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Return ``(dx, dweights, dbiases)``; ``dx`` is None when not needed."""
    x_shape, cols, params, spec = cache
    c, h, w, n = x_shape
    f, _, k, _ = params.weights.shape
    s, p = spec.stride, spec.padding
    ho, wo = dout.shape[1], dout.shape[2]

    d2 = dout.reshape(f, -1)
    dw = (d2 @ cols.T).reshape(params.weights.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (params.weights.reshape(f, -1).T @ d2).reshape(c, k, k, ho, wo, n)
    dxp = np.zeros((c, h + 2 * p, w + 2 * p, n), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
    dx = dxp[:, p:p + h, p:p + w] if p else dxp
    return np.ascontiguousarray(dx), dw, db


# -- max pooling ---------------------------------------------------------------

def maxpool2d_forward(x: np.ndarray, spec: PoolSpec):
    c, h, w, n = x.shape
    ho, wo = spec.output_side(h), spec.output_side(w)
    k, s = spec.window, spec.stride
    out = x[:, 0:s * ho:s, 0:s * wo:s].copy()
    arg = np.zeros(out.shape, dtype=np.int8 if k * k < 128 else np.int32)
    for i in range(k):
        for j in range(k):
            if i == j == 0:
                continue
            cand = x[:, i:i + s * ho:s, j:j + s * wo:s]
            # Strict comparison keeps the first maximum in row-major window order.
            better = cand > out
            np.copyto(out, cand, where=better)
            np.copyto(arg, i * k + j, where=better)
    return out, (x.shape, arg, spec)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, arg, spec = cache
    k, s = spec.window, spec.stride
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            routed = np.where(arg == i * k + j, dout, 0)
            dx[:, i:i + s * ho:s, j:j + s * wo:s] += routed
    return dx


# -- fully connected -----------------------------------------------------------

def fc_forward(x: np.ndarray, params: LayerParams):
    if x.ndim != 2 or x.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"fully-connected input dims {list(x.shape)} do not match "
            f"weights {list(params.weights.shape)}")
    out = x @ params.weights.T + params.biases
    return out, (x, params)


def fc_backward(dout: np.ndarray, cache):
    x, params = cache
    return dout @ params.weights, dout.T @ x, dout.sum(axis=0)


# -- activations, dropout ------------------------------------------------------

def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Gradient is blocked where the input is exactly zero.
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


def dropout_forward(x: np.ndarray, ratio: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not 0 <= ratio < 1:
        raise DomainError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if not train or ratio == 0:
        return x, None
    if rng is None:
        raise DomainError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= ratio
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - ratio))
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask) -> np.ndarray:
    return dout if mask is None else dout * mask


# -- loss ----------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch.

    Accepts ``(K,)`` logits with a scalar label or ``(N, K)`` logits with N
    labels. Returns ``(probabilities, loss, dlogits)`` where ``dlogits`` is
    the gradient of the mean loss, i.e. ``(p - onehot) / N``.
    """
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if k < 2:
        raise DomainError("softmax needs at least two classes")
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    probs = np.exp(log_p)
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    grad /= n
    if single:
        return probs[0], loss, grad[0]
    return probs, loss, grad


# -- single-sample wrappers ----------------------------------------------------

def conv2d(x: np.ndarray, spec: ConvSpec, params: LayerParams) -> np.ndarray:
    """Forward convolution of one ``(C, H, W)`` tensor."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects [C, H, W], got {list(x.shape)}")
    return conv2d_forward(x[..., None], params, spec)[0][..., 0]


def maxpool2d(x: np.ndarray, spec: PoolSpec) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d expects [C, H, W], got {list(x.shape)}")
    return maxpool2d_forward(x[..., None], spec)[0][..., 0]


def fully_connected(x: np.ndarray, params: LayerParams) -> np.ndarray:
    if x.ndim != 1:
        raise ShapeError(f"fully_connected expects a rank-1 input, got {list(x.shape)}")
    return fc_forward(x[None], params)[0][0]
