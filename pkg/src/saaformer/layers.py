"""Neural building blocks on top of :mod:`saaformer.numerics`.

All layers act on the last axis as the channel axis. Spatial layers
(:func:`conv3x3`, :func:`batch_norm`) expect ``(..., h, w, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, custom_op

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# sqrt(2 / pi), the tanh-approximation GELU constant
GELU_C = 0.7978845608028654
GELU_CUBIC = 0.044715


@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class NormParams:
    """Affine normalization parameters; running statistics only for batch norm."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------- initialisers


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True, dtype=np.float64) -> LinearParams:
    w = xavier_uniform(rng, (n_out, n_in), n_in, n_out, dtype)
    return LinearParams(w, zeros((n_out,), dtype) if bias else None)


def init_layer_norm(c: int, dtype=np.float64) -> NormParams:
    return NormParams(Tensor(np.ones(c, dtype=dtype), requires_grad=True), zeros((c,), dtype))


def init_batch_norm(c: int, dtype=np.float64) -> NormParams:
    p = init_layer_norm(c, dtype)
    p.running_mean = np.zeros(c, dtype=dtype)
    p.running_var = np.ones(c, dtype=dtype)
    return p


# ---------------------------------------------------------------- layers


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """``x @ W.T + b`` along the last axis."""
    if x.shape[-1] != p.in_features:
        raise ValueError(f"linear: input last axis {x.shape[-1]} != weight in-features {p.in_features}")
    xd, w = x.data, p.weight.data
    y = xd @ w.T
    inputs = (x, p.weight)
    if p.bias is not None:
        y = y + p.bias.data
        inputs += (p.bias,)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        grads = (g @ w, gw)
        return grads + (g.sum(axis=lead),) if p.bias is not None else grads

    return custom_op(y, inputs, backward)


def _normalize(x: np.ndarray, axes: tuple[int, ...], mean: np.ndarray, var: np.ndarray, eps: float):
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv, inv


def _affine_backward(g, xhat, inv, scale, axes, n, through_stats):
    lead = tuple(range(g.ndim - 1))
    dscale = (g * xhat).sum(axis=lead)
    dshift = g.sum(axis=lead)
    dxhat = g * scale
    if through_stats:
        dx = inv / n * (
            n * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
    else:
        dx = dxhat * inv
    return dx, dscale, dshift


def layer_norm(x: Tensor, p: NormParams, eps: float = LN_EPS) -> Tensor:
    """Normalize each position over the channel axis, then scale and shift."""
    xd = x.data
    axes = (xd.ndim - 1,)
    mean = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mean) ** 2).mean(axis=-1, keepdims=True)
    xhat, inv = _normalize(xd, axes, mean, var, eps)
    sd = p.scale.data
    n = xd.shape[-1]

    def backward(g):
        return _affine_backward(g, xhat, inv, sd, axes, n, True)

    return custom_op(xhat * sd + p.shift.data, (x, p.scale, p.shift), backward)


def batch_norm(x: Tensor, p: NormParams, training: bool, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over batch and spatial positions.

    Training mode normalizes with the batch statistics and updates the running
    estimates in place (running variance uses the unbiased batch variance).
    Eval mode normalizes with the running estimates.
    """
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    n = int(np.prod(xd.shape[:-1]))
    if training:
        if n <= 1:
            raise ValueError(f"batch_norm: training needs more than one value per channel, got shape {xd.shape}")
        mean = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mean) ** 2).mean(axis=axes, keepdims=True)
        if p.running_mean is not None:
            m = p.momentum
            p.running_mean[...] = (1 - m) * p.running_mean + m * mean.reshape(-1)
            p.running_var[...] = (1 - m) * p.running_var + m * var.reshape(-1) * n / (n - 1)
    else:
        mean = p.running_mean.reshape((1,) * len(axes) + (-1,))
        var = p.running_var.reshape((1,) * len(axes) + (-1,))
    xhat, inv = _normalize(xd, axes, mean, var, eps)
    sd = p.scale.data

    def backward(g):
        return _affine_backward(g, xhat, inv, sd, axes, n, training)

    return custom_op(xhat * sd + p.shift.data, (x, p.scale, p.shift), backward)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (N, h+2, w+2, C) -> (N, h, w, 9*C) ordered (dy, dx, c)
    return np.concatenate([xp[:, dy : dy + h, dx : dx + w, :] for dy in range(3) for dx in range(3)], axis=-1)


def conv3x3(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 3x3 cross-correlation with zero padding 1, stride 1.

    ``x`` is ``(..., h, w, Cin)``; ``kernel`` is ``(3, 3, Cin, Cout)``.
    """
    if x.ndim < 3:
        raise ValueError(f"conv3x3: expected (..., h, w, C) input, got {x.shape}")
    h, w, cin = x.shape[-3:]
    if h < 1 or w < 1:
        raise ValueError(f"conv3x3: empty spatial extent {h}x{w}")
    if kernel.shape[:3] != (3, 3, cin):
        raise ValueError(f"conv3x3: kernel {kernel.shape} does not match {cin} input channels")
    cout = kernel.shape[3]
    lead = x.shape[:-3]
    xd = x.data.reshape((-1, h, w, cin))
    xp = np.zeros((xd.shape[0], h + 2, w + 2, cin), dtype=xd.dtype)
    xp[:, 1 : h + 1, 1 : w + 1, :] = xd
    cols = _im2col(xp, h, w)
    kmat = kernel.data.reshape(9 * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g4 = g.reshape((-1, h, w, cout))
        dk = (cols.reshape(-1, 9 * cin).T @ g4.reshape(-1, cout)).reshape(kernel.shape)
        dcols = g4 @ kmat.T
        dxp = np.zeros((g4.shape[0], h + 2, w + 2, cin), dtype=g.dtype)
        for k, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
            dxp[:, dy : dy + h, dx : dx + w, :] += dcols[..., k * cin : (k + 1) * cin]
        dx_ = dxp[:, 1 : h + 1, 1 : w + 1, :].reshape(x.shape)
        grads = (dx_, dk)
        if bias is not None:
            grads += (g4.sum(axis=(0, 1, 2)),)
        return grads

    return custom_op(out.reshape(lead + (h, w, cout)), inputs, backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    xd = x.data
    u = GELU_C * (xd + GELU_CUBIC * xd**3)
    t = np.tanh(u)

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * GELU_CUBIC * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return custom_op(0.5 * xd * (1.0 + t), (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are class indices in ``[0, K)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"cross_entropy: label {bad} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return custom_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


# ---------------------------------------------------------------- optimiser


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A missing gradient counts as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: parameter list changed length between steps")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
