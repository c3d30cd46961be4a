"""Spectral-spatial axial aggregation attention.

Queries, keys and values are max-squeezed onto the row axis and the column
axis. Each pixel ``(i, j)`` receives the sum of a row term (row ``i``
attending over all rows) and a column term (column ``j`` attending over all
columns), with learnable per-position offsets added to queries, keys and
values. A parallel 3x3 conv + batch-norm path restores local spatial detail
and is summed with the attention output.

Inputs are batched: ``(N, h, w, c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .layers import (
    LinearParams,
    NormParams,
    batch_norm,
    conv3x3,
    init_batch_norm,
    init_linear,
    linear,
    xavier_uniform,
    zeros,
)
from .numerics import Tensor


@dataclass
class AxialAttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    r_q_row: Tensor  # (h_max, C_qkv)
    r_k_row: Tensor
    r_v_row: Tensor
    r_q_col: Tensor  # (w_max, C_qkv)
    r_k_col: Tensor
    r_v_col: Tensor
    aux_kernel: Tensor  # (3, 3, c, c)
    aux_bias: Tensor
    aux_norm: NormParams
    heads: int = 1

    @property
    def channels(self) -> int:
        return self.q.in_features

    @property
    def qkv_channels(self) -> int:
        return self.q.out_features

    @property
    def max_rows(self) -> int:
        return self.r_q_row.shape[0]

    @property
    def max_cols(self) -> int:
        return self.r_q_col.shape[0]


def init_axial_attention(
    rng: np.random.Generator,
    channels: int,
    heads: int,
    max_rows: int,
    max_cols: int,
    qkv_channels: int | None = None,
    dtype=np.float64,
) -> AxialAttentionParams:
    cq = channels if qkv_channels is None else qkv_channels
    if cq % heads:
        raise ValueError(f"{heads} heads do not divide {cq} attention channels")
    return AxialAttentionParams(
        q=init_linear(rng, channels, cq, bias=False, dtype=dtype),
        k=init_linear(rng, channels, cq, bias=False, dtype=dtype),
        v=init_linear(rng, channels, cq, bias=False, dtype=dtype),
        out=init_linear(rng, cq, channels, dtype=dtype),
        r_q_row=zeros((max_rows, cq), dtype),
        r_k_row=zeros((max_rows, cq), dtype),
        r_v_row=zeros((max_rows, cq), dtype),
        r_q_col=zeros((max_cols, cq), dtype),
        r_k_col=zeros((max_cols, cq), dtype),
        r_v_col=zeros((max_cols, cq), dtype),
        aux_kernel=xavier_uniform(rng, (3, 3, channels, channels), 9 * channels, 9 * channels, dtype),
        aux_bias=zeros((channels,), dtype),
        aux_norm=init_batch_norm(channels, dtype),
        heads=heads,
    )


def axial_squeeze(t: Tensor) -> tuple[Tensor, Tensor]:
    """Max over columns and over rows: ``(N, h, w, C) -> ((N, h, C), (N, w, C))``."""
    return nm.reduce_max_axis(t, 2, keepdims=False), nm.reduce_max_axis(t, 1, keepdims=False)


def _positional(t: Tensor, table: Tensor) -> Tensor:
    """Add the first ``length`` rows of a per-position table to ``(N, length, C)``."""
    length = t.shape[1]
    rows = table if length == table.shape[0] else nm.take(table, 0, 0, length)
    return nm.add_bias(t, rows)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, length, c = t.shape
    return nm.transpose(nm.reshape(t, (n, length, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    n, heads, length, d = t.shape
    return nm.reshape(nm.transpose(t, (0, 2, 1, 3)), (n, length, heads * d))


def _axis_attention(q, k, v, rq, rk, rv, heads: int) -> Tensor:
    # one axis: softmax_p((q_i + rq_i) . (k_p + rk_p) / sqrt(d)) (v_p + rv_p)
    d = q.shape[-1] // heads
    qh = _split_heads(_positional(q, rq), heads)
    kh = _split_heads(_positional(k, rk), heads)
    vh = _split_heads(_positional(v, rv), heads)
    logits = nm.scale(nm.matmul(qh, nm.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    weights = nm.softmax_axis(logits, -1)
    return _merge_heads(nm.matmul(weights, vh))


def axial_aggregation_attention(x: Tensor, p: AxialAttentionParams) -> Tensor:
    """Position-aware axial aggregation attention, ``(N, h, w, c) -> (N, h, w, c)``."""
    if x.ndim != 4:
        raise ValueError(f"expected (N, h, w, c) input, got {x.shape}")
    n, h, w, c = x.shape
    if c != p.channels:
        raise ValueError(f"input has {c} channels, attention expects {p.channels}")
    if h > p.max_rows or w > p.max_cols:
        raise ValueError(
            f"sample extent {h}x{w} exceeds positional capacity {p.max_rows}x{p.max_cols}"
        )
    q_row, q_col = axial_squeeze(linear(x, p.q))
    k_row, k_col = axial_squeeze(linear(x, p.k))
    v_row, v_col = axial_squeeze(linear(x, p.v))

    row = _axis_attention(q_row, k_row, v_row, p.r_q_row, p.r_k_row, p.r_v_row, p.heads)
    col = _axis_attention(q_col, k_col, v_col, p.r_q_col, p.r_k_col, p.r_v_col, p.heads)
    # row term is shared along each row, column term along each column
    fused = nm.add(nm.broadcast_axis(row, 2, w), nm.broadcast_axis(col, 1, h))
    return linear(fused, p.out)


def aux_spatial_path(x: Tensor, p: AxialAttentionParams, training: bool) -> Tensor:
    return batch_norm(conv3x3(x, p.aux_kernel, p.aux_bias), p.aux_norm, training)


def fuse(attn: Tensor, aux: Tensor) -> Tensor:
    if attn.shape != aux.shape:
        raise ValueError(f"fuse: shape mismatch {attn.shape} vs {aux.shape}")
    return nm.add(attn, aux)


def attention_block(x: Tensor, p: AxialAttentionParams, training: bool) -> Tensor:
    """Attention output fused with the auxiliary spatial path."""
    return fuse(axial_aggregation_attention(x, p), aux_spatial_path(x, p, training))
