"""Multi-level spectral partitioning with shifted partitions.

The embedded feature map ``(N, h, w, C_e)`` is cut along the channel axis into
contiguous partitions of length ``c`` for each level. Each level runs a pair of
encoder blocks:

1. regular partitions: per partition ``LN -> attention -> +residual`` then
   ``LN -> FFN -> +residual``;
2. the same on the channel axis rotated by ``c / 2``, which makes every new
   partition straddle two old ones. The last rotated partition joins the top
   and bottom ends of the spectrum, so it is processed as two independent
   halves and nothing is ever mixed across the two ends. The rotation is
   undone afterwards.

Level outputs are averaged and layer-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import AxialAttentionParams, attention_block, init_axial_attention
from .layers import (
    LinearParams,
    NormParams,
    dropout,
    gelu,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)
from .numerics import Tensor

FFN_EXPANSION = 2


@dataclass
class ForwardMode:
    """Training flag plus the dropout rate and stream used in training."""

    training: bool = False
    dropout: float = 0.0
    rng: np.random.Generator | None = None


EVAL = ForwardMode()


@dataclass(frozen=True)
class PartitionPlan:
    embed: int
    levels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(c) for c in self.levels))
        if not self.levels:
            raise ValueError("at least one partition level is required")
        for c in self.levels:
            if c <= 0 or self.embed % c:
                raise ValueError(f"partition length {c} does not divide embed width {self.embed}")
            if c % 2:
                raise ValueError(f"partition length {c} must be even to be shifted by half")

    def regular_segments(self, c: int) -> list[tuple[int, int]]:
        return [(i * c, (i + 1) * c) for i in range(self.embed // c)]

    def wrapped_index(self, c: int) -> int:
        """Index of the rotated partition that holds both spectral ends."""
        return self.embed // c - 1

    def is_wrapped(self, c: int, index: int) -> bool:
        return index == self.wrapped_index(c)

    def shifted_segments(self, c: int) -> list[tuple[int, int]]:
        """Segments in rotated coordinates; the wrapped partition appears as two halves."""
        segs = self.regular_segments(c)
        wrapped = self.wrapped_index(c)
        return segs[:wrapped] + wrap_halves(self, c, wrapped)


def wrap_halves(plan: PartitionPlan, c: int, index: int) -> list[tuple[int, int]]:
    """Split the wrapped partition ``index`` (rotated coordinates) into its two halves.

    The halves are processed independently, which is how the wrapped
    partition is masked: channels from the upper end of the spectrum never
    interact with channels from the lower end.
    """
    if not plan.is_wrapped(c, index):
        raise ValueError(f"partition {index} at length {c} does not wrap around the spectrum")
    start = index * c
    half = c // 2
    return [(start, start + half), (start + half, start + c)]


def partition_channels(x: Tensor, c: int) -> list[Tensor]:
    total = x.shape[-1]
    if c <= 0 or total % c:
        raise ValueError(f"partition length {c} does not divide {total} channels")
    return [nm.take(x, -1, i, i + c) for i in range(0, total, c)]


def _check_shift(x: Tensor, c: int) -> None:
    if c % 2:
        raise ValueError(f"cannot shift by half of odd partition length {c}")


def shift_channels(x: Tensor, c: int) -> Tensor:
    """Rotate channels so that channel ``j`` moves to ``(j - c/2) mod C``."""
    _check_shift(x, c)
    return nm.roll(x, -(c // 2), -1)


def unshift_channels(x: Tensor, c: int) -> Tensor:
    _check_shift(x, c)
    return nm.roll(x, c // 2, -1)


@dataclass
class SegmentParams:
    norm1: NormParams
    attn: AxialAttentionParams
    norm2: NormParams
    ffn_in: LinearParams
    ffn_out: LinearParams

    @property
    def width(self) -> int:
        return self.attn.channels


@dataclass
class EncoderBlockParams:
    """Block pair for one level: regular then shifted segments."""

    length: int
    regular: list[SegmentParams]
    shifted: list[SegmentParams]


@dataclass
class StageParams:
    levels: list[EncoderBlockParams]
    norm: NormParams


def init_segment(rng, width: int, heads: int, capacity: int, dtype=np.float64) -> SegmentParams:
    hidden = FFN_EXPANSION * width
    return SegmentParams(
        norm1=init_layer_norm(width, dtype),
        attn=init_axial_attention(rng, width, heads, capacity, capacity, dtype=dtype),
        norm2=init_layer_norm(width, dtype),
        ffn_in=init_linear(rng, width, hidden, dtype=dtype),
        ffn_out=init_linear(rng, hidden, width, dtype=dtype),
    )


def init_encoder_block_pair(rng, plan: PartitionPlan, c: int, heads: int, capacity: int, dtype=np.float64):
    regular = [init_segment(rng, b - a, heads, capacity, dtype) for a, b in plan.regular_segments(c)]
    shifted = [init_segment(rng, b - a, heads, capacity, dtype) for a, b in plan.shifted_segments(c)]
    return EncoderBlockParams(c, regular, shifted)


def init_stage(rng, plan: PartitionPlan, heads: int, capacity: int, dtype=np.float64) -> StageParams:
    levels = [init_encoder_block_pair(rng, plan, c, heads, capacity, dtype) for c in plan.levels]
    return StageParams(levels, init_layer_norm(plan.embed, dtype))


def feed_forward(x: Tensor, p: SegmentParams, mode: ForwardMode) -> Tensor:
    hidden = dropout(gelu(linear(x, p.ffn_in)), mode.dropout, mode.training, mode.rng)
    return dropout(linear(hidden, p.ffn_out), mode.dropout, mode.training, mode.rng)


def segment_forward(x: Tensor, p: SegmentParams, mode: ForwardMode) -> Tensor:
    """``f' = Attn(LN(f)) + f`` followed by ``FFN(LN(f')) + f'``."""
    h = nm.add(attention_block(layer_norm(x, p.norm1), p.attn, mode.training), x)
    return nm.add(feed_forward(layer_norm(h, p.norm2), p, mode), h)


def _run_segments(x: Tensor, segments: list[tuple[int, int]], params: list[SegmentParams], mode) -> Tensor:
    if len(segments) != len(params):
        raise ValueError(f"{len(segments)} segments but {len(params)} parameter sets")
    outs = []
    for (a, b), sp in zip(segments, params):
        if sp.width != b - a:
            raise ValueError(f"segment [{a}, {b}) has width {b - a}, parameters expect {sp.width}")
        outs.append(segment_forward(nm.take(x, -1, a, b), sp, mode))
    return nm.concat(outs, -1)


def encoder_block_pair(f: Tensor, p: EncoderBlockParams, plan: PartitionPlan, mode: ForwardMode = EVAL) -> Tensor:
    c = p.length
    if c not in plan.levels:
        raise ValueError(f"level length {c} is not part of the plan {plan.levels}")
    if f.shape[-1] != plan.embed:
        raise ValueError(f"feature map has {f.shape[-1]} channels, plan expects {plan.embed}")
    f = _run_segments(f, plan.regular_segments(c), p.regular, mode)
    g = _run_segments(shift_channels(f, c), plan.shifted_segments(c), p.shifted, mode)
    return unshift_channels(g, c)


def multi_level_forward(x: Tensor, p: StageParams, plan: PartitionPlan, mode: ForwardMode = EVAL) -> Tensor:
    if not p.levels:
        raise ValueError("multi-level stage has no levels")
    outs = [encoder_block_pair(x, lp, plan, mode) for lp in p.levels]
    total = outs[0]
    for o in outs[1:]:
        total = nm.add(total, o)
    return layer_norm(nm.scale(total, 1.0 / len(outs)), p.norm)
