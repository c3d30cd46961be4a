import math

import numpy as np
import pytest

from saaformer import numerics as nm
from saaformer.attention import (
    attention_block,
    aux_spatial_path,
    axial_aggregation_attention,
    axial_squeeze,
    fuse,
    init_axial_attention,
)
from saaformer.layers import init_batch_norm
from saaformer.numerics import Tape, Tensor, grad_check

from helpers import randomize
from reference import ref_attention_block, ref_axial_attention, ref_batch_norm_eval, ref_conv3x3

POSITIONAL = ("r_q_row", "r_k_row", "r_v_row", "r_q_col", "r_k_col", "r_v_col")


def make(seed, c=4, heads=2, cap=5, random_pos=True):
    r = np.random.default_rng(seed)
    p = init_axial_attention(r, c, heads, cap, cap)
    randomize(p, r)
    if not random_pos:
        for name in POSITIONAL:
            getattr(p, name).data[...] = 0.0
    return p


def scalar_loss(y, seed=0):
    w = Tensor(np.random.default_rng(seed + 99).normal(size=y.shape))
    return nm.sum_axis(nm.reshape(nm.mul(y, w), (-1,)), 0)


# ---------------------------------------------------------------- squeeze


def test_squeeze_single_pixel_is_identity(rng):
    x = rng.normal(size=(1, 1, 1, 3))
    rows, cols = axial_squeeze(Tensor(x))
    assert np.array_equal(rows.data[0, 0], x[0, 0, 0])
    assert np.array_equal(cols.data[0, 0], x[0, 0, 0])


def test_squeeze_constant_map():
    rows, cols = axial_squeeze(Tensor(np.full((1, 3, 4, 2), 0.7)))
    assert rows.shape == (1, 3, 2) and cols.shape == (1, 4, 2)
    assert np.all(rows.data == 0.7) and np.all(cols.data == 0.7)


def test_squeeze_matches_scan(rng):
    x = rng.normal(size=(2, 3, 1))
    rows, cols = axial_squeeze(Tensor(x[None]))
    for i in range(2):
        best = x[i, 0, 0]
        for j in range(1, 3):
            best = x[i, j, 0] if x[i, j, 0] > best else best
        assert rows.data[0, i, 0] == best
    for j in range(3):
        best = x[0, j, 0] if x[0, j, 0] > x[1, j, 0] else x[1, j, 0]
        assert cols.data[0, j, 0] == best


# ---------------------------------------------------------------- attention


def test_single_position_reduces_to_values():
    p = make(0)
    x = np.random.default_rng(1).normal(size=(1, 1, 1, 4))
    v = x[0, 0, 0] @ p.v.weight.data.T
    fused = (v + p.r_v_row.data[0]) + (v + p.r_v_col.data[0])
    expected = fused @ p.out.weight.data.T + p.out.bias.data
    got = axial_aggregation_attention(Tensor(x), p).data[0, 0, 0]
    assert np.allclose(got, expected, atol=1e-13)


def test_constant_input_gives_constant_output():
    p = make(1, random_pos=False)
    x = np.broadcast_to(np.random.default_rng(2).normal(size=4), (2, 3, 4, 4)).copy()
    out = axial_aggregation_attention(Tensor(x), p).data
    assert np.allclose(out, out[:, :1, :1, :], atol=1e-13)


def test_two_by_two_single_head_hand_weights():
    p = init_axial_attention(np.random.default_rng(0), 1, 1, 2, 2)
    p.q.weight.data[...] = 0.8
    p.k.weight.data[...] = -1.3
    p.v.weight.data[...] = 2.0
    p.out.weight.data[...] = 0.5
    p.out.bias.data[...] = 0.1
    p.r_q_row.data[:] = [[0.2], [-0.1]]
    p.r_k_col.data[:] = [[0.3], [0.0]]
    p.r_v_row.data[:] = [[1.0], [-1.0]]
    x = np.array([[[0.5], [-1.0]], [[2.0], [0.25]]])
    got = axial_aggregation_attention(Tensor(x[None]), p).data[0]

    # hand transcription: project, then squeeze rows (max over columns) and columns (max over rows)
    def axis(axis_of_max, rq, rk, rv):
        q, k, v = (np.max(wt * x[..., 0], axis=axis_of_max) for wt in (0.8, -1.3, 2.0))
        q, k, v = q + rq, k + rk, v + rv
        out = []
        for a in range(2):
            e = [math.exp(q[a] * k[b]) for b in range(2)]
            out.append(sum(e[b] / sum(e) * v[b] for b in range(2)))
        return out

    rows = axis(1, np.array([0.2, -0.1]), np.zeros(2), np.array([1.0, -1.0]))
    cols = axis(0, np.zeros(2), np.array([0.3, 0.0]), np.zeros(2))
    expected = np.array([[[0.5 * (rows[i] + cols[j]) + 0.1] for j in range(2)] for i in range(2)])
    assert np.allclose(got, expected, atol=1e-14)
    assert np.allclose(got, ref_axial_attention(x, p), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_scalar_oracle(seed):
    p = make(seed, c=6, heads=3, cap=4)
    x = np.random.default_rng(seed + 10).normal(size=(2, 3, 4, 6))
    got = axial_aggregation_attention(Tensor(x), p).data
    for n in range(2):
        assert np.allclose(got[n], ref_axial_attention(x[n], p), atol=1e-12)


def test_attention_weights_sum_to_one():
    # uniform values make every term equal the mean value; a non-normalised weight would scale it
    p = make(3, c=2, heads=1, random_pos=False)
    p.v.weight.data[...] = 0.0
    p.r_v_row.data[...] = 1.0
    p.r_v_col.data[...] = 1.0
    p.out.weight.data[...] = np.eye(2)
    p.out.bias.data[...] = 0.0
    x = np.random.default_rng(4).normal(size=(1, 3, 3, 2))
    assert np.allclose(axial_aggregation_attention(Tensor(x), p).data, 2.0, atol=1e-14)


def test_column_permutation_equivariance():
    p = make(5, random_pos=False)
    x = np.random.default_rng(6).normal(size=(2, 3, 5, 4))
    perm = np.array([3, 0, 4, 1, 2])
    base = axial_aggregation_attention(Tensor(x), p).data
    moved = axial_aggregation_attention(Tensor(x[:, :, perm]), p).data
    assert np.allclose(moved, base[:, :, perm], atol=1e-13)


def test_capacity_exceeded():
    p = make(0, cap=3)
    with pytest.raises(ValueError, match="capacity"):
        axial_aggregation_attention(Tensor(np.zeros((1, 4, 3, 4))), p)


def test_heads_must_divide_channels():
    with pytest.raises(ValueError):
        init_axial_attention(np.random.default_rng(0), 6, 4, 3, 3)


# ---------------------------------------------------------------- aux path and fusion


def test_aux_delta_kernel_identity():
    p = make(0, c=3, heads=1)
    p.aux_kernel.data[...] = 0.0
    for c in range(3):
        p.aux_kernel.data[1, 1, c, c] = 1.0
    p.aux_bias.data[...] = 0.0
    p.aux_norm = init_batch_norm(3)
    x = np.random.default_rng(1).normal(size=(2, 3, 3, 3))
    out = aux_spatial_path(Tensor(x), p, training=False).data
    assert np.allclose(out, x / math.sqrt(1 + 1e-5), atol=1e-15)


def test_aux_zero_kernel_is_affine_of_bias():
    p = make(1, c=3, heads=1)
    p.aux_kernel.data[...] = 0.0
    out = aux_spatial_path(Tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 3))), p, False).data
    expected = ref_batch_norm_eval(p.aux_bias.data, p.aux_norm)
    assert np.allclose(out, np.broadcast_to(expected, out.shape), atol=1e-14)


def test_aux_matches_composed_oracle():
    p = make(2, c=3, heads=1)
    x = np.random.default_rng(3).normal(size=(2, 4, 3, 3))
    out = aux_spatial_path(Tensor(x), p, False).data
    for n in range(2):
        ref = ref_batch_norm_eval(ref_conv3x3(x[n], p.aux_kernel.data, p.aux_bias.data), p.aux_norm)
        assert np.allclose(out[n], ref, atol=1e-12)


def test_fuse(rng):
    a = rng.normal(size=(1, 2, 2, 3))
    assert np.array_equal(fuse(Tensor(a), Tensor(np.zeros_like(a))).data, a)
    assert np.array_equal(fuse(Tensor(a), Tensor(a)).data, 2 * a)
    b = rng.normal(size=a.shape)
    assert np.array_equal(fuse(Tensor(a), Tensor(b)).data, a + b)
    with pytest.raises(ValueError):
        fuse(Tensor(a), Tensor(np.zeros((1, 2, 2, 2))))


def test_block_matches_oracle():
    p = make(7, c=4, heads=2)
    x = np.random.default_rng(8).normal(size=(2, 3, 3, 4))
    out = attention_block(Tensor(x), p, training=False).data
    for n in range(2):
        assert np.allclose(out[n], ref_attention_block(x[n], p), atol=1e-12)


# ---------------------------------------------------------------- gradients


def _params(p):
    names = ["q", "k", "v"]
    out = [getattr(p, n).weight for n in names] + [p.out.weight, p.out.bias]
    out += [getattr(p, n) for n in POSITIONAL]
    return out + [p.aux_kernel, p.aux_bias, p.aux_norm.scale, p.aux_norm.shift]


@pytest.mark.parametrize("seed", range(10))
def test_block_gradient_eval(seed):
    p = make(seed, c=4, heads=2, cap=4)
    x = Tensor(np.random.default_rng(seed + 20).normal(size=(2, 3, 4, 4)))
    res = grad_check(lambda _: scalar_loss(attention_block(x, p, False), seed), [x] + _params(p))
    assert res.max_rel_error < 1e-5, str(res)


@pytest.mark.parametrize("seed", range(3))
def test_block_gradient_training(seed):
    p = make(seed, c=4, heads=2, cap=4)
    x = Tensor(np.random.default_rng(seed + 30).normal(size=(2, 3, 4, 4)))
    tensors = [x] + [t for t in _params(p) if t is not p.aux_bias]
    res = grad_check(lambda _: scalar_loss(attention_block(x, p, True), seed), tensors)
    assert res.max_rel_error < 1e-5, str(res)

    # batch statistics remove a per-channel constant: the conv bias gets no gradient
    p.aux_bias.requires_grad = True
    with Tape() as tape:
        loss = scalar_loss(attention_block(x, p, True), seed)
    tape.backward(loss)
    assert np.abs(p.aux_bias.grad).max() < 1e-12
