"""Straight-line reference transcriptions used as test oracles.

Everything here works on one sample at a time with plain numpy arrays and,
for the attention formula, Python scalar loops. None of it touches the
tensor/tape machinery, so it checks the library independently.
"""

import math

import numpy as np

EPS = 1e-5


def arr(t):
    return np.asarray(t.data if hasattr(t, "data") else t, dtype=np.float64)


def ref_linear(x, p):
    y = x @ arr(p.weight).T
    return y + arr(p.bias) if p.bias is not None else y


def ref_layer_norm(x, p):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * arr(p.scale) + arr(p.shift)


def ref_batch_norm_eval(x, p):
    return (x - p.running_mean) / np.sqrt(p.running_var + EPS) * arr(p.scale) + arr(p.shift)


def ref_conv3x3(x, kernel, bias=None):
    """Five nested loops over (i, j, out channel, dy, dx) plus the input channel sum."""
    h, w, cin = x.shape
    cout = kernel.shape[3]
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = 0.0 if bias is None else float(bias[o])
                for dy in range(3):
                    for dx in range(3):
                        ii, jj = i + dy - 1, j + dx - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += float(np.dot(x[ii, jj, :], kernel[dy, dx, :, o]))
                out[i, j, o] = acc
    return out


def ref_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def ref_axial_attention(x, p):
    """Scalar-by-scalar transcription of the position-aware axial aggregation formula.

    h[i, j] = sum_p softmax_p((q_row_i + rq_i) . (k_row_p + rk_p) / sqrt(d)) (v_row_p + rv_p)
            + sum_p softmax_p((q_col_j + rq_j) . (k_col_p + rk_p) / sqrt(d)) (v_col_p + rv_p)
    """
    h, w, _ = x.shape
    q = x @ arr(p.q.weight).T
    k = x @ arr(p.k.weight).T
    v = x @ arr(p.v.weight).T
    cq = q.shape[-1]
    heads = p.heads
    d = cq // heads
    tables = {n: arr(getattr(p, n)) for n in ("r_q_row", "r_k_row", "r_v_row", "r_q_col", "r_k_col", "r_v_col")}

    def squeeze_rows(t):  # max over columns
        return [[max(t[i, j, ch] for j in range(w)) for ch in range(cq)] for i in range(h)]

    def squeeze_cols(t):  # max over rows
        return [[max(t[i, j, ch] for i in range(h)) for ch in range(cq)] for j in range(w)]

    def attend(qs, ks, vs, rq, rk, rv, n):
        out = [[0.0] * cq for _ in range(n)]
        for m in range(heads):
            chans = range(m * d, (m + 1) * d)
            for a in range(n):
                logits = []
                for b in range(n):
                    s = 0.0
                    for ch in chans:
                        s += (qs[a][ch] + rq[a, ch]) * (ks[b][ch] + rk[b, ch])
                    logits.append(s / math.sqrt(d))
                top = max(logits)
                ex = [math.exp(z - top) for z in logits]
                tot = sum(ex)
                for ch in chans:
                    out[a][ch] = sum(ex[b] / tot * (vs[b][ch] + rv[b, ch]) for b in range(n))
        return out

    row = attend(squeeze_rows(q), squeeze_rows(k), squeeze_rows(v),
                 tables["r_q_row"], tables["r_k_row"], tables["r_v_row"], h)
    col = attend(squeeze_cols(q), squeeze_cols(k), squeeze_cols(v),
                 tables["r_q_col"], tables["r_k_col"], tables["r_v_col"], w)
    fused = np.array([[[row[i][ch] + col[j][ch] for ch in range(cq)] for j in range(w)] for i in range(h)])
    return ref_linear(fused, p.out)


def ref_attention_block(x, p):
    aux = ref_batch_norm_eval(ref_conv3x3(x, arr(p.aux_kernel), arr(p.aux_bias)), p.aux_norm)
    return ref_axial_attention(x, p) + aux


def ref_segment(x, sp):
    h1 = ref_attention_block(ref_layer_norm(x, sp.norm1), sp.attn) + x
    ffn = ref_linear(ref_gelu(ref_linear(ref_layer_norm(h1, sp.norm2), sp.ffn_in)), sp.ffn_out)
    return ffn + h1


def ref_block_pair(f, bp, embed):
    """Regular partitions, then the half-rotated partitions written back by channel index."""
    c = bp.length
    n_parts = embed // c
    g = np.empty_like(f)
    for i in range(n_parts):
        chans = list(range(i * c, (i + 1) * c))
        g[..., chans] = ref_segment(f[..., chans], bp.regular[i])
    out = np.empty_like(g)
    half = c // 2
    # rotated partition i holds original channels (i*c + half + t) mod embed, t in [0, c)
    groups = []
    for i in range(n_parts):
        chans = [(i * c + half + t) % embed for t in range(c)]
        if i == n_parts - 1:
            groups += [chans[:half], chans[half:]]
        else:
            groups.append(chans)
    for chans, sp in zip(groups, bp.shifted):
        out[..., chans] = ref_segment(g[..., chans], sp)
    return out


def ref_stage(f, stage, embed):
    outs = [ref_block_pair(f, bp, embed) for bp in stage.levels]
    return ref_layer_norm(sum(outs) / len(outs), stage.norm)


def ref_forward_one(x, params, embed):
    f = ref_linear(x, params.embed)
    for stage in params.stages:
        f = ref_stage(f, stage, embed)
    f = ref_layer_norm(f, params.head_norm)
    return ref_linear(f.reshape(-1, embed).mean(0), params.head)
