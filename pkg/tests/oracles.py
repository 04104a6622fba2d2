"""Independent scalar-loop reference implementations.

Everything here is written with explicit Python loops over plain floats so it
shares no code path with the vectorised library.
"""

from __future__ import annotations

import math

import numpy as np


def gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def layer_norm_row(row, gain, bias, eps=1e-6):
    n = len(row)
    mu = sum(row) / n
    var = sum((v - mu) ** 2 for v in row) / n
    return [(row[i] - mu) / math.sqrt(var + eps) * gain[i] + bias[i] for i in range(n)]


def vec_mat(v, w, b=None):
    """Row vector ``v`` times matrix ``w`` [in, out], plus bias."""
    out = []
    for j in range(len(w[0])):
        s = 0.0 if b is None else b[j]
        for i in range(len(v)):
            s += v[i] * w[i][j]
        out.append(s)
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def _coord(i, n_in, n_out):
    """Source coordinate of target index ``i`` under corner alignment."""
    if n_in == 1 or n_out == 1:
        return 0, 0, 0.0
    pos = i * (n_in - 1) / (n_out - 1)
    lo = min(int(math.floor(pos)), n_in - 2)
    return lo, lo + 1, pos - lo


def interp_weights(i, n_in, n_out):
    """List of (source index, weight) for one target index."""
    lo, hi, f = _coord(i, n_in, n_out)
    if n_in == 1:
        return [(0, 1.0)]
    return [(lo, 1.0 - f), (hi, f)]


def upsample_grid(x, out_h, out_w):
    """x: nested [H][W][C] -> [out_h][out_w][C]."""
    h, w, c = len(x), len(x[0]), len(x[0][0])
    out = [[[0.0] * c for _ in range(out_w)] for _ in range(out_h)]
    for i in range(out_h):
        for j in range(out_w):
            for a, wa in interp_weights(i, h, out_h):
                for b, wb in interp_weights(j, w, out_w):
                    for k in range(c):
                        out[i][j][k] += wa * wb * x[a][b][k]
    return out


def extract_patches(image, grid_h, grid_w, p):
    """image [C][H][W] -> list of patch vectors, row-major patches, channel-major pixels."""
    c = len(image)
    patches = []
    for gy in range(grid_h):
        for gx in range(grid_w):
            v = []
            for ch in range(c):
                for dy in range(p):
                    for dx in range(p):
                        v.append(image[ch][gy * p + dy][gx * p + dx])
            patches.append(v)
    return patches


def _np(t):
    return np.asarray(t.data if hasattr(t, "data") else t).tolist()


def msa(z, layer, heads, injected=None):
    """z [B][N][D]; returns (out, logits[B][H][N][N])."""
    g1, b1 = _np(layer.ln1_gain), _np(layer.ln1_bias)
    wq, bq, wk, bk = _np(layer.w_q), _np(layer.b_q), _np(layer.w_k), _np(layer.b_k)
    wv, bv, wo, bo = _np(layer.w_v), _np(layer.b_v), _np(layer.w_o), _np(layer.b_o)
    inj = None if injected is None else _np(injected)
    out, all_logits = [], []
    for bi, seq in enumerate(z):
        n, d = len(seq), len(seq[0])
        dh = d // heads
        h = [layer_norm_row(t, g1, b1) for t in seq]
        q = [vec_mat(t, wq, bq) for t in h]
        k = [vec_mat(t, wk, bk) for t in h]
        v = [vec_mat(t, wv, bv) for t in h]
        concat = [[0.0] * d for _ in range(n)]
        logits_b = []
        for hd in range(heads):
            lo = hd * dh
            lg = [
                [sum(q[i][lo + e] * k[j][lo + e] for e in range(dh)) / math.sqrt(dh) for j in range(n)]
                for i in range(n)
            ]
            logits_b.append(lg)
            for i in range(n):
                row = [lg[i][j] + (inj[bi][hd][i][j] if inj is not None else 0.0) for j in range(n)]
                a = softmax_row(row)
                for e in range(dh):
                    concat[i][lo + e] = sum(a[j] * v[j][lo + e] for j in range(n))
        proj = [vec_mat(t, wo, bo) for t in concat]
        out.append([[seq[i][e] + proj[i][e] for e in range(d)] for i in range(n)])
        all_logits.append(logits_b)
    return out, all_logits


def mlp(z, layer, context=None, context_norm="split"):
    g, bb = _np(layer.ln2_gain), _np(layer.ln2_bias)
    w1, b1, w2, b2 = _np(layer.w_fc1), _np(layer.b_fc1), _np(layer.w_fc2), _np(layer.b_fc2)
    ctx = None if context is None else _np(context)
    out = []
    for bi, seq in enumerate(z):
        rows = []
        for i, t in enumerate(seq):
            d = len(t)
            if ctx is None:
                h = layer_norm_row(t, g, bb)
            elif context_norm == "joint":
                h = layer_norm_row(t + ctx[bi][i], g, bb)
            else:
                h = layer_norm_row(t, g[:d], bb[:d]) + layer_norm_row(ctx[bi][i], g[d:], bb[d:])
            hid = [gelu(x) for x in vec_mat(h, w1, b1)]
            y = vec_mat(hid, w2, b2)
            rows.append([t[e] + y[e] for e in range(d)])
        out.append(rows)
    return out


def classify(z, head):
    g, b, w, bias = _np(head.ln_gain), _np(head.ln_bias), _np(head.weight), _np(head.bias)
    return [vec_mat(layer_norm_row(seq[0], g, b), w, bias) for seq in z]


def encoder(z, layers, head, heads, context=None, injected=None, context_norm="split"):
    per_layer = []
    for li, layer in enumerate(layers):
        z, lg = msa(z, layer, heads, None if injected is None else injected[li])
        per_layer.append(lg)
        z = mlp(z, layer, None if context is None else context[li], context_norm)
    return z, per_layer, classify(z, head)


def build_context(z_up, up, down, feature_params):
    """z_up [B][N_up][D]; returns per-layer [B][N_down][D']."""
    (uh, uw), (dh, dw) = up, down
    result = []
    for f in feature_params:
        g, b = _np(f.ln_gain), _np(f.ln_bias)
        w1, b1, w2, b2 = _np(f.w1), _np(f.b1), _np(f.w2), _np(f.b2)
        per_batch = []
        for seq in z_up:
            mapped = [vec_mat([gelu(x) for x in vec_mat(layer_norm_row(t, g, b), w1, b1)], w2, b2) for t in seq[1:]]
            grid = [[mapped[i * uw + j] for j in range(uw)] for i in range(uh)]
            big = upsample_grid(grid, dh, dw)
            cw = len(mapped[0])
            rows = [[0.0] * cw]
            for i in range(dh):
                for j in range(dw):
                    rows.append(list(big[i][j]))
            per_batch.append(rows)
        result.append(per_batch)
    return result


def attention_upsample(amap, up, down):
    """amap [B][C][Ns][Ns] -> [B][C][Nt][Nt] via 4-D separable interpolation weights."""
    (uh, uw), (dh, dw) = up, down
    nt = dh * dw + 1

    def token_weights(t):
        # target token t >= 1 -> list of (source token, weight)
        i, j = divmod(t - 1, dw)
        return [
            (1 + a * uw + b, wa * wb)
            for a, wa in interp_weights(i, uh, dh)
            for b, wb in interp_weights(j, uw, dw)
        ]

    out = []
    for per_b in amap:
        chans = []
        for m in per_b:
            o = [[0.0] * nt for _ in range(nt)]
            o[0][0] = m[0][0]
            for t in range(1, nt):
                for s, w in token_weights(t):
                    o[0][t] += w * m[0][s]
                    o[t][0] += w * m[s][0]
            for r in range(1, nt):
                wr = token_weights(r)
                for c in range(1, nt):
                    acc = 0.0
                    for sr, a in wr:
                        for sc, bwt in token_weights(c):
                            acc += a * bwt * m[sr][sc]
                    o[r][c] = acc
            chans.append(o)
        out.append(chans)
    return out


def transform_relationships(stack, rel, up, down, heads):
    """stack [B][N][N][C] -> list over layers of [B][heads][Nt][Nt]."""
    w1, b1, w2, b2 = _np(rel.w1), _np(rel.b1), _np(rel.w2), _np(rel.b2)
    b_n = len(stack)
    n = len(stack[0])
    c = len(stack[0][0][0])
    refined = [[[[0.0] * n for _ in range(n)] for _ in range(c)] for _ in range(b_n)]
    for bi in range(b_n):
        for i in range(n):
            for j in range(n):
                h = [gelu(x) for x in vec_mat(stack[bi][i][j], w1, b1)]
                y = vec_mat(h, w2, b2)
                for ch in range(c):
                    refined[bi][ch][i][j] = y[ch]
    big = attention_upsample(refined, up, down)
    layers = c // heads
    return [[[big[bi][li * heads + h] for h in range(heads)] for bi in range(b_n)] for li in range(layers)]
