"""Independent reference implementations used as test oracles.

These deliberately avoid the package's kernels: scalar loops, float64 numpy,
or closed forms.
"""

import math

import numpy as np


def triple_loop_matmul(a, b):
    """Scalar ascending-order product in the operands' own precision."""
    t = a.dtype.type
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = t(0)
            for p in range(k):
                acc = t(acc + t(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


def layer_norm_two_pass(x, gamma, beta, eps):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i, row in enumerate(x.reshape(-1, x.shape[-1])):
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        out.reshape(-1, x.shape[-1])[i] = (row - mean) / math.sqrt(var + eps) * gamma + beta
    return out


def gelu_scalar(v):
    return v * 0.5 * (1 + math.erf(v / math.sqrt(2)))


def softmax_direct(logits):
    e = [math.exp(v) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def attention_single(x, blk, num_heads, lora=None):
    """Straight-line attention for one unpadded sequence in float64.

    ``lora`` is ``(A_q, B_q, A_v, B_v)`` in their native rank or None.
    """
    f = lambda a: np.asarray(a, dtype=np.float64)
    x = f(x)
    L, d = x.shape
    dh = d // num_heads
    q = x @ f(blk.w_q) + f(blk.b_q)
    k = x @ f(blk.w_k) + f(blk.b_k)
    v = x @ f(blk.w_v) + f(blk.b_v)
    if lora is not None:
        a_q, b_q, a_v, b_v = (f(m) for m in lora)
        q = q + x @ (b_q @ a_q).T
        v = v + x @ (b_v @ a_v).T
    ctx = np.zeros((L, d))
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            scores = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in range(L)]
            p = softmax_direct([s - max(scores) for s in scores])
            ctx[i, sl] = sum(p[j] * v[j, sl] for j in range(L))
    return ctx @ f(blk.w_o) + f(blk.b_o)


def block_single(x, blk, num_heads, eps, lora=None):
    f = lambda a: np.asarray(a, dtype=np.float64)
    x = f(x)
    y1 = layer_norm_two_pass(x, f(blk.ln1_g), f(blk.ln1_b), eps)
    x2 = x + attention_single(y1, blk, num_heads, lora)
    y2 = layer_norm_two_pass(x2, f(blk.ln2_g), f(blk.ln2_b), eps)
    pre = y2 @ f(blk.mlp_in) + f(blk.mlp_in_b)
    act = np.vectorize(gelu_scalar)(pre)
    return x2 + act @ f(blk.mlp_out) + f(blk.mlp_out_b)


def backbone_single(bb, tokens, expert=None):
    """CLS output for one unpadded token sequence, float64 throughout."""
    x = np.asarray(tokens, dtype=np.float64)
    for i, blk in enumerate(bb.blocks):
        lora = None if expert is None else expert.lora[i].arrays()
        x = block_single(x, blk, bb.config.num_heads, bb.config.eps, lora)
    return layer_norm_two_pass(x[:1], np.float64(bb.final_g), np.float64(bb.final_b), bb.config.eps)[0]


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def vit_param_count(d, blocks, mlp, patch2d, c2, n2, patch3d_len, n3):
    """Closed-form tensor-size sum for the backbone layout."""
    embedding = patch2d * patch2d * c2 * d + patch3d_len * d + (n2 + 1) * d + (n3 + 1) * d + d
    attention = 4 * (d * d + d)
    mlp_part = d * mlp + mlp + mlp * d + d
    norms = 4 * d
    return embedding + blocks * (attention + mlp_part + norms) + 2 * d


def xoshiro256ss_scalar(seed_words, count):
    """Textbook single-stream xoshiro256** from a given 4-word state."""
    M = (1 << 64) - 1
    s = list(seed_words)
    rotl = lambda x, k: ((x << k) | (x >> (64 - k))) & M
    out = []
    for _ in range(count):
        result = (rotl((s[1] * 5) & M, 7) * 9) & M
        t = (s[1] << 17) & M
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        out.append(result)
    return out
