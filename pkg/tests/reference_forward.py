"""Straight-line transformer forward pass used as an independent oracle.

Deliberately shares no code with the library: everything is written with
explicit Python loops over positions, heads, and rotary pairs, trading
speed for auditability. Only used on tiny configurations.
"""

from __future__ import annotations

import math

import numpy as np


def _rms_norm(vec, weight, eps):
    d = len(vec)
    mean_sq = sum(float(v) * float(v) for v in vec) / d
    scale = 1.0 / math.sqrt(mean_sq + eps)
    return [float(vec[j]) * scale * float(weight[j]) for j in range(d)]


def _matvec(mat, vec):
    rows, cols = len(mat), len(vec)
    out = []
    for r in range(rows):
        acc = 0.0
        for c in range(cols):
            acc += float(mat[r][c]) * float(vec[c])
        out.append(acc)
    return out


def _rotate(vec, position, theta):
    # Interleaved pairs: dims (0,1), (2,3), ... rotate by position * theta^(-2i/d).
    d = len(vec)
    out = [0.0] * d
    for i in range(d // 2):
        angle = position * theta ** (-2.0 * i / d)
        c, s = math.cos(angle), math.sin(angle)
        a, b = float(vec[2 * i]), float(vec[2 * i + 1])
        out[2 * i] = a * c - b * s
        out[2 * i + 1] = a * s + b * c
    return out


def _softmax(scores):
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def _silu(z):
    return z / (1.0 + math.exp(-z))


def reference_forward(weights: dict, cfg: dict, tokens: list[int]) -> dict:
    """Returns logits plus every intermediate tap as plain nested lists."""
    d_model = cfg["d_model"]
    n_heads = cfg["n_heads"]
    n_layers = cfg["n_layers"]
    d_ff = cfg["d_ff"]
    vocab = cfg["vocab_size"]
    eps = cfg["norm_eps"]
    theta = cfg["rope_theta"]
    head_dim = d_model // n_heads
    seq = len(tokens)

    taps: dict[str, list] = {}
    x = [[float(weights["embed"][tok][j]) for j in range(d_model)] for tok in tokens]

    for layer in range(n_layers):
        pre = f"layers.{layer}"
        taps[f"layer_in.{layer}"] = [row[:] for row in x]
        taps[f"attn_in.{layer}"] = [row[:] for row in x]

        normed = [_rms_norm(row, weights[f"{pre}.norm1"], eps) for row in x]

        # Per-position projections, rotated per head.
        q_all, k_all, v_all = [], [], []
        for pos in range(seq):
            q = _matvec(weights[f"{pre}.attn.q_proj"], normed[pos])
            k = _matvec(weights[f"{pre}.attn.k_proj"], normed[pos])
            v = _matvec(weights[f"{pre}.attn.v_proj"], normed[pos])
            q_heads, k_heads, v_heads = [], [], []
            for h in range(n_heads):
                lo, hi = h * head_dim, (h + 1) * head_dim
                q_heads.append(_rotate(q[lo:hi], pos, theta))
                k_heads.append(_rotate(k[lo:hi], pos, theta))
                v_heads.append(v[lo:hi])
            q_all.append(q_heads)
            k_all.append(k_heads)
            v_all.append(v_heads)

        concat = [[0.0] * d_model for _ in range(seq)]
        for pos in range(seq):
            for h in range(n_heads):
                scores = []
                for other in range(pos + 1):
                    dot = sum(
                        q_all[pos][h][j] * k_all[other][h][j] for j in range(head_dim)
                    )
                    scores.append(dot / math.sqrt(head_dim))
                probs = _softmax(scores)
                for j in range(head_dim):
                    acc = sum(probs[o] * v_all[o][h][j] for o in range(pos + 1))
                    concat[pos][h * head_dim + j] = acc
        taps[f"oproj_in.{layer}"] = [row[:] for row in concat]

        attn_out = [_matvec(weights[f"{pre}.attn.o_proj"], row) for row in concat]
        taps[f"attn_out.{layer}"] = [row[:] for row in attn_out]

        x = [[x[p][j] + attn_out[p][j] for j in range(d_model)] for p in range(seq)]
        taps[f"mlp_in.{layer}"] = [row[:] for row in x]

        normed2 = [_rms_norm(row, weights[f"{pre}.norm2"], eps) for row in x]
        hidden_rows = []
        for pos in range(seq):
            gate = _matvec(weights[f"{pre}.mlp.gate_proj"], normed2[pos])
            up = _matvec(weights[f"{pre}.mlp.up_proj"], normed2[pos])
            hidden_rows.append([_silu(gate[j]) * up[j] for j in range(d_ff)])
        taps[f"dproj_in.{layer}"] = [row[:] for row in hidden_rows]
        mlp_out = [_matvec(weights[f"{pre}.mlp.down_proj"], h) for h in hidden_rows]
        taps[f"mlp_out.{layer}"] = [row[:] for row in mlp_out]

        x = [[x[p][j] + mlp_out[p][j] for j in range(d_model)] for p in range(seq)]
        taps[f"layer_out.{layer}"] = [row[:] for row in x]

    final_hidden = [_rms_norm(row, weights["norm_final"], eps) for row in x]
    taps["final_hidden"] = [row[:] for row in final_hidden]
    logits = [_matvec(weights["lm_head"], row) for row in final_hidden]
    taps["logits"] = [row[:] for row in logits]
    return {"logits": np.array(logits), "taps": {k: np.array(v) for k, v in taps.items()}}
