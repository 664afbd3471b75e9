"""Brute-force oracles kept independent of the code paths they check.

The dense attention and block-forward routines here are written with plain
loops and re-derived formulas; the monolithic pipeline runs every token at
once with a single causal mask (no chunks, no eviction); the naive allocator
follows the budget loop literally with python sets and lists.
"""

from __future__ import annotations

import math

import numpy as np

from ctxpress.allocator import query_context_scores, reduce_scores
from ctxpress.model import Weights, embed, layer_forward, project_keys, project_queries


def dense_softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                            mask: np.ndarray) -> np.ndarray:
    """Loop-based masked attention. q/k/v: (H, T, d_h), mask: (T_q, T_k)."""
    heads, t_q, d_h = q.shape
    t_k = k.shape[1]
    out = np.zeros((heads, t_q, d_h))
    for h in range(heads):
        for i in range(t_q):
            logits = np.full(t_k, -np.inf)
            for j in range(t_k):
                if mask[i, j]:
                    logits[j] = float(q[h, i] @ k[h, j]) / math.sqrt(d_h)
            logits -= logits[np.isfinite(logits)].max()
            weights = np.where(np.isfinite(logits), np.exp(logits), 0.0)
            weights /= weights.sum()
            for j in range(t_k):
                out[h, i] += weights[j] * v[h, j]
    return out


def rotate_pairs(vec: np.ndarray, position: int, base: float) -> np.ndarray:
    """Rotary encoding of one vector, pair by pair."""
    d_h = len(vec)
    out = np.empty_like(vec, dtype=np.float64)
    for i in range(d_h // 2):
        angle = position * base ** (-2.0 * i / d_h)
        c, s = math.cos(angle), math.sin(angle)
        x, y = vec[2 * i], vec[2 * i + 1]
        out[2 * i] = x * c - y * s
        out[2 * i + 1] = x * s + y * c
    return out


def reference_block_forward(weights: Weights, layer: int, x: np.ndarray,
                            positions: np.ndarray) -> np.ndarray:
    """Full-causal decoder block re-derived from scratch (no cache support)."""
    spec = weights.spec
    lw = weights.layers[layer - 1]
    t = x.shape[0]
    d_h = spec.head_dim

    def norm(v, gain):
        return v / np.sqrt((v * v).mean(axis=-1, keepdims=True) + 1e-6) * gain

    normed = norm(x, lw.attn_gain.astype(np.float64))
    q_all = normed @ lw.wq.astype(np.float64)
    k_all = normed @ lw.wk.astype(np.float64)
    v_all = normed @ lw.wv.astype(np.float64)
    attn_merged = np.zeros((t, spec.dim))
    for h in range(spec.heads):
        cols = slice(h * d_h, (h + 1) * d_h)
        q = np.stack([rotate_pairs(q_all[i, cols], int(positions[i]), spec.rope_base)
                      for i in range(t)])
        k = np.stack([rotate_pairs(k_all[i, cols], int(positions[i]), spec.rope_base)
                      for i in range(t)])
        v = v_all[:, cols]
        for i in range(t):
            logits = np.array([q[i] @ k[j] / math.sqrt(d_h) if j <= i else -np.inf
                               for j in range(t)])
            logits -= logits[: i + 1].max()
            w = np.exp(logits)
            w /= w.sum()
            attn_merged[i, cols] = w @ v
    h_mid = x + attn_merged @ lw.wo.astype(np.float64)
    f = norm(h_mid, lw.ffn_gain.astype(np.float64))
    inner = f @ lw.w_in.astype(np.float64)
    act = 0.5 * inner * (1.0 + np.tanh(math.sqrt(2.0 / math.pi)
                                       * (inner + 0.044715 * inner ** 3)))
    return h_mid + act @ lw.w_out.astype(np.float64)


def monolithic_pipeline_scores(weights: Weights, retrieval_layer: int,
                               ctx_ids: list[int], query_ids: list[int], sink: int):
    """One full-causal forward over context ++ query, then query-key scoring.

    Uses the model primitives but none of the streaming machinery.  Returns
    (score vector, context keys at the retrieval layer).
    """
    ids = np.asarray(list(ctx_ids) + list(query_ids), dtype=np.int64)
    total, length = len(ids), len(ctx_ids)
    x = embed(weights, ids)
    positions = np.arange(total)
    mask = np.tril(np.ones((total, total), dtype=bool))
    for layer in range(1, retrieval_layer):
        x, _, _ = layer_forward(weights, layer, x, positions, mask)
    k_ctx = project_keys(weights, retrieval_layer, x[:length], positions[:length])
    q_states = project_queries(weights, retrieval_layer, x[length:], positions[length:])
    attn = query_context_scores(q_states, k_ctx)
    return reduce_scores(attn, sink), k_ctx


def naive_max_pool(values: list[float], size: int) -> list[float]:
    return [max(values[i:i + size]) for i in range(0, len(values), size)]


def naive_avg_windows(pooled: list[float], size: int) -> list[float]:
    size = min(size, len(pooled))
    return [sum(pooled[i:i + size]) / size for i in range(len(pooled) - size + 1)], size


def naive_allocate(scores: np.ndarray, sink: int, budget: int,
                   max_kernels: list[int], avg_kernels: list[int],
                   total_len: int) -> list[int]:
    """Literal transcription of the budget loop with nothing shared with the
    implementation: python lists, explicit loops, explicit dedup."""
    target = min(sink + budget, total_len)
    if target >= total_len:
        return list(range(total_len))
    allocated = set(range(min(sink, total_len)))
    combos = [(m, n) for m in max_kernels for n in avg_kernels]
    per, extra = budget // len(combos), budget % len(combos)
    values = [float(v) for v in scores]
    for idx, (m, n) in enumerate(combos):
        quota = per + (1 if idx < extra else 0)
        if quota == 0:
            continue
        pooled = naive_max_pool(values, m)
        avgs, n_eff = naive_avg_windows(pooled, n)
        ranked = sorted(range(len(avgs)), key=lambda a: (-avgs[a], a))
        ranked = ranked[: budget // m + 1]
        stream = []
        for a in ranked:
            for off in range(a * m, min((a + n_eff) * m, len(values))):
                stream.append(off + sink)
        taken = 0
        for cand in stream:
            if taken >= quota:
                break
            if cand not in allocated:
                allocated.add(cand)
                taken += 1
    if len(allocated) < target:
        ranked = sorted(range(len(values)), key=lambda c: (-values[c], c))
        for c in ranked:
            if len(allocated) >= target:
                break
            allocated.add(c + sink)
    return sorted(allocated)
