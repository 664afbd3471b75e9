"""Query-context scoring and budgeted token allocation.

The query states attend over the full-length key cache; the resulting
probabilities collapse to one score per context position (max over heads and
query rows, sink excluded).  The allocator then spreads the token budget
evenly across every (max kernel, avg kernel) combination, ranking pooled
windows per combination and deduplicating as it goes.  With a single size-1
max kernel and a single size-1 avg kernel this degenerates to plain top-k
over raw scores.

All tie-breaks prefer the lower index, so results are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ctxpress.codec import TokenSeq
from ctxpress.model import OpCounter


class DegenerateContext(ValueError):
    """Context has no scoreable positions beyond the sink."""


@dataclass
class ScoreVector:
    """One reduced attention score per non-sink context position.

    ``values[c]`` belongs to absolute context index ``origin + c``.
    """

    values: np.ndarray
    origin: int  # sink size, the first scored absolute index

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PoolingConfig:
    max_kernels: tuple[int, ...] = (2, 4, 8)
    avg_kernels: tuple[int, ...] = tuple(range(1, 17))
    budget: int = 4096

    def validate(self) -> None:
        if not self.max_kernels or not self.avg_kernels:
            raise ValueError("need at least one max and one avg kernel")
        if min(self.max_kernels) < 1 or min(self.avg_kernels) < 1:
            raise ValueError("kernel sizes must be >= 1")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")

    @property
    def combinations(self) -> int:
        return len(self.max_kernels) * len(self.avg_kernels)

    def to_json(self) -> dict:
        return {"max_kernels": list(self.max_kernels),
                "avg_kernels": list(self.avg_kernels),
                "budget": self.budget}


@dataclass
class AllocationResult:
    indices: list[int]  # ascending, unique, sink included
    compressed: TokenSeq
    budget: int
    used_fallback: bool = False  # True if the final top-up pass ran

    def to_json(self, config: dict | None = None) -> dict:
        return {"indices": list(self.indices),
                "ids": list(self.compressed.ids),
                "budget": self.budget,
                "config": config or {}}


def query_context_scores(
    query_states: np.ndarray,
    full_k: np.ndarray,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Softmax of query-key logits over every context position.

    query_states: (H, L_q, d_h); full_k: (H, L, d_h).  No causal restriction:
    the whole context precedes the query.  Returns (H, L_q, L) probabilities.
    """
    if counter is not None:
        counter.add(query_states.shape[1] * full_k.shape[1])
    d_h = query_states.shape[-1]
    logits = np.matmul(query_states, np.swapaxes(full_k, -1, -2)) / math.sqrt(d_h)
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def reduce_scores(attn: np.ndarray, sink: int) -> ScoreVector:
    """Collapse (H, L_q, L) probabilities to max over heads and query rows,
    dropping the sink columns."""
    length = attn.shape[2]
    if length <= sink:
        raise DegenerateContext(f"context length {length} <= sink {sink}")
    values = attn[:, :, sink:].max(axis=(0, 1))
    return ScoreVector(values=values, origin=sink)


def _max_pool(values: np.ndarray, size: int) -> np.ndarray:
    # stride == size; a short trailing window is pooled over what it has
    n = len(values)
    buckets = (n + size - 1) // size
    padded = np.full(buckets * size, -np.inf)
    padded[:n] = values
    return padded.reshape(buckets, size).max(axis=1)


def _ranked_windows(values: np.ndarray, m: int, n: int) -> tuple[np.ndarray, int]:
    """Window start positions (in pooled space) by descending avg score,
    ties to the lower position.  Returns (order, effective avg size)."""
    pooled = _max_pool(values, m)
    n_eff = min(n, len(pooled))
    avgs = sliding_window_view(pooled, n_eff).mean(axis=-1)
    order = np.argsort(-avgs, kind="stable")
    return order, n_eff


def pooled_ranking(
    scores: ScoreVector,
    m: int,
    n: int,
    max_windows: int | None = None,
) -> Iterator[int]:
    """Stream absolute candidate indices for one (max m, avg n) combination.

    Windows are visited best-first; inside a window, offsets ascend.  The
    same index may appear under several overlapping windows -- the caller
    deduplicates.
    """
    values = scores.values
    if len(values) == 0:
        return
    order, n_eff = _ranked_windows(values, m, n)
    if max_windows is not None:
        order = order[:max_windows]
    for a in order:
        lo = int(a) * m
        hi = min((int(a) + n_eff) * m, len(values))
        for off in range(lo, hi):
            yield off + scores.origin


def context_allocate(
    scores: ScoreVector,
    cfg: PoolingConfig,
    context: TokenSeq,
    sink: int,
) -> AllocationResult:
    """Distribute the budget over kernel combinations and gather the kept ids.

    The sink is always kept.  Each combination receives floor(B/N) indices
    (the first B mod N combinations one extra, in loop order: max kernels
    outer, avg kernels inner) and consumes its ranked stream skipping indices
    already taken.  A defensive final pass over the plain (1, 1) ranking tops
    up any shortfall so |indices| == min(sink + B, L) unconditionally.
    """
    cfg.validate()
    length = len(context)
    sink_count = min(sink, length)
    if len(scores.values) != length - sink_count or scores.origin != sink_count:
        raise ValueError(
            f"scores cover {len(scores.values)} positions from {scores.origin}, "
            f"expected {length - sink_count} from {sink_count}")
    target = min(sink_count + cfg.budget, length)
    used_fallback = False
    if target >= length:
        indices = list(range(length))
    else:
        allocated = set(range(sink_count))
        combos = [(m, n) for m in cfg.max_kernels for n in cfg.avg_kernels]
        base, extra = divmod(cfg.budget, len(combos))
        for idx, (m, n) in enumerate(combos):
            quota = base + (1 if idx < extra else 0)
            if quota == 0:
                continue
            cap = cfg.budget // m + 1
            taken = 0
            for cand in pooled_ranking(scores, m, n, max_windows=cap):
                if taken >= quota:
                    break
                if cand not in allocated:
                    allocated.add(cand)
                    taken += 1
        if len(allocated) < target:
            used_fallback = True
            for cand in pooled_ranking(scores, 1, 1):
                if len(allocated) >= target:
                    break
                allocated.add(cand)
        indices = sorted(allocated)
    assert len(indices) == target, f"allocated {len(indices)} != target {target}"
    compressed = TokenSeq([context.ids[i] for i in indices])
    return AllocationResult(indices=indices, compressed=compressed,
                            budget=cfg.budget, used_fallback=used_fallback)
