"""End-to-end compression jobs, cost accounting, and the scaling benchmark.

A job runs prefill -> query prefill -> scoring -> allocation and reports the
instrumented dot-product count plus live cache cell counts.  The benchmark
measures wall time across context lengths and fits a line; with the window
set to the context length the same engine becomes the full-KV baseline whose
cost is quadratic.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ctxpress.allocator import (
    AllocationResult,
    PoolingConfig,
    context_allocate,
    query_context_scores,
    reduce_scores,
)
from ctxpress.codec import TokenSeq, fnv1a64
from ctxpress.model import ModelSpec, OpCounter, Weights
from ctxpress.prefill import StreamConfig, prefill_query_part, stream_prefill_context


class InsufficientPoints(ValueError):
    """The benchmark needs at least four context lengths."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, original: Exception):
        super().__init__(f"stage '{stage}' failed: {original}")
        self.stage = stage
        self.original = original


@dataclass(frozen=True)
class JobConfig:
    """Everything a compression job needs besides the raw token sequences."""

    model: ModelSpec | None = None
    weights_path: str | None = None
    stream: StreamConfig = field(default_factory=StreamConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    context_path: str | None = None
    query_path: str | None = None
    out_path: str | None = None

    def to_json(self) -> dict:
        meta = {"stream": self.stream.to_json(), "pooling": self.pooling.to_json()}
        if self.model is not None:
            meta["model_seed"] = self.model.seed
        if self.weights_path is not None:
            meta["weights"] = self.weights_path
        return meta


@dataclass
class CostReport:
    dot_products: int
    cache_cells_low: int  # key+value cells per head, layers below retrieval
    cache_cells_retrieval: int  # key cells per head at the retrieval layer
    wall_seconds: float

    def to_json(self) -> dict:
        return {"dot_products": self.dot_products,
                "cache_cells_low": self.cache_cells_low,
                "cache_cells_lr": self.cache_cells_retrieval,
                "wall_ms": self.wall_seconds * 1000.0}


@dataclass
class CompressResult:
    allocation: AllocationResult
    cost: CostReport
    bypassed: bool
    output_ids: list[int]  # selected context ids ++ query ids

    def to_json(self, config: dict | None = None) -> dict:
        out = self.allocation.to_json(config)
        out["output_ids"] = list(self.output_ids)
        out["cost"] = self.cost.to_json()
        out["bypassed"] = self.bypassed
        return out


def count_cache_cells(length: int, sink: int, window: int, retrieval_layer: int) -> tuple[int, int]:
    """Per-head cache capacity: 2*(sink+window) key+value cells for each layer
    below the retrieval layer, plus ``length`` key cells at that layer."""
    return 2 * (sink + window) * (retrieval_layer - 1), length


def dot_product_bound(length: int, query_len: int, sink: int, window: int,
                      chunk: int, retrieval_layer: int) -> int:
    """Closed-form upper bound on counted query-key dot products."""
    return (sink + window + chunk) * (retrieval_layer - 1) * length + query_len * length


def run_compress(
    weights: Weights,
    stream: StreamConfig,
    pooling: PoolingConfig,
    context: TokenSeq,
    query: TokenSeq,
) -> CompressResult:
    """Compress the context against the query and append the query ids.

    If the budget plus sink already covers the context, the model never runs
    and the input passes through unchanged.
    """
    if len(context) == 0 or len(query) == 0:
        raise ValueError("context and query must be non-empty")
    pooling.validate()
    length = len(context)
    started = time.perf_counter()
    if length <= pooling.budget + stream.sink:
        allocation = AllocationResult(
            indices=list(range(length)),
            compressed=TokenSeq(list(context.ids)),
            budget=pooling.budget)
        cost = CostReport(0, 0, 0, time.perf_counter() - started)
        return CompressResult(allocation=allocation, cost=cost, bypassed=True,
                              output_ids=list(context.ids) + list(query.ids))

    counter = OpCounter()

    def stage(name: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # noqa: BLE001 - re-raised with stage context
            raise PipelineError(name, exc) from exc

    cache = stage("context-prefill", stream_prefill_context, weights, stream, context, counter)
    query_states = stage("query-prefill", prefill_query_part, weights, stream, cache, query,
                         counter=counter)
    attn = stage("scoring", query_context_scores, query_states, cache.full_k, counter)
    scores = stage("scoring", reduce_scores, attn, cache.sink_len)
    allocation = stage("allocation", context_allocate, scores, pooling, context, cache.sink_len)
    low, retrieval = cache.cache_cell_counts()
    cost = CostReport(
        dot_products=counter.dot_products,
        cache_cells_low=low,
        cache_cells_retrieval=retrieval,
        wall_seconds=time.perf_counter() - started)
    return CompressResult(allocation=allocation, cost=cost, bypassed=False,
                          output_ids=list(allocation.compressed.ids) + list(query.ids))


def synthetic_ids(length: int, vocab: int, seed: int, tag: str = "bench") -> TokenSeq:
    """Deterministic filler token ids for cost measurements."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, fnv1a64(f"{tag}.{length}".encode())],
                   dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return TokenSeq(gen.integers(4, vocab, size=length).tolist())


def count_dot_products(
    weights: Weights,
    length: int,
    query_len: int,
    stream: StreamConfig,
    budget: int | None = None,
) -> int:
    """Instrumented dot-product count of one compression at the given sizes."""
    if budget is None:
        budget = min(64, max(0, length - stream.sink - 1))
    pooling = PoolingConfig(max_kernels=(1,), avg_kernels=(1,), budget=budget)
    spec = weights.spec
    context = synthetic_ids(length, spec.vocab, spec.seed)
    query = synthetic_ids(query_len, spec.vocab, spec.seed, tag="bench-query")
    result = run_compress(weights, stream, pooling, context, query)
    if result.bypassed:
        raise ValueError("budget covers the context; nothing was measured")
    return result.cost.dot_products


def linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares line fit. Returns (slope, intercept, r_squared)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    predicted = slope * x + intercept
    ss_res = float(np.sum((y - predicted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


@dataclass
class BenchRow:
    length: int
    dot_products: int
    cache_cells_low: int
    cache_cells_retrieval: int
    wall_ms: float


@dataclass
class BenchResult:
    rows: list[BenchRow]
    time_fit: tuple[float, float, float]  # slope, intercept, r2 of wall ms vs length
    dots_fit: tuple[float, float, float]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["length", "dot_products", "cache_cells_low",
                             "cache_cells_lr", "wall_ms"])
            for row in self.rows:
                writer.writerow([row.length, row.dot_products, row.cache_cells_low,
                                 row.cache_cells_retrieval, f"{row.wall_ms:.3f}"])


def bench_scaling(
    weights: Weights,
    stream: StreamConfig,
    pooling: PoolingConfig,
    lengths: list[int],
    query_len: int = 16,
    runs: int = 3,
    full_attention: bool = False,
) -> BenchResult:
    """Measure wall time and dot products per context length and fit lines.

    ``full_attention=True`` widens the window to the context length, turning
    the engine into the no-eviction full-KV baseline.  Wall time per length
    is the median of ``runs`` runs.
    """
    if len(lengths) < 4:
        raise InsufficientPoints(f"need >= 4 lengths, got {len(lengths)}")
    if any(b >= a for a, b in zip(lengths[1:], lengths)):
        raise ValueError("lengths must be strictly ascending")
    spec = weights.spec
    rows = []
    for length in lengths:
        config = replace(stream, window=length) if full_attention else stream
        if length <= pooling.budget + config.sink:
            raise ValueError(f"length {length} within budget; benchmark would bypass")
        context = synthetic_ids(length, spec.vocab, spec.seed)
        query = synthetic_ids(query_len, spec.vocab, spec.seed, tag="bench-query")
        times = []
        result = None
        for _ in range(runs):
            result = run_compress(weights, config, pooling, context, query)
            times.append(result.cost.wall_seconds)
        rows.append(BenchRow(
            length=length,
            dot_products=result.cost.dot_products,
            cache_cells_low=result.cost.cache_cells_low,
            cache_cells_retrieval=result.cost.cache_cells_retrieval,
            wall_ms=statistics.median(times) * 1000.0))
    xs = np.array([row.length for row in rows], dtype=np.float64)
    return BenchResult(
        rows=rows,
        time_fit=linear_fit(xs, np.array([row.wall_ms for row in rows])),
        dots_fit=linear_fit(xs, np.array([row.dot_products for row in rows])))
