"""Streaming chunked prefill with sink + sliding-window caches.

Layers below the retrieval layer keep at most ``sink + window`` rows of keys
and values between chunks; the retrieval layer stores keys only, full length,
in a preallocated buffer.  Positions are absolute token indices throughout --
window survivors keep the positions they were encoded with.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ctxpress.codec import TokenSeq
from ctxpress.model import (
    OpCounter,
    Weights,
    embed,
    layer_forward,
    project_keys,
    project_queries,
)


class EmptyQuery(ValueError):
    """The query part has no tokens."""


@dataclass(frozen=True)
class StreamConfig:
    sink: int = 4
    window: int = 512
    chunk: int = 1024
    retrieval_layer: int = 1

    def validate(self, n_layers: int) -> None:
        if self.sink < 0 or self.window < 1 or self.chunk < 1:
            raise ValueError(f"invalid stream config {self}")
        if not 1 <= self.retrieval_layer <= n_layers:
            raise ValueError(
                f"retrieval_layer {self.retrieval_layer} outside 1..{n_layers}")

    def to_json(self) -> dict:
        return {"sink": self.sink, "window": self.window, "chunk": self.chunk,
                "retrieval_layer": self.retrieval_layer}


@dataclass
class LayerKV:
    """Sink and window key/value rows for one layer below the retrieval layer."""

    sink_k: np.ndarray  # (H, <=S, d_h)
    sink_v: np.ndarray
    win_k: np.ndarray  # (H, <=W mid-stream, d_h)
    win_v: np.ndarray

    @property
    def sink_rows(self) -> int:
        return self.sink_k.shape[1]

    @property
    def win_rows(self) -> int:
        return self.win_k.shape[1]

    def attended(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([self.sink_k, self.win_k], axis=1),
                np.concatenate([self.sink_v, self.win_v], axis=1))

    def copy(self) -> "LayerKV":
        return LayerKV(self.sink_k.copy(), self.sink_v.copy(),
                       self.win_k.copy(), self.win_v.copy())


@dataclass
class StreamCache:
    config: StreamConfig
    length: int  # context token count L
    sink_len: int  # min(sink, L)
    layers: list[LayerKV]  # one per layer < retrieval_layer
    full_k: np.ndarray  # (H, L, d_h) keys at the retrieval layer
    cursor: int = 0
    window_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def cache_cell_counts(self) -> tuple[int, int]:
        """(key+value cells in layers below, key cells at the retrieval layer),
        counted per head."""
        low = sum(2 * (kv.sink_rows + kv.win_rows) for kv in self.layers)
        return low, self.cursor

    def dump_keys(self, path: str) -> None:
        """Debug dump of the retrieval-layer key cache (ILRK binary)."""
        from ctxpress.model import save_key_cache

        save_key_cache(self.full_k, path)


def build_lambda_mask(chunk_len: int, sink_len: int, window_len: int) -> np.ndarray:
    """Allow all sink and window columns plus causal columns within the chunk.

    Columns are ordered sink, window (ascending position), chunk (ascending);
    row r of the chunk allows sink_len + window_len + (r+1) columns.
    """
    if chunk_len < 1 or sink_len < 0 or window_len < 0:
        raise ValueError("invalid mask dimensions")
    cached = sink_len + window_len
    mask = np.zeros((chunk_len, cached + chunk_len), dtype=bool)
    mask[:, :cached] = True
    mask[:, cached:] = np.tril(np.ones((chunk_len, chunk_len), dtype=bool))
    return mask


def _chunk_bounds(total: int, chunk: int, sink: int) -> list[tuple[int, int]]:
    # first chunk is chunk+sink tokens, the rest are chunk, last may be short
    bounds = [(0, min(total, chunk + sink))]
    pos = bounds[0][1]
    while pos < total:
        nxt = min(total, pos + chunk)
        bounds.append((pos, nxt))
        pos = nxt
    return bounds


def _empty_layer(heads: int, d_h: int) -> LayerKV:
    z = np.zeros((heads, 0, d_h))
    return LayerKV(z, z.copy(), z.copy(), z.copy())


def _absorb_chunk(kv: LayerKV, new_k: np.ndarray, new_v: np.ndarray, sink_take: int) -> None:
    # first sink_take rows (only ever nonzero on the first chunk) go to the
    # sink, the rest to the window; eviction happens after the chunk
    if sink_take > 0:
        kv.sink_k = np.concatenate([kv.sink_k, new_k[:, :sink_take]], axis=1)
        kv.sink_v = np.concatenate([kv.sink_v, new_v[:, :sink_take]], axis=1)
        new_k, new_v = new_k[:, sink_take:], new_v[:, sink_take:]
    kv.win_k = np.concatenate([kv.win_k, new_k], axis=1)
    kv.win_v = np.concatenate([kv.win_v, new_v], axis=1)


def _evict(kv: LayerKV, window: int) -> None:
    if kv.win_rows > window:
        kv.win_k = kv.win_k[:, -window:]
        kv.win_v = kv.win_v[:, -window:]


def stream_prefill_context(
    weights: Weights,
    config: StreamConfig,
    context: TokenSeq,
    counter: OpCounter | None = None,
) -> StreamCache:
    """Run the context through layers below the retrieval layer in chunks,
    caching sink+window KV there and full-length keys at the retrieval layer.

    Hidden states above the retrieval layer are never computed.  If the
    context is shorter than the sink, the whole context becomes the sink.
    """
    spec = weights.spec
    config.validate(spec.layers)
    ids = np.asarray(context.ids, dtype=np.int64)
    length = len(ids)
    if length < 1:
        raise ValueError("context must contain at least one token")
    lr = config.retrieval_layer
    sink_len = min(config.sink, length)
    cache = StreamCache(
        config=config,
        length=length,
        sink_len=sink_len,
        layers=[_empty_layer(spec.heads, spec.head_dim) for _ in range(lr - 1)],
        full_k=np.zeros((spec.heads, length, spec.head_dim)),
    )
    win_positions: list[int] = []
    for start, end in _chunk_bounds(length, config.chunk, config.sink):
        positions = np.arange(start, end, dtype=np.int64)
        x = embed(weights, ids[start:end])
        for layer in range(1, lr):
            kv = cache.layers[layer - 1]
            mask = build_lambda_mask(end - start, kv.sink_rows, kv.win_rows)
            k_cache, v_cache = kv.attended()
            x, new_k, new_v = layer_forward(
                weights, layer, x, positions, mask,
                cache_k=k_cache, cache_v=v_cache, counter=counter)
            _absorb_chunk(kv, new_k, new_v, max(0, sink_len - kv.sink_rows))
        cache.full_k[:, start:end] = project_keys(weights, lr, x, positions)
        cache.cursor = end
        win_positions.extend(range(max(start, sink_len), end))
        if len(win_positions) > config.window:
            win_positions = win_positions[-config.window:]
        for kv in cache.layers:
            _evict(kv, config.window)
    cache.window_positions = np.asarray(win_positions, dtype=np.int64)
    return cache


def prefill_query_part(
    weights: Weights,
    config: StreamConfig,
    cache: StreamCache,
    query: TokenSeq,
    start_position: int | None = None,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Run the query tokens over the frozen context caches and return the
    rotary-encoded query states (H, L_q, d_h) at the retrieval layer.

    The context cache is not mutated; query keys join a scratch copy of the
    window so a multi-chunk query stays causal with itself.
    """
    spec = weights.spec
    config.validate(spec.layers)
    ids = np.asarray(query.ids, dtype=np.int64)
    if len(ids) == 0:
        raise EmptyQuery("query part has no tokens")
    start = cache.length if start_position is None else start_position
    lr = config.retrieval_layer
    scratch = [kv.copy() for kv in cache.layers]
    states: list[np.ndarray] = []
    offset = 0
    while offset < len(ids):
        take = min(config.chunk, len(ids) - offset)
        positions = np.arange(start + offset, start + offset + take, dtype=np.int64)
        x = embed(weights, ids[offset:offset + take])
        for layer in range(1, lr):
            kv = scratch[layer - 1]
            mask = build_lambda_mask(take, kv.sink_rows, kv.win_rows)
            k_cache, v_cache = kv.attended()
            x, new_k, new_v = layer_forward(
                weights, layer, x, positions, mask,
                cache_k=k_cache, cache_v=v_cache, counter=counter)
            _absorb_chunk(kv, new_k, new_v, 0)
            _evict(kv, config.window)
        states.append(project_queries(weights, lr, x, positions))
        offset += take
    return np.concatenate(states, axis=1)
