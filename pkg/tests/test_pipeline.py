"""End-to-end compression jobs, cost accounting, benchmark, and the CLI."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ctxpress.allocator import PoolingConfig
from ctxpress.codec import TokenSeq
from ctxpress.model import ModelSpec, build_model
from ctxpress.pipeline import (
    InsufficientPoints,
    PipelineError,
    bench_scaling,
    count_cache_cells,
    count_dot_products,
    dot_product_bound,
    linear_fit,
    run_compress,
    synthetic_ids,
)
from ctxpress.prefill import StreamConfig
from reference import monolithic_pipeline_scores


def _seq(n, seed=1):
    return synthetic_ids(n, 32768, seed, tag=f"test{seed}")


def test_bypass_when_budget_covers_context(tiny_weights):
    ctx, query = _seq(50), _seq(8, seed=2)
    res = run_compress(tiny_weights, StreamConfig(retrieval_layer=2),
                       PoolingConfig(budget=100), ctx, query)
    assert res.bypassed
    assert res.output_ids == list(ctx.ids) + list(query.ids)
    assert res.allocation.indices == list(range(50))
    assert res.cost.dot_products == 0


def test_output_never_longer_than_input(tiny_weights):
    ctx, query = _seq(300), _seq(10, seed=2)
    cfg = StreamConfig(sink=4, window=64, chunk=64, retrieval_layer=2)
    for budget in (0, 10, 100, 1000):
        res = run_compress(tiny_weights, cfg, PoolingConfig(budget=budget), ctx, query)
        assert len(res.output_ids) <= len(ctx) + len(query)


def test_empty_inputs_rejected(tiny_weights):
    with pytest.raises(ValueError):
        run_compress(tiny_weights, StreamConfig(), PoolingConfig(), TokenSeq([]), _seq(4))
    with pytest.raises(ValueError):
        run_compress(tiny_weights, StreamConfig(), PoolingConfig(), _seq(4), TokenSeq([]))


def test_stage_name_surfaces_on_failure(tiny_weights):
    ctx, query = _seq(300), _seq(8, seed=2)
    bad = StreamConfig(sink=4, window=64, chunk=64, retrieval_layer=99)
    with pytest.raises(PipelineError) as err:
        run_compress(tiny_weights, bad, PoolingConfig(budget=10), ctx, query)
    assert err.value.stage == "context-prefill"


def test_compress_matches_monolithic_oracle(toy_weights):
    ctx, query = _seq(256), _seq(16, seed=2)
    cfg = StreamConfig(sink=4, window=512, chunk=64, retrieval_layer=3)
    pooling = PoolingConfig(budget=64)
    res = run_compress(toy_weights, cfg, pooling, ctx, query)
    ref_scores, _ = monolithic_pipeline_scores(toy_weights, 3, ctx.ids, query.ids, sink=4)
    from ctxpress.allocator import context_allocate
    ref = context_allocate(ref_scores, pooling, ctx, 4)
    assert res.allocation.indices == ref.indices


def test_deterministic_end_to_end(tiny_weights):
    ctx, query = _seq(300), _seq(10, seed=2)
    cfg = StreamConfig(sink=4, window=64, chunk=64, retrieval_layer=3)
    a = run_compress(tiny_weights, cfg, PoolingConfig(budget=50), ctx, query)
    b = run_compress(tiny_weights, cfg, PoolingConfig(budget=50), ctx, query)
    assert a.allocation.indices == b.allocation.indices
    assert a.cost.dot_products == b.cost.dot_products


def test_result_json_has_config_echo(tiny_weights):
    ctx, query = _seq(300), _seq(10, seed=2)
    cfg = StreamConfig(sink=4, window=64, chunk=64, retrieval_layer=2)
    res = run_compress(tiny_weights, cfg, PoolingConfig(budget=50), ctx, query)
    blob = res.to_json({"stream": cfg.to_json(), "pooling": PoolingConfig(budget=50).to_json()})
    assert blob["config"]["stream"]["sink"] == 4
    assert blob["config"]["pooling"]["max_kernels"] == [2, 4, 8]
    assert blob["budget"] == 50
    assert set(blob["cost"]) == {"dot_products", "cache_cells_low", "cache_cells_lr", "wall_ms"}


# --- cost accounting ----------------------------------------------------------

def test_cache_cells_no_lower_layers():
    assert count_cache_cells(100, 4, 512, 1) == (0, 100)


def test_cache_cells_reference_values():
    assert count_cache_cells(131072, 4, 512, 3) == (2064, 131072)
    assert count_cache_cells(1, 0, 1, 2) == (2, 1)


def test_cache_cells_match_live_cache(tiny_weights):
    from ctxpress.prefill import stream_prefill_context
    cfg = StreamConfig(sink=4, window=32, chunk=64, retrieval_layer=3)
    cache = stream_prefill_context(tiny_weights, cfg, _seq(500))
    assert cache.cache_cell_counts() == count_cache_cells(500, 4, 32, 3)


def test_count_lr1_single_query_row(tiny_weights):
    cfg = StreamConfig(sink=4, window=64, chunk=64, retrieval_layer=1)
    count = count_dot_products(tiny_weights, 200, 1, cfg)
    assert count == 200  # one query row against the full key cache


def test_count_doubles_with_length(tiny_weights):
    cfg = StreamConfig(sink=4, window=32, chunk=64, retrieval_layer=3)
    a = count_dot_products(tiny_weights, 1024, 8, cfg)
    b = count_dot_products(tiny_weights, 2048, 8, cfg)
    assert 1.9 <= b / a <= 2.1


def test_counts_bounded_by_closed_form(tiny_weights):
    for lr in (1, 2, 3):
        cfg = StreamConfig(sink=4, window=32, chunk=64, retrieval_layer=lr)
        count = count_dot_products(tiny_weights, 640, 8, cfg)
        assert count <= dot_product_bound(640, 8, 4, 32, 64, lr)


def test_full_attention_grows_superlinearly(tiny_weights):
    cfg = StreamConfig(sink=4, window=32, chunk=64, retrieval_layer=2)
    ratios = []
    for length in (512, 1024):
        stream = count_dot_products(tiny_weights, length, 8, cfg)
        full = count_dot_products(tiny_weights, length, 8,
                                  StreamConfig(sink=4, window=length, chunk=64,
                                               retrieval_layer=2))
        ratios.append(full / stream)
    assert ratios[1] / ratios[0] >= 1.5


# --- benchmark ----------------------------------------------------------------

def test_linear_fit_exact_line():
    slope, intercept, r2 = linear_fit(np.array([1, 2, 3, 4]), np.array([3, 5, 7, 9]))
    assert slope == pytest.approx(2.0)
    assert intercept == pytest.approx(1.0)
    assert r2 == pytest.approx(1.0)


def test_bench_requires_four_lengths(tiny_weights):
    with pytest.raises(InsufficientPoints):
        bench_scaling(tiny_weights, StreamConfig(), PoolingConfig(budget=16),
                      [512, 1024, 2048])


def test_bench_rejects_unsorted_lengths(tiny_weights):
    with pytest.raises(ValueError):
        bench_scaling(tiny_weights, StreamConfig(), PoolingConfig(budget=16),
                      [1024, 512, 2048, 4096])


def test_bench_rows_and_exact_dot_fit(tiny_weights, tmp_path):
    cfg = StreamConfig(sink=4, window=32, chunk=128, retrieval_layer=2)
    lengths = [256, 384, 512, 640, 768]
    res = bench_scaling(tiny_weights, cfg, PoolingConfig(budget=16), lengths,
                        query_len=8, runs=1)
    assert [r.length for r in res.rows] == lengths
    assert abs(res.dots_fit[2] - 1.0) < 1e-9  # counting is exactly affine
    out = tmp_path / "bench.csv"
    res.write_csv(str(out))
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["length", "dot_products", "cache_cells_low", "cache_cells_lr", "wall_ms"]
    assert len(rows) == 1 + len(lengths)


# --- CLI ----------------------------------------------------------------------

def _run_cli(*args):
    return subprocess.run([sys.executable, "-m", "ctxpress", *args],
                          capture_output=True, text=True)


@pytest.fixture()
def text_files(tmp_path):
    ctx = tmp_path / "context.txt"
    ctx.write_text("word salad filler " * 120)
    query = tmp_path / "query.txt"
    query.write_text("which words matter most ?")
    return ctx, query


def test_cli_compress(tmp_path, text_files):
    ctx, query = text_files
    out = tmp_path / "out.json"
    proc = _run_cli("compress", "--model-seed", "7", "--dim", "32", "--heads", "2",
                    "--context", str(ctx), "--query", str(query),
                    "--budget", "64", "--layer", "2", "--sink", "4",
                    "--window", "64", "--chunk", "128",
                    "--max-kernels", "2,4,8", "--avg-kernels", "1:16",
                    "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    blob = json.loads(out.read_text())
    assert blob["budget"] == 64
    assert blob["config"]["stream"] == {"sink": 4, "window": 64, "chunk": 128,
                                        "retrieval_layer": 2}
    assert blob["config"]["pooling"]["avg_kernels"] == list(range(1, 17))
    assert len(blob["indices"]) == len(set(blob["indices"]))
    assert blob["indices"] == sorted(blob["indices"])


def test_cli_compress_from_weight_file(tmp_path, text_files):
    from ctxpress.model import save_weights
    ctx, query = text_files
    weights_path = tmp_path / "model.ilrw"
    save_weights(build_model(ModelSpec(dim=32, heads=2, layers=4, seed=9)),
                 str(weights_path))
    out = tmp_path / "out.json"
    proc = _run_cli("compress", "--weights", str(weights_path),
                    "--context", str(ctx), "--query", str(query),
                    "--budget", "32", "--layer", "2", "--window", "64",
                    "--chunk", "128", "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    blob = json.loads(out.read_text())
    assert blob["config"]["weights"] == str(weights_path)
    assert len(blob["indices"]) == 32 + 4


def test_cli_compress_bad_config_exits_2(tmp_path, text_files):
    ctx, query = text_files
    proc = _run_cli("compress", "--context", str(ctx), "--query", str(query),
                    "--layer", "99", "--out", str(tmp_path / "x.json"))
    assert proc.returncode == 2
    assert "error" in proc.stderr


def test_cli_missing_file_exits_2(tmp_path):
    proc = _run_cli("compress", "--context", str(tmp_path / "nope.txt"),
                    "--query", str(tmp_path / "nope2.txt"),
                    "--out", str(tmp_path / "x.json"))
    assert proc.returncode == 2


def test_cli_needle_gen(tmp_path):
    out = tmp_path / "task.json"
    proc = _run_cli("needle-gen", "--length", "400", "--depth", "3",
                    "--key-digits", "6", "--seed", "11", "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    blob = json.loads(out.read_text())
    assert len(blob["context"]["ids"]) == 400
    assert blob["context"]["spans"][0]["label"] == "needle"
    assert len(blob["passkey"]) == 6
    # determinism: rerun produces identical JSON
    out2 = tmp_path / "task2.json"
    _run_cli("needle-gen", "--length", "400", "--depth", "3",
             "--key-digits", "6", "--seed", "11", "--out", str(out2))
    assert out.read_text() == out2.read_text()


def test_cli_select_layer(tmp_path):
    out = tmp_path / "report.json"
    proc = _run_cli("select-layer", "--model-seed", "3", "--dim", "32", "--heads", "2",
                    "--length", "300", "--key-digits", "6", "--budget", "48",
                    "--layers", "1:2", "--window", "32", "--chunk", "64",
                    "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    blob = json.loads(out.read_text())
    assert set(blob["layers"]) == {"1", "2"}
    assert blob["selected"] in (1, 2)
    assert len(blob["layers"]["1"]["cells"]) == 20  # 20 depths x 1 key length


def test_cli_bench(tmp_path):
    out = tmp_path / "bench.csv"
    proc = _run_cli("bench", "--model-seed", "3", "--dim", "32", "--heads", "2",
                    "--lengths", "256,384,512,640", "--budget", "16",
                    "--window", "32", "--chunk", "128", "--runs", "1",
                    "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    assert "R^2" in proc.stdout
    rows = out.read_text().strip().splitlines()
    assert len(rows) == 5
