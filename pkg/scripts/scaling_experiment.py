#!/usr/bin/env python3
"""Wall-time scaling of streaming compression vs the no-eviction baseline.

Writes one CSV per mode and prints the linear fits.  The baseline sweep is
quadratic, so keep the lengths modest on slow machines.

Usage: python scripts/scaling_experiment.py [--lengths 4096,8192,16384,32768]
"""

import argparse

from ctxpress.allocator import PoolingConfig
from ctxpress.model import ModelSpec, build_model
from ctxpress.pipeline import bench_scaling
from ctxpress.prefill import StreamConfig


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--lengths", default="4096,8192,16384,32768")
    parser.add_argument("--budget", type=int, default=1024)
    parser.add_argument("--layer", type=int, default=2)
    parser.add_argument("--runs", type=int, default=3)
    parser.add_argument("--skip-baseline", action="store_true")
    parser.add_argument("--out-prefix", default="scaling")
    args = parser.parse_args()

    weights = build_model(ModelSpec(dim=32, heads=2, layers=4, seed=7))
    lengths = [int(x) for x in args.lengths.split(",")]
    stream = StreamConfig(sink=4, window=512, chunk=512, retrieval_layer=args.layer)
    pooling = PoolingConfig(budget=args.budget)

    res = bench_scaling(weights, stream, pooling, lengths, runs=args.runs)
    res.write_csv(f"{args.out_prefix}_stream.csv")
    slope, intercept, r2 = res.time_fit
    print(f"streaming : {slope * 1000:.3f} us/token + {intercept:.1f} ms, R^2 = {r2:.4f}")
    for row in res.rows:
        print(f"  L={row.length:>6}: {row.wall_ms:8.1f} ms, {row.dot_products:>13,} dots")

    if not args.skip_baseline:
        base = bench_scaling(weights, stream, pooling, lengths, runs=1, full_attention=True)
        base.write_csv(f"{args.out_prefix}_full.csv")
        for row in base.rows:
            print(f"  full L={row.length:>6}: {row.wall_ms:8.1f} ms, "
                  f"{row.dot_products:>13,} dots")
        growth_s = res.rows[-1].wall_ms / res.rows[0].wall_ms
        growth_f = base.rows[-1].wall_ms / base.rows[0].wall_ms
        print(f"growth over the span: streaming {growth_s:.1f}x, baseline {growth_f:.1f}x")


if __name__ == "__main__":
    main()
