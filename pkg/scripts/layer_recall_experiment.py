#!/usr/bin/env python3
"""Sweep candidate retrieval layers over the passkey grid and pick one.

Usage: python scripts/layer_recall_experiment.py [--length 1200] [--out report.json]
"""

import argparse
import json

from ctxpress.allocator import PoolingConfig
from ctxpress.model import ModelSpec, build_model
from ctxpress.needles import NeedleTaskSpec, select_retrieval_layer
from ctxpress.prefill import StreamConfig


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--length", type=int, default=1200)
    parser.add_argument("--budget", type=int, default=128)
    parser.add_argument("--key-digits", default="6,12,24")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--layers", type=int, default=4, help="model depth; all are candidates")
    parser.add_argument("--out", default="layer_report.json")
    args = parser.parse_args()

    weights = build_model(ModelSpec(dim=64, heads=4, layers=args.layers, seed=args.seed))
    digits = tuple(int(d) for d in args.key_digits.split(","))
    task = NeedleTaskSpec(length=args.length, key_digits=digits, seed=args.seed,
                          budget=args.budget)
    stream = StreamConfig(sink=4, window=256, chunk=256)
    candidates = list(range(1, args.layers + 1))
    selected, report = select_retrieval_layer(weights, task, candidates,
                                              PoolingConfig(budget=args.budget), stream)

    print(f"{'layer':>5} | mean recall")
    print("-" * 22)
    for layer in report.layers():
        marker = "  <- selected" if layer == selected else ""
        print(f"{layer:>5} | {report.layer_mean(layer):.3f}{marker}")
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.to_json({"length": task.length, "key_digits": list(digits),
                                  "budget": task.budget, "seed": task.seed}), fh, indent=2)
    print(f"full grid -> {args.out}")


if __name__ == "__main__":
    main()
