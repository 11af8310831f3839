"""Sharded gradient averaging: equivalence and throughput versus shard count.

For one fixed batch, compares the K-shard averaged gradient against the
single-shard reference under both batch-norm policies, and times the
sharded pass. With frozen statistics the average is algebraically the
full-batch gradient (deviations at round-off level); with per-shard
statistics each worker normalizes by its own sub-batch, so the averaged
gradient genuinely differs — the printed deviation quantifies by how much.

Example:
    python scripts/shard_scaling.py --batch-size 64 --shards 1 2 4 8
"""

import argparse
import time

import numpy as np

import ctrefine.tensor_ops as T
from ctrefine import network, training


def max_deviation(grads, reference):
    return max(float(np.abs(a - b).max()) for a, b in zip(grads, reference))


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--shards", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--depth", type=int, default=7)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--patch", type=int, default=24)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--float64", action="store_true",
                    help="run at 64-bit (the equivalence check's native precision)")
    args = ap.parse_args()

    dtype = np.float64 if args.float64 else np.float32
    with T.precision(dtype):
        variant = network.NetworkVariant(kind="2d", window=1, depth=args.depth,
                                         width=args.width)
        params = network.build_network(variant, seed=args.seed)
        rng = T.seeded_rng(args.seed, purpose=8)
        inputs = rng.standard_normal(
            (args.batch_size, 1, args.patch, args.patch)).astype(dtype)
        targets = rng.standard_normal(
            (args.batch_size, 1, args.patch, args.patch)).astype(dtype)

        reference = {}
        for mode in ("frozen", "per-shard"):
            grads, loss, _ = training.shard_gradients(inputs, targets, params, 1,
                                                      bn_mode=mode)
            reference[mode] = grads
            print(f"K=1 {mode:<9} loss {loss:.6f}")

        print(f"\n{'K':>3} {'mode':<9} {'max |grad - ref|':>18} {'best wall':>10}")
        for k in args.shards:
            if args.batch_size % k:
                print(f"{k:>3} skipped (batch {args.batch_size} not divisible)")
                continue
            for mode in ("frozen", "per-shard"):
                walls = []
                for _ in range(args.repeats):
                    t0 = time.perf_counter()
                    grads, _, _ = training.shard_gradients(inputs, targets, params, k,
                                                           bn_mode=mode)
                    walls.append(time.perf_counter() - t0)
                dev = max_deviation(grads, reference[mode])
                print(f"{k:>3} {mode:<9} {dev:>18.3e} {min(walls):>9.3f}s")


if __name__ == "__main__":
    main()
