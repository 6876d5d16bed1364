"""Time the compiled and numpy sampled-attention kernels on the same inputs.

    python3 benchmarks/compare_backends.py [--queries 4096] [--repeats 5] [--csv out.csv]
"""

import argparse
import sys

import numpy as np

from gna import bench, kernels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=4096)
    ap.add_argument("--keys", type=int, default=4096)
    ap.add_argument("--groups", type=int, default=3)
    ap.add_argument("--slots", type=int, default=32)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--csv", default=None)
    a = ap.parse_args(argv)

    # the two backends must agree before their timings mean anything
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(64, 16)) for _ in range(3))
    idx = rng.integers(0, 64, size=(64, 2, 8), dtype=np.int64)
    outs = {n: kernels.sampled_attention_forward(q, k, v, idx, None, 0.25, n)[0] for n in kernels.BACKENDS}
    ref = outs["numpy"]
    for n, o in outs.items():
        print(f"{n}: max |diff| vs numpy = {np.max(np.abs(o - ref)):.2e}")

    rows = bench.compare_backends(a.queries, a.groups, a.slots, a.channels, a.keys, a.repeats)
    base = {r["backend"]: r for r in rows}["numpy"]
    for r in rows:
        print(f"{r['backend']:>9}: forward {r['forward_seconds'] * 1e3:8.2f} ms "
              f"(x{base['forward_seconds'] / r['forward_seconds']:.1f}), "
              f"backward {r['backward_seconds'] * 1e3:8.2f} ms "
              f"(x{base['backward_seconds'] / r['backward_seconds']:.1f})")
    if "compiled" not in kernels.BACKENDS:
        print("compiled extension not built; only the numpy backend was timed", file=sys.stderr)
    if a.csv:
        with open(a.csv, "w", newline="") as fp:
            bench.write_rows(rows, fp, list(rows[0]), f"backend comparison queries={a.queries}")


if __name__ == "__main__":
    main()
