"""Timing of full versus sampled attention and of the two kernel backends."""

from __future__ import annotations

import csv
import time

import numpy as np

from . import attention as A
from . import kernels
from .attention import GnaConfig

BENCH_COLUMNS = ("kernel", "grid", "keys", "seconds", "per_query_seconds", "error_vs_full", "backend")


def _best_time(fn, repeats: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_attention(grids=(8, 16, 32), channels: int = 16, repeats: int = 3, seed: int = 0,
                    config: GnaConfig | None = None) -> list[dict]:
    """Forward wall time (best of ``repeats``) of each kernel on square grids.

    ``error_vs_full`` is the relative Frobenius distance to full attention
    on the same maps.
    """
    config = config or GnaConfig()
    rows = []
    for g in grids:
        rng = np.random.default_rng([seed, g])
        Q, K, V = (rng.normal(size=(g, g, channels)) for _ in range(3))
        t_full, full = _best_time(lambda: A.full_attention_2d(Q, K, V).data, repeats)
        norm = float(np.linalg.norm(full))
        kernels_to_run = {
            "full": lambda: full,
            "gna": lambda: A.multi_focus_gna(Q, K, V, config, np.random.default_rng(seed)).data,
            "gna_test": lambda: A.gna_test(Q, K, V, config, np.random.default_rng(seed)).data,
            "local": lambda: A.local_attention(Q, K, V).data,
        }
        for name, fn in kernels_to_run.items():
            t, out = (t_full, full) if name == "full" else _best_time(fn, repeats)
            rows.append({
                "kernel": name, "grid": f"{g}x{g}", "keys": g * g, "seconds": t,
                "per_query_seconds": t / (g * g),
                "error_vs_full": float(np.linalg.norm(out - full)) / norm,
                "backend": "numpy" if name == "full" else kernels.BACKEND,
            })
    return rows


def compare_backends(queries: int = 4096, groups: int = 3, slots: int = 32, channels: int = 64,
                     keys: int = 4096, repeats: int = 5, seed: int = 0) -> list[dict]:
    """Forward and backward time of the sampled kernel on every available backend."""
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(queries, channels)), rng.normal(size=(keys, channels)), rng.normal(size=(keys, channels))
    idx = rng.integers(0, keys, size=(queries, groups, slots), dtype=np.int64)
    gout = rng.normal(size=(queries, channels))
    sc = 1.0 / np.sqrt(channels)
    rows = []
    for name in kernels.BACKENDS:
        tf, (out, w) = _best_time(lambda: kernels.sampled_attention_forward(q, k, v, idx, None, sc, name), repeats)
        tb, _ = _best_time(lambda: kernels.sampled_attention_backward(gout, q, k, v, idx, w, sc, name), repeats)
        rows.append({"backend": name, "forward_seconds": tf, "backward_seconds": tb,
                     "queries": queries, "slots": groups * slots, "channels": channels})
    return rows


def write_rows(rows: list[dict], fp, columns, header_comment: str | None = None) -> None:
    if header_comment:
        fp.write(f"# {header_comment}\n")
    w = csv.DictWriter(fp, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
