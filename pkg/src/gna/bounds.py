"""Numerical check of the sparse-attention error bound.

A sparse attention keeps the key/value rows indexed by a subset ``P`` and
zeroes the rest; with plain dot-product scores,

    || FA(q,K,V) - SA(q,K1,V1) ||  <=  || q K2^T || * ||V1||  +  C * ||V2||,

where ``K2 = K - K1``, ``V2 = V - V1`` and ``C = ||softmax(q K^T)||``. Vector
norms are Euclidean; matrix norms are Frobenius (an upper bound of the
spectral norm, so the inequality stays valid).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import softmax_array

# equality cases (e.g. a single key, none kept) may differ by an ulp
ROUNDOFF = 1e-12

CSV_COLUMNS = ("trial_id", "n", "d", "subset_size", "strategy", "error", "bound", "violated")


@dataclass
class BoundTrial:
    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    subset: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        self.K = np.atleast_2d(np.asarray(self.K, dtype=np.float64))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        self.subset = np.unique(np.asarray(self.subset, dtype=np.int64).reshape(-1))
        keep = np.zeros(len(self.K), dtype=bool)
        keep[self.subset] = True
        self.mask = keep
        self.K1 = np.where(keep[:, None], self.K, 0.0)
        self.V1 = np.where(keep[:, None], self.V, 0.0)
        self.K2 = self.K - self.K1
        self.V2 = self.V - self.V1

    @property
    def n(self) -> int:
        return len(self.K)

    @property
    def d(self) -> int:
        return self.K.shape[1]

    @property
    def C(self) -> float:
        return float(np.linalg.norm(softmax_array(self.K @ self.q)))


def is_violation(err: float, bound: float) -> bool:
    return err > bound + ROUNDOFF * max(1.0, bound)


def full_attention(q, K, V) -> np.ndarray:
    return softmax_array(K @ q) @ V


def appendix_sparse_attention(trial: BoundTrial) -> np.ndarray:
    """Zero-padded sparse attention: excluded logits are 0, excluded values are 0."""
    return softmax_array(trial.K1 @ trial.q) @ trial.V1


def attention_error_and_bound(trial: BoundTrial, matrix_norm: str = "fro") -> tuple[float, float]:
    fa = full_attention(trial.q, trial.K, trial.V)
    err = float(np.linalg.norm(fa - appendix_sparse_attention(trial)))
    mn = (lambda M: np.linalg.norm(M, 2)) if matrix_norm == "spectral" else np.linalg.norm
    bound = float(np.linalg.norm(trial.K2 @ trial.q) * mn(trial.V1) + trial.C * mn(trial.V2))
    return err, bound


def random_trial(rng: np.random.Generator, max_n: int = 32, max_d: int = 8,
                 low: float = -2.0, high: float = 2.0) -> BoundTrial:
    n = int(rng.integers(1, max_n + 1))
    d = int(rng.integers(1, max_d + 1))
    size = int(rng.integers(0, n + 1))
    return BoundTrial(
        q=rng.uniform(low, high, d),
        K=rng.uniform(low, high, (n, d)),
        V=rng.uniform(low, high, (n, d)),
        subset=rng.choice(n, size=size, replace=False),
    )


def verify_bound(n_trials: int = 1000, seed: int = 0, max_n: int = 32,
                 max_d: int = 8) -> Iterator[dict]:
    """Yield one CSV row per randomized trial."""
    rng = np.random.default_rng(seed)
    for i in range(n_trials):
        t = random_trial(rng, max_n, max_d)
        err, bound = attention_error_and_bound(t)
        yield {
            "trial_id": i, "n": t.n, "d": t.d, "subset_size": len(t.subset),
            "strategy": "random_subset", "error": err, "bound": bound,
            "violated": int(is_violation(err, bound)),
        }


def count_violations(n_trials: int = 1000, seed: int = 0, matrix_norm: str = "fro") -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_trials):
        err, bound = attention_error_and_bound(random_trial(rng), matrix_norm)
        bad += is_violation(err, bound)
    return bad


def write_csv(rows: Iterable[dict], fp, header_comment: str | None = None) -> None:
    if header_comment:
        fp.write(f"# {header_comment}\n")
    w = csv.DictWriter(fp, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# neighborhood selection on 2D grids


def feature_grid(rng: np.random.Generator, H: int, W: int, d: int, blur: float = 0.0) -> np.ndarray:
    """Standard-normal features per channel, optionally Gaussian-blurred then re-standardized."""
    f = rng.normal(size=(H, W, d))
    if blur > 0:
        f = gaussian_filter(f, sigma=(blur, blur, 0), mode="nearest")
        f = (f - f.mean(axis=(0, 1))) / f.std(axis=(0, 1))
    return f


def select_gaussian(rng, H, W, row, col, gamma, n) -> np.ndarray:
    off = rng.normal(0.0, gamma, size=(n, 2))
    r = np.clip(np.rint(row + off[:, 0]), 0, H - 1).astype(np.int64)
    c = np.clip(np.rint(col + off[:, 1]), 0, W - 1).astype(np.int64)
    return np.unique(r * W + c)


def select_uniform(rng, H, W, size, exclude) -> np.ndarray:
    pool = np.setdiff1d(np.arange(H * W), exclude)
    return rng.choice(pool, size=min(size, len(pool)), replace=False)


STRATEGIES = ("gaussian", "uniform")


def neighborhood_errors(features: np.ndarray, rng: np.random.Generator, gamma: float = 2.0,
                        n_samples: int = 16, n_queries: int = 32) -> dict[str, np.ndarray]:
    """Approximation error of both selection strategies for self-attention queries.

    Each query is the feature at a random cell. The query's own cell is never
    selected, and uniform selection takes as many distinct keys as the
    Gaussian draw produced, so only the geometry of the selection differs.
    """
    H, W, d = features.shape
    K = features.reshape(H * W, d)
    out = {s: [] for s in STRATEGIES}
    bounds = {s: [] for s in STRATEGIES}
    for _ in range(n_queries):
        row, col = int(rng.integers(H)), int(rng.integers(W))
        me = row * W + col
        gsel = select_gaussian(rng, H, W, row, col, gamma, n_samples)
        gsel = gsel[gsel != me]
        usel = select_uniform(rng, H, W, len(gsel), [me])
        for name, sel in (("gaussian", gsel), ("uniform", usel)):
            err, bnd = attention_error_and_bound(BoundTrial(K[me], K, K, sel))
            out[name].append(err)
            bounds[name].append(bnd)
    res = {s: np.array(v) for s, v in out.items()}
    res.update({f"{s}_bound": np.array(v) for s, v in bounds.items()})
    return res


def bound_tightness_report(repetitions: int = 200, seed: int = 0, H: int = 16, W: int = 16,
                           d: int = 8, blur: float = 2.0, gamma: float = 2.0, n_samples: int = 16,
                           n_queries: int = 32) -> list[dict]:
    """One row per (repetition, strategy) with mean error and mean bound.

    ``blur=0`` gives the white-noise control; ``blur>0`` spatially smooth features.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for rep in range(repetitions):
        feats = feature_grid(rng, H, W, d, blur)
        res = neighborhood_errors(feats, rng, gamma, n_samples, n_queries)
        for s in STRATEGIES:
            rows.append({
                "repetition": rep, "strategy": s,
                "mean_error": float(res[s].mean()),
                "mean_bound": float(res[f"{s}_bound"].mean()),
                "violations": int(sum(map(is_violation, res[s], res[f"{s}_bound"]))),
            })
    return rows


def gaussian_win_rate(rows: list[dict]) -> float:
    by_rep: dict[int, dict[str, float]] = {}
    for r in rows:
        by_rep.setdefault(r["repetition"], {})[r["strategy"]] = r["mean_error"]
    wins = [v["gaussian"] < v["uniform"] for v in by_rep.values()]
    return float(np.mean(wins))
