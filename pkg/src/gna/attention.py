"""Attention kernels over 2D feature maps.

Every map is an ``(H, W, d)`` :class:`~gna.tensor.Tensor`. Sparse kernels draw
integer key positions per query, softmax over the drawn keys only (duplicates
keep their own slot), and are differentiable in Q, K and V; the draws
themselves are constants of the graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, EmptyKeysError, ShapeError
from .tensor import Tensor, as_tensor, matmul, reshape, softmax, transpose, scale

DEFAULT_GAMMAS = (3.0, 5.0, 10.0)
DEFAULT_SAMPLES = 32
DEFAULT_REPEATS = 3


@dataclass
class GnaConfig:
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    samples_per_focus: int = DEFAULT_SAMPLES
    test_repeats: int = DEFAULT_REPEATS
    seed: int = 0

    def __post_init__(self):
        self.gammas = tuple(float(g) for g in self.gammas)
        if not self.gammas or any(g <= 0 for g in self.gammas):
            raise ContractError(f"gammas must be non-empty and positive, got {self.gammas}")
        if self.samples_per_focus < 1 or self.test_repeats < 1:
            raise ContractError("samples_per_focus and test_repeats must be >= 1")

    @property
    def n_focus(self) -> int:
        return len(self.gammas)


@dataclass
class SampleDraw:
    query: tuple[int, int]
    keys: list[tuple[int, int]] = field(default_factory=list)
    focus: int = 0


def _check_maps(Q, K, V):
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.data.ndim != 3 or K.data.ndim != 3 or V.data.ndim != 3:
        raise ShapeError("attention maps must be (H, W, d)")
    if K.shape[:2] != V.shape[:2]:
        raise ShapeError(f"keys {K.shape} and values {V.shape} are not aligned")
    if Q.shape[2] != K.shape[2]:
        raise ShapeError(f"query dim {Q.shape[2]} != key dim {K.shape[2]}")
    return Q, K, V


# ---------------------------------------------------------------------------
# neighborhood generators: return flat key indices of shape (H*W, S)


def _query_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    r, c = np.divmod(np.arange(H * W), W)
    return r.astype(np.float64), c.astype(np.float64)


def _to_flat(rows, cols, H: int, W: int) -> np.ndarray:
    rows = np.clip(np.rint(rows), 0, H - 1).astype(np.int64)
    cols = np.clip(np.rint(cols), 0, W - 1).astype(np.int64)
    return rows * W + cols


def gaussian_draws(H: int, W: int, gamma: float, n: int, rng: np.random.Generator,
                   key_shape: tuple[int, int] | None = None) -> np.ndarray:
    """One Gaussian neighborhood of ``n`` keys for every query of an HxW grid."""
    KH, KW = key_shape or (H, W)
    r, c = _query_grid(H, W)
    off = rng.normal(0.0, gamma, size=(H * W, n, 2))
    return _to_flat(r[:, None] + off[..., 0], c[:, None] + off[..., 1], KH, KW)


def uniform_draws(H: int, W: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, H * W, size=(H * W, n), dtype=np.int64)


def disk_draws(H: int, W: int, gamma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    r, c = _query_grid(H, W)
    radius = 3.0 * gamma * np.sqrt(rng.random((H * W, n)))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(H * W, n))
    return _to_flat(r[:, None] + radius * np.sin(theta), c[:, None] + radius * np.cos(theta), H, W)


def window_draws(H: int, W: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """All cells of a ``window`` x ``window`` patch around each query and a validity mask."""
    half = window // 2
    r, c = _query_grid(H, W)
    dr, dc = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    rows = r[:, None] + dr.reshape(-1)
    cols = c[:, None] + dc.reshape(-1)
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    flat = np.where(valid, rows * W + cols, 0).astype(np.int64)
    return flat, valid


def sample_gaussian_neighborhood(center, gamma: float, n: int, bounds,
                                 rng: np.random.Generator) -> SampleDraw:
    H, W = bounds
    off = rng.normal(0.0, gamma, size=(n, 2))
    rows = np.clip(np.rint(center[0] + off[:, 0]), 0, H - 1).astype(int)
    cols = np.clip(np.rint(center[1] + off[:, 1]), 0, W - 1).astype(int)
    return SampleDraw(query=(int(center[0]), int(center[1])),
                      keys=list(zip(rows.tolist(), cols.tolist())))


# ---------------------------------------------------------------------------
# the differentiable sampled-attention op


def sampled_attention(q: Tensor, k: Tensor, v: Tensor, idx: np.ndarray,
                      valid: np.ndarray | None = None, backend: str | None = None) -> Tensor:
    """Grouped sparse attention on flattened rows.

    ``q`` is ``(nq, d)``, ``k``/``v`` are ``(nk, d)``, ``idx`` is ``(nq, G, S)``.
    Each group is softmax-normalized over its ``S`` slots; groups are averaged.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("sampled_attention expects row matrices")
    if idx.ndim != 3 or idx.shape[0] != q.shape[0]:
        raise ShapeError(f"idx shape {idx.shape} does not match {q.shape[0]} queries")
    if idx.shape[2] == 0:
        raise EmptyKeysError("no keys to attend to")
    if k.shape[0] != v.shape[0]:
        raise ShapeError("keys and values differ in length")
    sc = 1.0 / math.sqrt(q.shape[1])
    out, w = kernels.sampled_attention_forward(q.data, k.data, v.data, idx, valid, sc, backend)

    def bw(g):
        return kernels.sampled_attention_backward(g, q.data, k.data, v.data, idx, w, sc, backend)

    res = Tensor.from_op(out, (q, k, v), bw)
    return res


def sampled_attention_weights(q, k, v, idx, valid=None) -> np.ndarray:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    sc = 1.0 / math.sqrt(q.shape[1])
    return kernels.sampled_attention_forward(q.data, k.data, v.data, idx, valid, sc)[1]


def _map_attention(Q: Tensor, K: Tensor, V: Tensor, idx: np.ndarray,
                   valid: np.ndarray | None = None) -> Tensor:
    H, W, d = Q.shape
    q = reshape(Q, (H * W, d))
    k = reshape(K, (-1, K.shape[2]))
    v = reshape(V, (-1, V.shape[2]))
    out = sampled_attention(q, k, v, idx, valid)
    return reshape(out, (H, W, V.shape[2]))


# ---------------------------------------------------------------------------
# public kernels


def scaled_dot_attention(q, K, V) -> np.ndarray:
    """``softmax(K q / sqrt(d))^T V`` for a single query vector."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if K.shape[0] == 0 or K.size == 0:
        raise EmptyKeysError("scaled_dot_attention needs at least one key")
    if K.shape[1] != q.size or V.shape[0] != K.shape[0]:
        raise ShapeError(f"incompatible q {q.shape}, K {K.shape}, V {V.shape}")
    logits = K @ q / math.sqrt(q.size)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return w @ V


def full_attention_2d(Q, K, V) -> Tensor:
    Q, K, V = _check_maps(Q, K, V)
    H, W, d = Q.shape
    q = reshape(Q, (H * W, d))
    k = reshape(K, (-1, d))
    v = reshape(V, (-1, V.shape[2]))
    w = softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)), axis=1)
    return reshape(matmul(w, v), (H, W, V.shape[2]))


def gna_single(Q, K, V, gamma: float, n: int, rng: np.random.Generator,
               draws: np.ndarray | None = None) -> Tensor:
    """One Gaussian-neighborhood draw per query.

    ``draws`` may force the key set: flat indices of shape ``(H*W, S)``.
    """
    Q, K, V = _check_maps(Q, K, V)
    H, W, _ = Q.shape
    if draws is None:
        draws = gaussian_draws(H, W, gamma, n, rng, K.shape[:2])
    draws = np.asarray(draws, dtype=np.int64)
    return _map_attention(Q, K, V, draws.reshape(H * W, 1, -1))


def multi_focus_draws(H: int, W: int, config: GnaConfig, rng: np.random.Generator,
                      repeats: int = 1, key_shape=None) -> np.ndarray:
    """Flat key indices ``(H*W, repeats*F, N)``; group order is repeat-major."""
    groups = [
        gaussian_draws(H, W, g, config.samples_per_focus, rng, key_shape)
        for _ in range(repeats) for g in config.gammas
    ]
    return np.stack(groups, axis=1)


def multi_focus_gna(Q, K, V, config: GnaConfig, rng: np.random.Generator,
                    draws: np.ndarray | None = None) -> Tensor:
    """Average of per-focus GNA outputs, one draw per focus per query."""
    Q, K, V = _check_maps(Q, K, V)
    H, W, _ = Q.shape
    if draws is None:
        draws = multi_focus_draws(H, W, config, rng, key_shape=K.shape[:2])
    return _map_attention(Q, K, V, np.asarray(draws, dtype=np.int64))


def gna_test(Q, K, V, config: GnaConfig, rng: np.random.Generator) -> Tensor:
    """Monte-Carlo estimate: mean of ``test_repeats`` independent multi-focus draws."""
    Q, K, V = _check_maps(Q, K, V)
    H, W, _ = Q.shape
    draws = multi_focus_draws(H, W, config, rng, config.test_repeats, K.shape[:2])
    # mean over T*F equal-size groups == mean over T of the per-draw focus means
    return _map_attention(Q, K, V, draws)


def local_attention(Q, K, V, window: int = 9) -> Tensor:
    Q, K, V = _check_maps(Q, K, V)
    if K.shape[:2] != Q.shape[:2]:
        raise ShapeError("local attention needs aligned query and key grids")
    H, W, _ = Q.shape
    flat, valid = window_draws(H, W, window)
    return _map_attention(Q, K, V, flat[:, None, :], valid[:, None, :].astype(np.uint8))


def uniform_random_attention(Q, K, V, n: int, rng: np.random.Generator,
                             draws: np.ndarray | None = None) -> Tensor:
    Q, K, V = _check_maps(Q, K, V)
    H, W, _ = Q.shape
    if draws is None:
        draws = rng.integers(0, K.shape[0] * K.shape[1], size=(H * W, n), dtype=np.int64)
    return _map_attention(Q, K, V, np.asarray(draws, dtype=np.int64)[:, None, :])


def disk_random_attention(Q, K, V, gamma: float, n: int, rng: np.random.Generator) -> Tensor:
    Q, K, V = _check_maps(Q, K, V)
    if K.shape[:2] != Q.shape[:2]:
        raise ShapeError("disk attention needs aligned query and key grids")
    H, W, _ = Q.shape
    return _map_attention(Q, K, V, disk_draws(H, W, gamma, n, rng)[:, None, :])


KINDS = ("gna", "local", "uniform", "disk")


def attend(kind: str, Q, K, V, config: GnaConfig, rng: np.random.Generator,
           test: bool = False) -> Tensor:
    """Dispatch used by the network's attention sites.

    Single-focus variants use the middle focus width. ``test`` averages
    ``test_repeats`` draws for the stochastic kernels.
    """
    reps = config.test_repeats if test else 1
    if kind == "gna":
        if test:
            return gna_test(Q, K, V, config, rng)
        return multi_focus_gna(Q, K, V, config, rng)
    if kind == "local":
        return local_attention(Q, K, V)
    Q, K, V = _check_maps(Q, K, V)
    H, W, _ = Q.shape
    n = config.samples_per_focus
    gamma = config.gammas[len(config.gammas) // 2]
    if kind == "uniform":
        idx = np.stack([uniform_draws(H, W, n, rng) for _ in range(reps)], axis=1)
    elif kind == "disk":
        idx = np.stack([disk_draws(H, W, gamma, n, rng) for _ in range(reps)], axis=1)
    else:
        raise ContractError(f"unknown attention kind {kind!r}")
    return _map_attention(Q, K, V, idx)
