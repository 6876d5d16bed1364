"""Weighted BCE loss, plain SGD and the epoch loop."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as Mo
from .data import Clip, render_target
from .errors import ContractError, DivergenceError, IoError, ShapeError
from .tensor import Tensor, as_tensor, backward

EPS = 1e-7
REFERENCE_LR = 2e-6


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.03
    batch_size: int = 4
    w_pos: float = 50.0
    target_radius: int = 2
    seed: int = 0
    clip_norm: float = 0.0  # global gradient-norm cap, 0 disables
    paper_lr: float = REFERENCE_LR

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not (self.lr >= 0 and self.w_pos > 0 and self.target_radius >= 0 and self.clip_norm >= 0):
            raise ContractError("lr, target_radius and clip_norm must be >= 0 and w_pos > 0")


def weighted_bce(pred, target, w_pos: float = 50.0) -> Tensor:
    """Mean over pixels of ``-(w t log p + (1-t) log(1-p))`` with clamped ``p``.

    For batched input the per-map means are averaged, which equals the mean
    over all pixels since the maps share a size.
    """
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction {pred.shape} and target {t.shape} differ")
    p = np.clip(pred.data, EPS, 1.0 - EPS)
    loss = -np.mean(w_pos * t * np.log(p) + (1.0 - t) * np.log1p(-p))
    inside = (pred.data >= EPS) & (pred.data <= 1.0 - EPS)

    def bw(g):
        dp = -(w_pos * t / p - (1.0 - t) / (1.0 - p)) / t.size
        return (g * dp * inside,)

    return Tensor.from_op(np.asarray(loss), (pred,), bw)


def grad_norm(params: Mo.Parameters) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))


def sgd_step(params: Mo.Parameters, lr: float, clip_norm: float = 0.0) -> float:
    """``p -= lr * g`` for every parameter, then clear the gradients.

    With ``clip_norm > 0`` the whole gradient is rescaled to at most that
    global L2 norm first. Returns the norm before clipping.
    """
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {', '.join(missing[:3])}")
    norm = grad_norm(params)
    scale = lr
    if clip_norm > 0 and norm > clip_norm:
        scale = lr * clip_norm / norm
    for p in params.values():
        p.data -= scale * p.grad
        p.grad = None
    return norm


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    seconds: float


LOG_COLUMNS = ("epoch", "mean_loss", "seconds")


def batch_arrays(clips: Sequence[Clip], radius: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([c.frames for c in clips])
    H, W = x.shape[2:4]
    y = np.stack([render_target([(h.x, h.y) for h in c.target_heads], H, W, radius) for c in clips])
    return x, y


def train_loop(model_cfg: Mo.ModelConfig, train_cfg: TrainConfig, clips: Sequence[Clip],
               checkpoint_path=None, log_path=None, params: Mo.Parameters | None = None,
               header: str | None = None,
               on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train in place; returns ``(params, records)``.

    The shuffle order, the parameter init and every attention draw derive from
    ``train_cfg.seed``. A checkpoint is written after each completed epoch so a
    divergence leaves the last good one on disk.
    """
    if not clips:
        raise ContractError("empty training set")
    if any(c.m != model_cfg.clip_length for c in clips):
        raise ContractError("clip length differs from the model's")
    if params is None:
        params = Mo.init_params(model_cfg, train_cfg.seed)
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    draw_rng = np.random.default_rng([train_cfg.seed, 2])
    records: list[EpochRecord] = []
    log_fp = None
    if log_path is not None:
        try:
            log_fp = open(log_path, "w", newline="")
        except OSError as exc:
            raise IoError(f"cannot open training log {log_path}: {exc}") from exc
        if header:
            log_fp.write(f"# {header}\n")
        log_fp.write(",".join(LOG_COLUMNS) + "\n")
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            order = order_rng.permutation(len(clips))
            total, seen = 0.0, 0
            for s in range(0, len(order), train_cfg.batch_size):
                batch = [clips[i] for i in order[s:s + train_cfg.batch_size]]
                x, y = batch_arrays(batch, train_cfg.target_radius)
                loss = weighted_bce(Mo.forward_batch(x, params, model_cfg, draw_rng, "train"),
                                    y, train_cfg.w_pos)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(f"loss became {value} in epoch {epoch}")
                backward(loss)
                sgd_step(params, train_cfg.lr, train_cfg.clip_norm)
                total += value * len(batch)
                seen += len(batch)
            rec = EpochRecord(epoch, total / seen, time.perf_counter() - t0)
            records.append(rec)
            if checkpoint_path is not None:
                tmp = f"{checkpoint_path}.tmp"
                Mo.save_checkpoint(tmp, params, model_cfg, {"epoch": epoch, "seed": train_cfg.seed})
                os.replace(tmp, checkpoint_path)
            if log_fp is not None:
                log_fp.write(f"{rec.epoch},{rec.mean_loss:.10g},{rec.seconds:.3f}\n")
                log_fp.flush()
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if log_fp is not None:
            log_fp.close()
    return params, records


def read_log(path) -> list[EpochRecord]:
    with open(path) as fp:
        rows = csv.DictReader(line for line in fp if not line.startswith("#"))
        return [EpochRecord(int(r["epoch"]), float(r["mean_loss"]), float(r["seconds"])) for r in rows]


def predict(params: Mo.Parameters, cfg: Mo.ModelConfig, clips: Sequence[Clip], seed: int = 0,
            batch_size: int = 8, mode: str = "test") -> np.ndarray:
    """Localization maps of the objective frames, ``(n, H, W)``."""
    rng = np.random.default_rng([seed, 3])
    frozen = {k: Tensor(v.data) for k, v in params.items()}  # no tape
    out = []
    for s in range(0, len(clips), batch_size):
        x = np.stack([c.frames for c in clips[s:s + batch_size]])
        out.append(Mo.forward_batch(x, frozen, cfg, rng, mode).data)
    return np.concatenate(out) if out else np.zeros((0,))


def ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
