"""Peak extraction and localization/counting metrics.

Matching follows the keypoint-style protocol: detections are visited by
descending score and each claims the nearest unmatched ground-truth head.
With ``mode="oks"`` (default) a pair counts at similarity level ``t`` when
``exp(-d^2 / (2 sigma^2)) >= t``, i.e. ``d <= sigma * sqrt(-2 ln t)``; AP and AR
are reported for ``t = 0.50, 0.55, ..., 0.95``. ``mode="distance"`` uses the
single rule ``d <= sigma``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

LEVELS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SIGMAS = (5.0, 20.0, 40.0)


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float


def find_peaks(prob: np.ndarray, threshold: float = 0.5, window: int = 3) -> list[Detection]:
    """Window maxima at or above ``threshold``.

    A pixel must exceed every neighbor that precedes it in raster order and be
    at least as large as every neighbor that follows it, so a flat plateau
    reports only its top-left cell.
    """
    if window < 3 or window % 2 == 0:
        raise ContractError("window must be odd and >= 3")
    prob = np.asarray(prob, dtype=np.float64)
    H, W = prob.shape
    h = window // 2
    padded = np.pad(prob, h, constant_values=-np.inf)
    keep = prob >= threshold
    for dr in range(-h, h + 1):
        for dc in range(-h, h + 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[h + dr:h + dr + H, h + dc:h + dc + W]
            if dr < 0 or (dr == 0 and dc < 0):
                keep &= prob > nb
            else:
                keep &= prob >= nb
    rows, cols = np.nonzero(keep)
    scores = prob[rows, cols]
    order = np.argsort(-scores, kind="stable")
    return [Detection(float(cols[i]), float(rows[i]), float(scores[i])) for i in order]


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]
    det_is_tp: list[bool]


def match_detections(dets: Sequence[Detection], gts: Sequence, distance_threshold: float) -> MatchResult:
    """Greedy matching; ``gts`` are ``(x, y)`` pairs or objects with ``x``/``y``."""
    g = np.array([(p.x, p.y) if hasattr(p, "x") else tuple(p) for p in gts], dtype=np.float64).reshape(-1, 2)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    free = np.ones(len(g), dtype=bool)
    pairs = []
    flags = [False] * len(dets)
    for i in order:
        if not free.any():
            break
        d = np.hypot(g[:, 0] - dets[i].x, g[:, 1] - dets[i].y)
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= distance_threshold:
            free[j] = False
            pairs.append((i, j))
            flags[i] = True
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(g) - tp, pairs, flags)


def level_threshold(sigma: float, level: float) -> float:
    return sigma * math.sqrt(-2.0 * math.log(level))


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float:
    """Area under the precision envelope of the score-ranked PR curve."""
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def ap_ar(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence],
          sigma: float, mode: str = "oks", levels: Sequence[float] = LEVELS):
    """Return ``(AP list, AR list, mAP, mAR)`` pooled over images."""
    if len(dets_per_image) != len(gts_per_image):
        raise ContractError("detections and ground truth cover different image counts")
    if mode == "oks":
        thresholds = [level_threshold(sigma, t) for t in levels]
    elif mode == "distance":
        thresholds = [float(sigma)]
    else:
        raise ContractError(f"unknown matching mode {mode!r}")
    n_gt = sum(len(g) for g in gts_per_image)
    aps, ars = [], []
    for thr in thresholds:
        scores, flags, tp = [], [], 0
        for dets, gts in zip(dets_per_image, gts_per_image):
            m = match_detections(dets, gts, thr)
            scores += [d.score for d in dets]
            flags += m.det_is_tp
            tp += m.tp
        aps.append(average_precision(scores, flags, n_gt))
        ars.append(tp / n_gt if n_gt else 0.0)
    return aps, ars, float(np.mean(aps)), float(np.mean(ars))


def counting_metrics(predicted: Sequence[float], true: Sequence[float]) -> tuple[float, float]:
    """Mean absolute error and root-mean-square error of per-image counts."""
    if len(predicted) != len(true):
        raise ContractError("count lists differ in length")
    if not len(true):
        return 0.0, 0.0
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff ** 2)))


@dataclass
class MetricReport:
    ap: dict[float, list[float]] = field(default_factory=dict)
    ar: dict[float, list[float]] = field(default_factory=dict)
    mAP: dict[float, float] = field(default_factory=dict)
    mAR: dict[float, float] = field(default_factory=dict)
    mae: float = 0.0
    mse: float = 0.0
    levels: tuple[float, ...] = LEVELS

    def rows(self) -> list[dict]:
        out = []
        for s in self.ap:
            for t, a, r in zip(self.levels, self.ap[s], self.ar[s]):
                out.append({"sigma": f"{s:g}", "level": f"{t:.2f}", "AP": a, "AR": r})
            out.append({"sigma": f"{s:g}", "level": "mean", "AP": self.mAP[s], "AR": self.mAR[s]})
        out.append({"sigma": "", "level": "MAE", "AP": self.mae, "AR": ""})
        out.append({"sigma": "", "level": "MSE", "AP": self.mse, "AR": ""})
        return out

    def write_csv(self, fp, header_comment: str | None = None) -> None:
        if header_comment:
            fp.write(f"# {header_comment}\n")
        w = csv.DictWriter(fp, fieldnames=("sigma", "level", "AP", "AR"), lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def evaluate(dets_per_image, gts_per_image, sigmas: Sequence[float] = SIGMAS,
             mode: str = "oks") -> MetricReport:
    levels = LEVELS if mode == "oks" else (1.0,)
    rep = MetricReport(levels=levels)
    for s in sigmas:
        aps, ars, m_ap, m_ar = ap_ar(dets_per_image, gts_per_image, s, mode)
        rep.ap[s], rep.ar[s], rep.mAP[s], rep.mAR[s] = aps, ars, m_ap, m_ar
    rep.mae, rep.mse = counting_metrics([len(d) for d in dets_per_image],
                                        [len(g) for g in gts_per_image])
    return rep
