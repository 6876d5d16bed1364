"""Minimal SVG line and bar charts for the CSV outputs."""

from __future__ import annotations

import csv
import math
from html import escape
from pathlib import Path

from .errors import IoError, ValidationError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=55)


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Rows of a CSV whose leading ``#`` lines are comments."""
    try:
        with open(path, newline="") as fp:
            lines = [ln for ln in fp if not ln.startswith("#") and ln.strip()]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise ValidationError(f"{path} is empty")
    reader = csv.DictReader(lines)
    rows = list(reader)
    if not rows:
        raise ValidationError(f"{path} has a header but no rows")
    return list(reader.fieldnames or []), rows


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (step * m) <= n:
            step *= m
            break
    start = math.floor(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step) + 2) if start + i * step <= hi + 1e-12]


def _frame(title, xlabel, ylabel, comment):
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'font-family="sans-serif" font-size="12">']
    if comment:
        out.append(f"<!-- {escape(comment)} -->")
    out.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    out.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>')
    out.append(f'<text x="{MARGIN["left"] + (WIDTH - MARGIN["left"] - MARGIN["right"]) / 2}" '
               f'y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>')
    return out


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
               log_y: bool = False, comment: str = "") -> str:
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValidationError("nothing to plot")
    tf = (lambda v: math.log10(max(v, 1e-300))) if log_y else (lambda v: v)
    xs = [p[0] for p in pts]
    ys = [tf(p[1]) for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    sx = lambda v: MARGIN["left"] + (v - x0) / (x1 - x0) * pw
    sy = lambda v: MARGIN["top"] + ph - (v - y0) / (y1 - y0) * ph
    out = _frame(title, xlabel, ylabel + (" (log10)" if log_y else ""), comment)
    out.append(f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="#888"/>')
    for t in _ticks(y0, y1):
        if y0 - 1e-12 <= t <= y1 + 1e-12:
            out.append(f'<text x="{MARGIN["left"] - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.4g}</text>')
    for t in _ticks(x0, x1):
        if x0 - 1e-12 <= t <= x1 + 1e-12:
            out.append(f'<text x="{sx(t):.1f}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                       f'text-anchor="middle">{t:.4g}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(tf(y)):.1f}" for x, y in sorted(s))
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(tf(y)):.1f}" r="3" fill="{color}"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        out.append(f'<text x="{WIDTH - MARGIN["right"] + 12}" y="{ly}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(labels: list[str], values: list[float], title: str, ylabel: str, comment: str = "") -> str:
    if not values:
        raise ValidationError("nothing to plot")
    top = max(max(values), 1e-12)
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    bw = pw / len(values)
    out = _frame(title, "", ylabel, comment)
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = max(v, 0.0) / top * ph
        x = MARGIN["left"] + i * bw
        out.append(f'<rect x="{x + 0.1 * bw:.1f}" y="{MARGIN["top"] + ph - h:.1f}" width="{0.8 * bw:.1f}" '
                   f'height="{h:.1f}" fill="{PALETTE[0]}"/>')
        out.append(f'<text x="{x + bw / 2:.1f}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                   f'text-anchor="middle" font-size="10">{escape(lab)}</text>')
        out.append(f'<text x="{x + bw / 2:.1f}" y="{MARGIN["top"] + ph - h - 4:.1f}" '
                   f'text-anchor="middle" font-size="10">{v:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def chart_for(path, comment: str = "") -> str:
    """Pick a chart from the CSV's columns."""
    cols, rows = read_csv(path)
    name = Path(path).stem
    try:
        if {"epoch", "mean_loss"} <= set(cols):
            pts = [(float(r["epoch"]), float(r["mean_loss"])) for r in rows]
            return line_chart({"mean loss": pts}, f"{name}: training loss", "epoch", "loss", comment=comment)
        if {"kernel", "keys", "per_query_seconds"} <= set(cols):
            series: dict[str, list] = {}
            for r in rows:
                series.setdefault(r["kernel"], []).append((float(r["keys"]), float(r["per_query_seconds"])))
            return line_chart(series, f"{name}: time per query", "keys", "seconds", log_y=True, comment=comment)
        if {"sigma", "level", "AP", "AR"} <= set(cols):
            means = [r for r in rows if r["level"] == "mean"]
            labels = [f"mAP@{r['sigma']}" for r in means] + [f"mAR@{r['sigma']}" for r in means]
            values = [float(r["AP"]) for r in means] + [float(r["AR"]) for r in means]
            return bar_chart(labels, values, f"{name}: localization", "score", comment=comment)
        if {"error", "bound", "subset_size"} <= set(cols):
            series = {"error": [], "bound": []}
            for r in rows:
                series["error"].append((float(r["subset_size"]), float(r["error"])))
                series["bound"].append((float(r["subset_size"]), float(r["bound"])))
            return line_chart(series, f"{name}: error and bound", "kept keys", "value", log_y=True,
                              comment=comment)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed row ({exc})") from exc
    raise ValidationError(f"{path}: no chart for columns {cols}")
