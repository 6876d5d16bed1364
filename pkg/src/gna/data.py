"""Head annotations, PPM frame I/O and a synthetic crowd-video generator.

Annotation files hold one head per line::

    frame_index x y id [x0 y0 x1 y1]

whitespace separated, ``#`` starts a comment, frames are indexed from 0 and
``x`` is the column coordinate.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import ContractError, FormatError, IoError, ValidationError

FRAME_PATTERN = "frame_{:06d}.ppm"
ANNOTATION_FILE = "annotations.txt"


@dataclass(frozen=True)
class Head:
    x: float
    y: float
    id: int
    bbox: tuple[float, float, float, float] | None = None
    occluded: bool = field(default=False, compare=False)


FrameAnnotation = list  # list[Head]


@dataclass
class Video:
    frames: np.ndarray  # (L, H, W, 3) in [0, 1]
    annotations: list[FrameAnnotation]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class Clip:
    frames: np.ndarray  # (m, H, W, 3)
    annotations: list[FrameAnnotation]
    start: int = 0

    @property
    def m(self) -> int:
        return len(self.frames)

    @property
    def objective(self) -> int:
        return self.m // 2

    @property
    def target_heads(self) -> FrameAnnotation:
        return self.annotations[self.objective]


def validate_frame(heads: FrameAnnotation, size: tuple[int, int] | None = None) -> None:
    seen = set()
    for h in heads:
        if h.id in seen:
            raise ValidationError(f"duplicate head id {h.id}")
        seen.add(h.id)
        if h.x < 0 or h.y < 0:
            raise ValidationError(f"head {h.id} has negative coordinates")
        if size is not None and (h.x >= size[1] or h.y >= size[0]):
            raise ValidationError(f"head {h.id} at ({h.x}, {h.y}) outside frame {size}")
        if h.bbox is not None:
            x0, y0, x1, y1 = h.bbox
            if not (x0 <= h.x <= x1 and y0 <= h.y <= y1):
                raise ValidationError(f"bbox of head {h.id} does not contain its center")


# ---------------------------------------------------------------------------
# annotation text format


def parse_annotations(text: str, size: tuple[int, int] | None = None) -> list[FrameAnnotation]:
    frames: dict[int, list[Head]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 8):
            raise FormatError(f"expected 4 or 8 fields, got {len(parts)}", lineno)
        try:
            fi = int(parts[0])
            x, y = float(parts[1]), float(parts[2])
            hid = int(parts[3])
            bbox = tuple(float(v) for v in parts[4:]) if len(parts) == 8 else None
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from None
        if fi < 0:
            raise FormatError("negative frame index", lineno)
        if not all(np.isfinite([x, y])):
            raise FormatError("non-finite coordinate", lineno)
        frames.setdefault(fi, []).append(Head(x, y, hid, bbox))
    if not frames:
        return []
    out = [frames.get(i, []) for i in range(max(frames) + 1)]
    for heads in out:
        validate_frame(heads, size)
    return out


def load_annotations(path, size: tuple[int, int] | None = None) -> list[FrameAnnotation]:
    """Read one video's annotation file; ``size`` is ``(H, W)`` for bounds checks."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse_annotations(text, size)


def format_annotations(frames: list[FrameAnnotation], comment: str | None = None) -> str:
    lines = [f"# {comment}"] if comment else []
    for fi, heads in enumerate(frames):
        for h in heads:
            fields = [str(fi), repr(float(h.x)), repr(float(h.y)), str(h.id)]
            if h.bbox is not None:
                fields += [repr(float(v)) for v in h.bbox]
            lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def save_annotations(path, frames: list[FrameAnnotation], comment: str | None = None) -> None:
    try:
        Path(path).write_text(format_annotations(frames, comment))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# frames


def write_ppm(path, frame: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape[:2]
    with open(path, "wb") as fp:
        fp.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fp.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fp:
        raw = fp.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only binary 8-bit PPM is supported")
    W, H = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + H * W * 3], dtype=np.uint8)
    if data.size != H * W * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape(H, W, 3).astype(np.float64) / 255.0


def save_video(directory, video: Video, comment: str | None = None) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(video.frames):
            write_ppm(d / FRAME_PATTERN.format(i), frame)
    except OSError as exc:
        raise IoError(f"cannot write video to {d}: {exc}") from exc
    save_annotations(d / ANNOTATION_FILE, video.annotations, comment)


def load_video(directory) -> Video:
    d = Path(directory)
    paths = sorted(d.glob("frame_*.ppm"))
    if not paths:
        raise IoError(f"no frames in {d}")
    frames = np.stack([read_ppm(p) for p in paths])
    ann = load_annotations(d / ANNOTATION_FILE, frames.shape[1:3])
    ann += [[] for _ in range(len(frames) - len(ann))]
    return Video(frames, ann)


# ---------------------------------------------------------------------------
# targets and clips


def render_target(points, H: int, W: int, radius: int = 2) -> np.ndarray:
    """Binary map: 1 within Chebyshev ``radius`` of each rounded ``(x, y)`` point."""
    out = np.zeros((H, W))
    for x, y in points:
        c = min(max(int(np.rint(x)), 0), W - 1)
        r = min(max(int(np.rint(y)), 0), H - 1)
        out[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = 1.0
    return out


def make_clips(video: Video, m: int, stride: int = 1) -> list[Clip]:
    if m < 1 or stride < 1:
        raise ContractError("clip length and stride must be >= 1")
    if len(video) < m:
        raise ContractError(f"video of {len(video)} frames is shorter than clip length {m}")
    return [Clip(video.frames[s:s + m], video.annotations[s:s + m], s)
            for s in range(0, len(video) - m + 1, stride)]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    frames: int = 7
    people_min: int = 3
    people_max: int = 10
    r_min: float = 1.5
    r_max: float = 3.5
    speed: float = 1.0
    jitter: float = 0.3
    occlusion_prob: float = 0.3
    blur_prob: float = 0.1
    noise_std: float = 0.02
    min_separation: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.r_min < 1 or self.r_max < self.r_min:
            raise ContractError("need 1 <= r_min <= r_max")
        for name in ("occlusion_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must be a probability")
        if self.people_min < 0 or self.people_max < self.people_min:
            raise ContractError("invalid people count range")
        if self.frames < 1 or self.height < 8 or self.width < 8:
            raise ContractError("scene too small")

    def radius_at(self, y: float) -> float:
        return self.r_min + (self.r_max - self.r_min) * y / self.height


BACKGROUND_MEAN_MAX = 0.5
HEAD_COLOR = np.array([0.95, 0.85, 0.72])
OCCLUDER_COLOR = np.array([0.28, 0.3, 0.34])


def _place(rng, n, cfg: SynthConfig, margin: float) -> np.ndarray:
    pts = []
    for _ in range(200 * max(n, 1)):
        if len(pts) == n:
            break
        p = rng.uniform([margin, margin], [cfg.width - 1 - margin, cfg.height - 1 - margin])
        if all(np.hypot(*(p - q)) >= cfg.min_separation for q in pts):
            pts.append(p)
    while len(pts) < n:  # crowded scene: accept overlap
        pts.append(rng.uniform([margin, margin], [cfg.width - 1 - margin, cfg.height - 1 - margin]))
    return np.array(pts, dtype=np.float64).reshape(n, 2)


def synth_scene(cfg: SynthConfig, seed: int | None = None) -> Video:
    """Render one video of moving heads over a textured static background."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    H, W, L = cfg.height, cfg.width, cfg.frames
    n = int(rng.integers(cfg.people_min, cfg.people_max + 1))
    margin = cfg.r_max + 1.0

    base = rng.uniform(0.25, 0.4, size=3)
    texture = gaussian_filter(rng.normal(size=(H, W, 3)), sigma=(2.5, 2.5, 0))
    texture *= 0.06 / max(texture.std(), 1e-12)
    background = np.clip(base + texture, 0.0, BACKGROUND_MEAN_MAX + 0.1)

    pos = _place(rng, n, cfg, margin)
    vel = rng.uniform(-cfg.speed, cfg.speed, size=(n, 2))
    lo = np.array([margin, margin])
    hi = np.array([W - 1 - margin, H - 1 - margin])

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((L, H, W, 3))
    annotations: list[FrameAnnotation] = []
    for t in range(L):
        if t > 0:
            pos = pos + vel + rng.normal(0.0, cfg.jitter, size=(n, 2))
            over, under = pos > hi, pos < lo
            pos = np.where(over, 2 * hi - pos, np.where(under, 2 * lo - pos, pos))
            vel = np.where(over | under, -vel, vel)
            pos = np.clip(pos, lo, hi)
        img = background.copy()
        heads = []
        occluded = rng.random(n) < cfg.occlusion_prob
        for i, (x, y) in enumerate(pos):
            r = cfg.radius_at(y)
            s = r / 2.0
            alpha = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))[..., None]
            img = img * (1 - alpha) + HEAD_COLOR * alpha
            bbox = (max(x - r, 0.0), max(y - r, 0.0), min(x + r, W - 1.0), min(y + r, H - 1.0))
            heads.append(Head(float(x), float(y), i, bbox, bool(occluded[i])))
        for i in np.flatnonzero(occluded):
            x, y = pos[i]
            r = cfg.radius_at(y)
            half = rng.uniform(0.8 * r, 1.3 * r, size=2)
            cx, cy = x + rng.uniform(-r / 2, r / 2), y + rng.uniform(-r / 2, r / 2)
            r0, r1 = int(max(np.floor(cy - half[1]), 0)), int(min(np.ceil(cy + half[1]), H - 1))
            c0, c1 = int(max(np.floor(cx - half[0]), 0)), int(min(np.ceil(cx + half[0]), W - 1))
            img[r0:r1 + 1, c0:c1 + 1] = OCCLUDER_COLOR
        if rng.random() < cfg.blur_prob:
            img = uniform_filter(img, size=(3, 3, 1), mode="nearest")
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
        frames[t] = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        annotations.append(heads)
    return Video(frames, annotations)


def video_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def synth_corpus(cfg: SynthConfig, n_videos: int) -> list[Video]:
    return [synth_scene(cfg, video_seed(cfg.seed, i)) for i in range(n_videos)]


def corpus_clips(videos: list[Video], m: int, stride: int = 1) -> list[Clip]:
    return [c for v in videos for c in make_clips(v, m, stride)]


def list_video_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise IoError(f"corpus directory {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("frame_*.ppm")))


def load_corpus(root) -> list[Video]:
    return [load_video(p) for p in list_video_dirs(root)]


def head_count(frames: list[FrameAnnotation]) -> int:
    return sum(len(h) for h in frames)


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {p}: {exc}") from exc
    return p
