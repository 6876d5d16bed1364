"""GNANet (video clips) and S-GNANet (single frames) at desk scale.

All maps are channel-last. The backbone reduces frames by 8x; the
localization head upsamples back to full resolution and ends in a sigmoid.
Forward functions accept a batch of clips so convolutions run on stacked
inputs, while every attention site draws its own keys per clip from the
supplied generator, in clip order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO

import numpy as np

from . import attention as A
from .attention import GnaConfig
from .errors import ContractError, FormatError, IoError, ShapeError
from .tensor import (Tensor, add, as_tensor, concat, conv2d, deconv2d, index, max_pool2d,
                     read_tensor, relu, reshape, sigmoid, stack, write_tensor)

DOWNSAMPLE = 8
BACKBONE_WIDTHS = (16, 32)  # the third block uses feature_channels
ATTENTION_KINDS = A.KINDS + ("none",)
VARIANTS = ("gnanet", "s_gnanet")

Parameters = dict  # name -> Tensor, insertion order is the canonical order


@dataclass
class ModelConfig:
    clip_length: int = 3
    feature_channels: int = 64
    variant: str = "gnanet"
    attention: str = "gna"
    gna: GnaConfig = field(default_factory=GnaConfig)

    def __post_init__(self):
        if isinstance(self.gna, dict):
            self.gna = GnaConfig(**self.gna)
        if self.clip_length < 1 or self.clip_length % 2 == 0:
            raise ContractError(f"clip length must be odd and >= 1, got {self.clip_length}")
        if self.feature_channels < 4 or self.feature_channels % 4:
            raise ContractError("feature_channels must be a positive multiple of 4")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ContractError(f"unknown attention kind {self.attention!r}")

    @property
    def objective(self) -> int:
        return self.clip_length // 2

    @property
    def head_channels(self) -> tuple[int, int, int]:
        d = self.feature_channels
        return d, d // 2, d // 4

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        raw["gna"]["gammas"] = tuple(raw["gna"]["gammas"])
        return cls(**raw)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# ---------------------------------------------------------------------------
# parameters


def layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int, int, int]]]:
    """``(layer name, (kh, kw, cin, cout))`` in canonical order."""
    d = cfg.feature_channels
    c1, c2 = BACKBONE_WIDTHS
    shapes = [("bb1a", (3, 3, 3, c1)), ("bb1b", (3, 3, c1, c1)),
              ("bb2a", (3, 3, c1, c2)), ("bb2b", (3, 3, c2, c2)),
              ("bb3a", (3, 3, c2, d)), ("bb3b", (3, 3, d, d))]
    if cfg.variant == "gnanet":
        shapes.append(("agg", (3, 3, cfg.clip_length * d, d)))
    if cfg.attention != "none":
        shapes.append(("ctx", (3, 3, 2 * d, d)))
    shapes += [(f"dil{i}", (3, 3, d, d)) for i in (1, 2, 3)]
    cin = d
    for i, c in enumerate(cfg.head_channels, start=1):
        shapes += [(f"up{i}", (3, 3, cin, c)), (f"up{i}c", (3, 3, c, c))]
        cin = c
    shapes.append(("out", (1, 1, cin, 1)))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> Parameters:
    """He fan-in normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    for name, shp in layer_shapes(cfg):
        fan_in = shp[0] * shp[1] * shp[2]
        params[f"{name}.w"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shp), True, f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(shp[3]), True, f"{name}.b")
    return params


def param_count(params: Parameters) -> int:
    return int(sum(p.data.size for p in params.values()))


def _conv(x, params, name, dilation=1):
    w = params[f"{name}.w"]
    pad = dilation * (w.shape[0] // 2)
    return conv2d(x, w, params[f"{name}.b"], dilation=dilation, padding=pad)


# ---------------------------------------------------------------------------
# stages


def backbone_forward(frames, params: Parameters) -> Tensor:
    """(H,W,3) or (B,H,W,3) frames to 1/8-resolution feature maps."""
    x = as_tensor(frames)
    H, W = x.shape[-3], x.shape[-2]
    if x.shape[-1] != 3:
        raise ShapeError(f"frames must have 3 channels, got {x.shape}")
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ShapeError(f"frame size {H}x{W} is not divisible by {DOWNSAMPLE}")
    for blk in (1, 2, 3):
        x = relu(_conv(x, params, f"bb{blk}a"))
        x = relu(_conv(x, params, f"bb{blk}b"))
        x = max_pool2d(x, 2)
    return x


def _attend_self(kind, F, cfg: ModelConfig, rng, test):
    return A.attend(kind, F, F, F, cfg.gna, rng, test)


def scene_modeling(features, params: Parameters, cfg: ModelConfig, rng, test: bool = False):
    """Aggregate ``m`` frame maps into the scene context ``M``.

    ``features`` is a list of ``m`` maps of shape ``(h, w, d)``. Returns
    ``(M, F)`` where ``F`` is the convolutional aggregate.
    """
    if len(features) != cfg.clip_length:
        raise ShapeError(f"expected {cfg.clip_length} feature maps, got {len(features)}")
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ShapeError(f"feature maps are not aligned: {sorted(shapes)}")
    F = relu(_conv(concat(list(features), axis=-1), params, "agg"))
    if cfg.attention == "none":
        return F, F
    att = _attend_self(cfg.attention, F, cfg, rng, test)
    M = relu(_conv(concat([att, F], axis=-1), params, "ctx"))
    return M, F


def temporal_draws(kind: str, h: int, w: int, m: int, cfg: GnaConfig, rng, repeats: int = 1):
    """Key indices into the stacked ``m`` frame maps, ``(h*w, G, m*S)``.

    For every group the per-frame neighborhoods are concatenated so one
    softmax spans the union of all frames' keys.
    """
    hw = h * w
    valid = None
    if kind == "gna":
        groups = []
        for _ in range(repeats):
            for g in cfg.gammas:
                per = [A.gaussian_draws(h, w, g, cfg.samples_per_focus, rng) + t * hw for t in range(m)]
                groups.append(np.concatenate(per, axis=1))
        return np.stack(groups, axis=1), None
    if kind == "local":
        flat, ok = A.window_draws(h, w, 9)
        idx = np.concatenate([flat + t * hw for t in range(m)], axis=1)[:, None, :]
        valid = np.tile(ok, (1, m))[:, None, :].astype(np.uint8)
        return idx, valid
    n = cfg.samples_per_focus
    gamma = cfg.gammas[len(cfg.gammas) // 2]
    groups = []
    for _ in range(repeats):
        if kind == "uniform":
            per = [A.uniform_draws(h, w, n, rng) + t * hw for t in range(m)]
        elif kind == "disk":
            per = [A.disk_draws(h, w, gamma, n, rng) + t * hw for t in range(m)]
        else:
            raise ContractError(f"unknown attention kind {kind!r}")
        groups.append(np.concatenate(per, axis=1))
    return np.stack(groups, axis=1), valid


def temporal_attention(M, features, cfg: ModelConfig, rng, test: bool = False,
                       draws=None) -> Tensor:
    """Attention from the scene context to every frame of the clip."""
    M = as_tensor(M)
    h, w, d = M.shape
    m = len(features)
    reps = cfg.gna.test_repeats if test and cfg.attention != "local" else 1
    valid = None
    if draws is None:
        draws, valid = temporal_draws(cfg.attention, h, w, m, cfg.gna, rng, reps)
    kv = reshape(stack(list(features), axis=0), (m * h * w, d))
    out = A.sampled_attention(reshape(M, (h * w, d)), kv, kv, np.asarray(draws, dtype=np.int64), valid)
    return reshape(out, (h, w, d))


def context_cross_attention(M, features, objective_feature, params: Parameters | None,
                            cfg: ModelConfig, rng, test: bool = False) -> Tensor:
    """Temporal branch + objective branch + the objective frame's features."""
    M, Fc = as_tensor(M), as_tensor(objective_feature)
    if M.shape != Fc.shape or any(as_tensor(f).shape != M.shape for f in features):
        raise ShapeError("scene context and frame features must be aligned")
    temporal = temporal_attention(M, [as_tensor(f) for f in features], cfg, rng, test)
    objective = A.attend(cfg.attention, M, Fc, Fc, cfg.gna, rng, test)
    return add(add(temporal, objective), Fc)


def localization_head(x, params: Parameters) -> Tensor:
    x = as_tensor(x)
    for i in (1, 2, 3):
        x = relu(_conv(x, params, f"dil{i}", dilation=2))
    for i in (1, 2, 3):
        x = relu(deconv2d(x, params[f"up{i}.w"], params[f"up{i}.b"]))
        x = relu(_conv(x, params, f"up{i}c", dilation=2))
    x = sigmoid(_conv(x, params, "out"))
    return reshape(x, x.shape[:-1])


# ---------------------------------------------------------------------------
# full networks


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "test"):
        raise ContractError(f"mode must be 'train' or 'test', got {mode!r}")
    return mode == "test"


def gnanet_forward_batch(clips, params: Parameters, cfg: ModelConfig, rng,
                         mode: str = "train") -> Tensor:
    """``clips`` of shape ``(B, m, H, W, 3)`` to maps ``(B, H, W)``."""
    test = _check_mode(mode)
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 5 or clips.shape[1] != cfg.clip_length:
        raise ContractError(f"expected clips of shape (B, {cfg.clip_length}, H, W, 3), got {clips.shape}")
    B, m = clips.shape[:2]
    feats = backbone_forward(clips.reshape((B * m,) + clips.shape[2:]), params)
    fused = []
    for b in range(B):
        fs = [index(feats, b * m + t) for t in range(m)]
        M, F = scene_modeling(fs, params, cfg, rng, test)
        if cfg.attention == "none":
            fused.append(F)
        else:
            fused.append(context_cross_attention(M, fs, fs[cfg.objective], params, cfg, rng, test))
    return localization_head(stack(fused, axis=0), params)


def gnanet_forward(clip, params: Parameters, cfg: ModelConfig, rng, mode: str = "train") -> Tensor:
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4 or clip.shape[0] != cfg.clip_length:
        raise ContractError(f"clip must hold {cfg.clip_length} frames, got shape {clip.shape}")
    return index(gnanet_forward_batch(clip[None], params, cfg, rng, mode), 0)


def s_gnanet_forward_batch(frames, params: Parameters, cfg: ModelConfig, rng,
                           mode: str = "train") -> Tensor:
    """``frames`` of shape ``(B, H, W, 3)``: self attention on each frame's features."""
    test = _check_mode(mode)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ShapeError(f"expected (B, H, W, 3) frames, got {frames.shape}")
    feats = backbone_forward(frames, params)
    if cfg.attention == "none":
        return localization_head(feats, params)
    fused = []
    for b in range(frames.shape[0]):
        F = index(feats, b)
        att = _attend_self(cfg.attention, F, cfg, rng, test)
        fused.append(relu(_conv(concat([att, F], axis=-1), params, "ctx")))
    return localization_head(stack(fused, axis=0), params)


def s_gnanet_forward(frame, params: Parameters, cfg: ModelConfig, rng, mode: str = "train") -> Tensor:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise ShapeError(f"expected one (H, W, 3) frame, got {frame.shape}")
    return index(s_gnanet_forward_batch(frame[None], params, cfg, rng, mode), 0)


def forward_batch(clips, params: Parameters, cfg: ModelConfig, rng, mode: str = "train") -> Tensor:
    """Dispatch on the variant; S-GNANet sees only the objective frame."""
    clips = np.asarray(clips, dtype=np.float64)
    if cfg.variant == "s_gnanet":
        if clips.ndim == 5:
            clips = clips[:, clips.shape[1] // 2]
        return s_gnanet_forward_batch(clips, params, cfg, rng, mode)
    return gnanet_forward_batch(clips, params, cfg, rng, mode)


# ---------------------------------------------------------------------------
# checkpoints: magic, config json + digest, then named tensors


CKPT_MAGIC = b"GNACKPT1"


def save_checkpoint(path, params: Parameters, cfg: ModelConfig, extra: dict | None = None) -> None:
    meta = json.dumps({"config": json.loads(cfg.to_json()), "digest": cfg.digest(),
                       "extra": extra or {}}, sort_keys=True).encode()
    try:
        with open(path, "wb") as fp:
            fp.write(CKPT_MAGIC)
            fp.write(struct.pack("<I", len(meta)))
            fp.write(meta)
            fp.write(struct.pack("<I", len(params)))
            for name, t in params.items():
                raw = name.encode()
                fp.write(struct.pack("<H", len(raw)))
                fp.write(raw)
                write_tensor(fp, t)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    b = fp.read(n)
    if len(b) != n:
        raise FormatError("truncated checkpoint")
    return b


def load_checkpoint(path) -> tuple[Parameters, ModelConfig, dict]:
    try:
        fp = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    with fp:
        if _read_exact(fp, 8) != CKPT_MAGIC:
            raise FormatError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<I", _read_exact(fp, 4))
        meta = json.loads(_read_exact(fp, n))
        cfg = ModelConfig.from_json(json.dumps(meta["config"]))
        if cfg.digest() != meta["digest"]:
            raise FormatError("checkpoint config digest mismatch")
        (count,) = struct.unpack("<I", _read_exact(fp, 4))
        params: Parameters = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read_exact(fp, 2))
            name = _read_exact(fp, ln).decode()
            params[name] = Tensor(read_tensor(fp), True, name)
    expected = {f"{n}.{s}": shp for n, shp in layer_shapes(cfg) for s in "wb"}
    if set(params) != set(expected):
        raise FormatError("checkpoint tensors do not match its config")
    return params, cfg, meta.get("extra", {})
