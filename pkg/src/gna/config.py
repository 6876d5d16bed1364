"""Flat ``key = value`` run configuration with sections model/train/data/gna/eval."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attention import GnaConfig
from .data import SynthConfig
from .errors import ContractError, IoError, ValidationError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "data", "gna", "eval")


@dataclass
class DataSection:
    synth: SynthConfig = field(default_factory=SynthConfig)
    count: int = 40
    clip_stride: int = 1


@dataclass
class EvalSection:
    data_dir: str = ""
    checkpoint: str = ""
    sigmas: tuple[float, ...] = (5.0, 20.0, 40.0)
    mode: str = "oks"
    peak_threshold: float = 0.5
    peak_window: int = 3
    bench_grids: tuple[int, ...] = (8, 16, 32)
    bench_repeats: int = 3
    bench_channels: int = 16
    bound_trials: int = 1000
    plot_inputs: tuple[str, ...] = ()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    train_dir: str = ""
    source: Path | None = None

    def resolve(self, p: str) -> Path:
        """Paths in the file are relative to the file's directory."""
        path = Path(p)
        if path.is_absolute() or self.source is None:
            return path
        return self.source.parent / path


def _convert(kind, raw: str, key: str):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind in (int, float, str):
            return kind(raw.strip())
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "strs":
            return tuple(v for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ValidationError(f"bad value for {key!r}: {raw!r}") from exc
    raise AssertionError(kind)


def _kinds(cls) -> dict:
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if t.startswith("tuple[float"):
            out[f.name] = "floats"
        elif t.startswith("tuple[int"):
            out[f.name] = "ints"
        elif t.startswith("tuple[str"):
            out[f.name] = "strs"
        elif t in ("int", "float", "str", "bool"):
            out[f.name] = {"int": int, "float": float, "str": str, "bool": bool}[t]
    return out


def _apply(section: dict, cls, extra: dict | None = None):
    kinds = _kinds(cls)
    kinds.update(extra or {})
    values = {}
    for key, raw in section.items():
        if key not in kinds:
            raise ValidationError(f"unknown key {key!r}")
        values[key] = _convert(kinds[key], raw, key)
    return values


def parse_config(text: str, source: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config syntax: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}
    try:
        gna = GnaConfig(**_apply(sec["gna"], GnaConfig))
        model = ModelConfig(gna=gna, **_apply(sec["model"], ModelConfig))
        tr = dict(sec["train"])
        train_dir = tr.pop("data_dir", "")
        train = TrainConfig(**_apply(tr, TrainConfig))
        d = dict(sec["data"])
        count = _convert(int, d.pop("count"), "count") if "count" in d else 40
        stride = _convert(int, d.pop("clip_stride"), "clip_stride") if "clip_stride" in d else 1
        synth = SynthConfig(**_apply(d, SynthConfig))
        ev = EvalSection(**_apply(sec["eval"], EvalSection))
    except ContractError as exc:
        raise ValidationError(str(exc)) from exc
    if ev.mode not in ("oks", "distance"):
        raise ValidationError(f"eval mode must be oks or distance, got {ev.mode!r}")
    if count < 1 or stride < 1:
        raise ValidationError("data count and clip_stride must be >= 1")
    return RunConfig(model, train, DataSection(synth, count, stride), ev, train_dir, source)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, p)
