"""Experiment configuration: JSON loading with field-level validation, presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .model import ModelConfig
from .pixeltok import WindowConfig
from .textimage import RenderConfig
from .trainkit import FinetuneConfig, SamplerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class VocabConfig:
    src_size: int = 8000
    tgt_size: int = 5000

    def __post_init__(self):
        if self.src_size < 1 or self.tgt_size < 1:
            raise ValueError("vocabulary sizes must be positive")


_SECTIONS = {
    "render": RenderConfig,
    "window": WindowConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "sampler": SamplerConfig,
    "vocab": VocabConfig,
}


@dataclass
class ExperimentConfig:
    render: RenderConfig = field(default_factory=RenderConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    data: str | None = None
    seed: int = 0

    def to_dict(self):
        out = {}
        for name in _SECTIONS:
            value = getattr(self, name)
            out[name] = value.to_dict() if hasattr(value, "to_dict") else dataclasses.asdict(value)
        out["data"] = self.data
        out["seed"] = self.seed
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _build_section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected an object, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {', '.join(unknown)}")
    if name == "model" and isinstance(values.get("window"), dict):
        values = dict(values)
        try:
            values["window"] = WindowConfig(**values["window"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.window: {exc}") from None
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(d):
    d = dict(d)
    unknown = sorted(set(d) - set(_SECTIONS) - {"data", "seed", "preset"})
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")
    base = {}
    if "preset" in d:
        base = load_preset(d.pop("preset")).to_dict()
    kwargs = {}
    for name, cls in _SECTIONS.items():
        values = dict(base.get(name, {}))
        values.update(d.get(name, {}))
        kwargs[name] = _build_section(name, cls, values)
    # the window lives in one place for the user; the model copy follows it
    if "window" in d or "window" in base:
        if "window" in d.get("model", {}) and kwargs["model"].window != kwargs["window"]:
            raise ConfigError("model.window disagrees with window")
        kwargs["model"] = dataclasses.replace(kwargs["model"], window=kwargs["window"])
    if kwargs["window"].h != kwargs["render"].canvas_height:
        raise ConfigError(
            f"window.h ({kwargs['window'].h}) must equal render.canvas_height ({kwargs['render'].canvas_height})"
        )
    seed = d.get("seed", base.get("seed", 0))
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")
    return ExperimentConfig(data=d.get("data", base.get("data")), seed=seed, **kwargs)


def load_config(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = from_dict(d)
    if cfg.data is not None:
        data = Path(cfg.data)
        if not data.is_absolute():
            data = (path.parent / data).resolve()
        if not data.exists():
            raise ConfigError(f"data: {data} does not exist")
        cfg.data = str(data)
    return cfg


PRESETS = ("ted7-pixel", "ted7-bpe", "ted59-pixel", "ted59-bpe", "desk-pixel", "desk-bpe")


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("pixelrep").joinpath("presets", f"{name}.json").read_text(encoding="utf-8")
    return from_dict(json.loads(text))
