"""Run configuration: strict (de)serialization of nested dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .errors import ParameterError
from .networks import DiscriminatorConfig, GeneratorConfig, SegmenterConfig

SEGMENTER_LR = 1e-4
GAN_LR = 2e-4
GAN_MAX_EPOCHS = 200


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 1
    lr: float = SEGMENTER_LR
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    lambda_cycle: float = 10.0
    d_accuracy_min: float = 0.92
    g_loss_max: float = 3.0
    rolling_window: int = 50
    d_accuracy_on: str = "heldout"  # or "train": rolling accuracy over recent batches
    eval_every: int = 1
    sample_every: int = 0  # write translated-sample grids every K GAN epochs (0 = never)
    shuffle: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not (0 < self.d_accuracy_min <= 1):
            raise ParameterError(f"d_accuracy_min must be in (0, 1], got {self.d_accuracy_min}")
        if self.g_loss_max <= 0:
            raise ParameterError(f"g_loss_max must be > 0, got {self.g_loss_max}")
        if self.lambda_cycle < 0:
            raise ParameterError(f"lambda_cycle must be >= 0, got {self.lambda_cycle}")
        if self.rolling_window < 1:
            raise ParameterError("rolling_window must be >= 1")
        if self.d_accuracy_on not in ("heldout", "train"):
            raise ParameterError(f"d_accuracy_on must be 'heldout' or 'train', got {self.d_accuracy_on!r}")
        if self.eval_every < 1 or self.sample_every < 0:
            raise ParameterError("eval_every must be >= 1 and sample_every >= 0")


def gan_train_config(**kw) -> TrainConfig:
    base = dict(epochs=GAN_MAX_EPOCHS, lr=GAN_LR)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    seg_train: TrainConfig = field(default_factory=TrainConfig)
    gan_train: TrainConfig = field(default_factory=gan_train_config)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))

    def validate(self) -> None:
        self.synth.validate()
        self.segmenter.validate()
        self.generator.validate()
        self.discriminator.validate()
        for t in (self.seg_train, self.gan_train, self.finetune):
            t.validate()


def desk_config(**overrides) -> PipelineConfig:
    """Reduced widths and epoch counts for the 64 x 64 synthetic benchmark on a CPU."""
    cfg = PipelineConfig(
        seed=0,
        synth=SynthConfig(tile_size=64),
        segmenter=SegmenterConfig(widths=(16, 32, 64)),
        generator=GeneratorConfig(widths=(16, 32, 64, 128)),
        discriminator=DiscriminatorConfig(widths=(16, 32, 64, 128, 256), strides=(2, 2, 2, 1, 1)),
        seg_train=TrainConfig(epochs=6, batch_size=1, lr=1e-3),
        gan_train=gan_train_config(epochs=3, beta1=0.5),
        finetune=TrainConfig(epochs=4, batch_size=1, lr=1e-4),
    )
    return update_config(cfg, overrides) if overrides else cfg


# --- strict dict conversion --------------------------------------------------

def to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(obj)


def from_dict(cls, d: dict, path: str = ""):
    """Build dataclass ``cls`` from ``d``; unknown keys raise :class:`ParameterError`."""
    if not isinstance(d, dict):
        raise ParameterError(f"{path or cls.__name__}: expected a mapping, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ParameterError(f"unknown config keys at '{path or cls.__name__}': {unknown}")
    kwargs = {}
    for k, v in d.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = from_dict(t, v, f"{path}.{k}" if path else k)
        elif typing.get_origin(t) is tuple or t is tuple:
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def update_config(cfg, overrides: dict):
    """Deep-merge ``overrides`` into a copy of dataclass ``cfg`` (strict keys)."""
    merged = to_dict(cfg)

    def merge(base, upd, path):
        for k, v in upd.items():
            if k not in base:
                raise ParameterError(f"unknown config key '{path}{k}'")
            if isinstance(v, dict) and isinstance(base[k], dict) and k != "frequencies":
                merge(base[k], v, f"{path}{k}.")
            else:
                base[k] = v

    merge(merged, overrides, "")
    return from_dict(type(cfg), merged)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"config file not found: {path}")
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParameterError(f"{path}: invalid JSON config ({e})") from e


def config_digest(obj) -> str:
    """Stable short hash of a config (dataclass or plain mapping)."""
    d = to_dict(obj) if dataclasses.is_dataclass(obj) else obj
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
