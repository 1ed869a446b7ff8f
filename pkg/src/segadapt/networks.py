"""Generator, discriminator and segmenter definitions.

All three are plain parameter dictionaries plus a forward function built from
the autograd primitives. Down/up sampling layers use kernel 4, stride 2,
padding 1 so every stage exactly halves or doubles the spatial size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CheckpointShapeError, ParameterError, ShapeError

INIT_STD = 0.02
LEAKY_SLOPE = 0.2
REAL = 1  # discriminator output column holding P(real)


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 3
    out_channels: int = 3
    widths: Tuple[int, ...] = (64, 128, 256, 512)
    dropout_p: float = 0.5
    dropout_blocks: int = 3
    # also feed the raw input to the output head (the input acting as "down-block 0")
    input_skip: bool = True
    alpha: float = LEAKY_SLOPE
    eps: float = 1e-5

    def validate(self) -> None:
        if len(self.widths) != 4:
            raise ParameterError(f"generator needs exactly 4 widths, got {self.widths}")
        if min(self.widths) < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("generator channel counts must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0 <= self.dropout_blocks <= 4:
            raise ParameterError(f"dropout_blocks must be in [0, 4], got {self.dropout_blocks}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    widths: Tuple[int, ...] = (64, 128, 256, 256, 256)
    # stride-2 layers use 4x4 kernels (padding 1); stride-1 layers use 3x3 kernels (padding 1)
    strides: Tuple[int, ...] = (2, 2, 2, 2, 2)
    alpha: float = LEAKY_SLOPE
    eps: float = 1e-5

    def validate(self) -> None:
        if len(self.widths) != 5:
            raise ParameterError(f"discriminator needs exactly 5 widths, got {self.widths}")
        if min(self.widths) < 1 or self.in_channels < 1:
            raise ParameterError("discriminator channel counts must be >= 1")
        if len(self.strides) != 5 or any(s not in (1, 2) for s in self.strides):
            raise ParameterError(f"discriminator strides must be five values from {{1, 2}}, got {self.strides}")

    def min_input_size(self) -> int:
        """Smallest input side that leaves a final feature map of at least 2 x 2.

        Instance norm over a single pixel erases the signal, so smaller inputs are rejected.
        """
        return 2 ** (sum(s == 2 for s in self.strides) + 1)


@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int = 3
    num_classes: int = 6
    widths: Tuple[int, ...] = (32, 64, 128)

    def validate(self) -> None:
        if len(self.widths) != 3:
            raise ParameterError(f"segmenter needs exactly 3 widths, got {self.widths}")
        if min(self.widths) < 1 or self.in_channels < 1:
            raise ParameterError("segmenter channel counts must be >= 1")
        if self.num_classes < 2:
            raise ParameterError(f"segmenter needs at least 2 classes, got {self.num_classes}")


CONFIG_TYPES = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "segmenter": SegmenterConfig,
}


def config_from_dict(kind: str, d: dict):
    cls = CONFIG_TYPES[kind]
    d = dict(d)
    for k in ("widths", "strides"):
        if k in d:
            d[k] = tuple(d[k])
    return cls(**d)


class Network:
    """Named parameters plus a forward pass."""

    kind = "network"

    def __init__(self, config, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointShapeError(
                f"{self.kind} parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointShapeError(f"{self.kind} '{name}': expected {p.shape}, got {arr.shape}")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=p.dtype)

    def clone(self) -> "Network":
        return type(self)(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def astype(self, dtype) -> "Network":
        """Copy with every parameter cast (float64 copies back gradient checks)."""
        return type(self)(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()})

    def __call__(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward(x, training=training, rng=rng)

    def forward(self, x, training: bool = False, rng=None) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}

    def weight(self, name: str, shape) -> None:
        w = self.rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        self.params[name] = Tensor(w, requires_grad=True)

    def zeros(self, name: str, n: int) -> None:
        self.params[name] = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    def ones(self, name: str, n: int) -> None:
        self.params[name] = Tensor(np.ones(n, dtype=np.float32), requires_grad=True)

    def conv(self, name: str, cout: int, cin: int, k: int, norm: bool = False, transpose: bool = False) -> None:
        self.weight(f"{name}.weight", (cin, cout, k, k) if transpose else (cout, cin, k, k))
        self.zeros(f"{name}.bias", cout)
        if norm:
            self.ones(f"{name}.gamma", cout)
            self.zeros(f"{name}.beta", cout)


# --- generator ---------------------------------------------------------------

class Generator(Network):
    """U-Net style encoder-decoder: 4 strided convs down, 4 transposed convs up.

    Up-block ``j`` (1-based) is concatenated with down-block ``4 - j``; with
    ``input_skip`` the raw input joins the last up-block ahead of the 1x1 head.
    """

    kind = "generator"

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        x = ag.as_tensor(x)
        cfg, p = self.config, self.params
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"generator expects N x {cfg.in_channels} x H x W input, got {x.shape}")
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ShapeError(f"generator input H and W must be divisible by 16 (four stride-2 stages), got {h}x{w}")
        skips = []
        out = x
        for i in range(1, 5):
            out = ag.conv2d(out, p[f"down{i}.weight"], p[f"down{i}.bias"], stride=2, padding=1)
            out = ag.instance_norm(out, p[f"down{i}.gamma"], p[f"down{i}.beta"], cfg.eps)
            out = ag.leaky_relu(out, cfg.alpha)
            skips.append(out)
        for j in range(1, 5):
            out = ag.conv_transpose2d(out, p[f"up{j}.weight"], p[f"up{j}.bias"], stride=2, padding=1)
            out = ag.instance_norm(out, p[f"up{j}.gamma"], p[f"up{j}.beta"], cfg.eps)
            out = ag.relu(out)
            if j <= cfg.dropout_blocks:
                out = ag.dropout(out, cfg.dropout_p, training, rng)
            if j < 4:
                out = ag.concat([out, skips[3 - j]], axis=1)
        if cfg.input_skip:
            out = ag.concat([out, x], axis=1)
        out = ag.conv2d(out, p["head.weight"], p["head.bias"])
        return ag.tanh(out)

    def layer_counts(self) -> Tuple[int, int]:
        down = sum(1 for k in self.params if k.startswith("down") and k.endswith(".weight"))
        up = sum(1 for k in self.params if k.startswith("up") and k.endswith(".weight"))
        return down, up


def init_generator(config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> Generator:
    config.validate()
    w = config.widths
    b = _Init(seed)
    cin = config.in_channels
    for i, cout in enumerate(w, start=1):
        b.conv(f"down{i}", cout, cin, 4, norm=True)
        cin = cout
    # decoder outputs: w3 -> w2, (2*w2) -> w1, (2*w1) -> w0, (2*w0) -> w0
    ups = [(w[3], w[2]), (2 * w[2], w[1]), (2 * w[1], w[0]), (2 * w[0], w[0])]
    for j, (ci, co) in enumerate(ups, start=1):
        b.conv(f"up{j}", co, ci, 4, norm=True, transpose=True)
    b.conv("head", config.out_channels, w[0] + (config.in_channels if config.input_skip else 0), 1)
    return Generator(config, b.params)


def generator_forward(p: Generator, x, training: bool = False, rng=None) -> Tensor:
    return p.forward(x, training=training, rng=rng)


# --- discriminator -----------------------------------------------------------

class Discriminator(Network):
    """Five strided convs, global average pool to a feature vector, 2-way softmax."""

    kind = "discriminator"

    def features(self, x) -> Tensor:
        x = ag.as_tensor(x)
        cfg, p = self.config, self.params
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"discriminator expects N x {cfg.in_channels} x H x W input, got {x.shape}")
        need = cfg.min_input_size()
        if min(x.shape[2:]) < need:
            raise ShapeError(
                f"discriminator input must be at least {need}x{need} for strides {tuple(cfg.strides)}, got {x.shape[2:]}"
            )
        out = x
        for i, stride in enumerate(cfg.strides, start=1):
            out = ag.conv2d(out, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=stride, padding=1)
            if i > 1:
                out = ag.instance_norm(out, p[f"conv{i}.gamma"], p[f"conv{i}.beta"], cfg.eps)
            out = ag.leaky_relu(out, cfg.alpha)
        return ag.mean(out, axis=(2, 3))

    def logits(self, x) -> Tensor:
        return ag.matmul(self.features(x), self.params["head.weight"]) + self.params["head.bias"]

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        return ag.softmax(self.logits(x), axis=1)

    def conv_layer_count(self) -> int:
        return sum(1 for k in self.params if k.startswith("conv") and k.endswith(".weight"))


def init_discriminator(config: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0) -> Discriminator:
    config.validate()
    b = _Init(seed)
    cin = config.in_channels
    for i, (cout, stride) in enumerate(zip(config.widths, config.strides), start=1):
        b.conv(f"conv{i}", cout, cin, 4 if stride == 2 else 3, norm=i > 1)
        cin = cout
    b.weight("head.weight", (cin, 2))
    b.zeros("head.bias", 2)
    return Discriminator(config, b.params)


def discriminator_forward(p: Discriminator, x) -> Tensor:
    return p.forward(x)


# --- segmenter ---------------------------------------------------------------

class Segmenter(Network):
    """Compact three-stage encoder-decoder with concatenated skips."""

    kind = "segmenter"

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        x = ag.as_tensor(x)
        cfg, p = self.config, self.params
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"segmenter expects N x {cfg.in_channels} x H x W input, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"segmenter input H and W must be divisible by 4, got {x.shape[2:]}")

        def conv(name, t, stride=1, padding=1):
            return ag.relu(ag.conv2d(t, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding))

        e1 = conv("enc1b", conv("enc1a", x))
        e2 = conv("enc2b", conv("enc2a", e1, stride=2))
        e3 = conv("enc3", e2, stride=2)
        d2 = ag.relu(ag.conv_transpose2d(e3, p["up2.weight"], p["up2.bias"], stride=2, padding=1))
        d2 = conv("dec2", ag.concat([d2, e2], axis=1))
        d1 = ag.relu(ag.conv_transpose2d(d2, p["up1.weight"], p["up1.bias"], stride=2, padding=1))
        d1 = conv("dec1", ag.concat([d1, e1], axis=1))
        return ag.conv2d(d1, p["head.weight"], p["head.bias"])

    def predict(self, x) -> np.ndarray:
        with ag.no_grad():
            return np.argmax(self.forward(x).data, axis=1)


def init_segmenter(config: SegmenterConfig = SegmenterConfig(), seed: int = 0) -> Segmenter:
    config.validate()
    w0, w1, w2 = config.widths
    b = _Init(seed)
    b.conv("enc1a", w0, config.in_channels, 3)
    b.conv("enc1b", w0, w0, 3)
    b.conv("enc2a", w1, w0, 4)
    b.conv("enc2b", w1, w1, 3)
    b.conv("enc3", w2, w1, 4)
    b.conv("up2", w1, w2, 4, transpose=True)
    b.conv("dec2", w1, 2 * w1, 3)
    b.conv("up1", w0, w1, 4, transpose=True)
    b.conv("dec1", w0, 2 * w0, 3)
    b.conv("head", config.num_classes, w0, 1)
    return Segmenter(config, b.params)


def segmenter_forward(p: Segmenter, x) -> Tensor:
    return p.forward(x)


NETWORK_TYPES = {"generator": Generator, "discriminator": Discriminator, "segmenter": Segmenter}
INITIALIZERS = {"generator": init_generator, "discriminator": init_discriminator, "segmenter": init_segmenter}


def build_network(kind: str, config_dict: dict, seed: int = 0) -> Network:
    """Construct a freshly initialized network from a serialized config."""
    if kind not in INITIALIZERS:
        raise ParameterError(f"unknown network kind '{kind}'")
    return INITIALIZERS[kind](config_from_dict(kind, config_dict), seed)


def config_to_dict(config) -> dict:
    d = asdict(config)
    for k in ("widths", "strides"):
        if k in d:
            d[k] = list(d[k])
    return d
