"""The three waste-classification architectures and their checkpoint format.

A builder turns a :class:`ModelConfig` into a list of :class:`LayerSpec`
(pure description, cheap to inspect at full size) and then into a
:class:`Model` holding initialized layers.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointTruncatedError, ConfigError, ShapeError
from .layers import Layer, LayerSpec

ARCHITECTURES = ("proposed", "vgg16", "resnet34")
HEADS = ("sigmoid1", "softmax2")
DOWNSAMPLING = {"proposed": 8, "vgg16": 32, "resnet34": 32}
DEFAULT_HEAD = {"proposed": "sigmoid1", "vgg16": "softmax2", "resnet34": "softmax2"}

PROPOSED_CONV_WIDTHS = (32, 32, 64, 64, 128, 128)
PROPOSED_DENSE_WIDTHS = (256, 64)
VGG16_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
VGG16_DENSE_WIDTHS = (4096, 4096)
RESNET34_STAGES = ((64, 3), (128, 4), (256, 6), (512, 3))

CLASS_NAMES = ("Organic", "Recyclable")


@dataclass
class ModelConfig:
    architecture: str = "proposed"
    input_extent: int = 224
    input_channels: int = 3
    num_classes: int = 2
    head: str | None = None
    width_scale: Fraction = Fraction(1)
    seed: int = 0

    def __post_init__(self):
        self.architecture = self.architecture.lower()
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture {self.architecture!r}; valid: {', '.join(ARCHITECTURES)}")
        if self.head is None:
            self.head = DEFAULT_HEAD[self.architecture]
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; valid: {', '.join(HEADS)}")
        try:
            self.width_scale = Fraction(self.width_scale).limit_denominator(1 << 20)
        except (TypeError, ValueError):
            raise ConfigError(f"width_scale must be a positive rational, got {self.width_scale!r}")
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        if self.num_classes != 2:
            raise ConfigError("only two-class models are supported")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        factor = DOWNSAMPLING[self.architecture]
        if self.input_extent < 1 or self.input_extent % factor:
            raise ConfigError(
                f"input extent {self.input_extent} is not divisible by {factor} "
                f"(total downsampling of {self.architecture})")

    def width(self, base: int) -> int:
        return max(1, round(base * self.width_scale))

    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_channels, self.input_extent, self.input_extent)

    def to_items(self) -> dict[str, str]:
        return {
            "architecture": self.architecture,
            "input_extent": str(self.input_extent),
            "input_channels": str(self.input_channels),
            "num_classes": str(self.num_classes),
            "head": self.head,
            "width_scale": str(self.width_scale),
            "seed": str(self.seed),
        }

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        return cls(
            architecture=items["architecture"],
            input_extent=int(items["input_extent"]),
            input_channels=int(items["input_channels"]),
            num_classes=int(items["num_classes"]),
            head=items["head"],
            width_scale=Fraction(items["width_scale"]),
            seed=int(items["seed"]),
        )


def _conv(oc, k=3, stride=1, padding=1, bias=True):
    return LayerSpec("Conv2D", dict(out_channels=oc, k=k, stride=stride, padding=padding, bias=bias))


def _dense(n):
    return LayerSpec("Dense", dict(out_features=n))


def _head(config: ModelConfig) -> list[LayerSpec]:
    if config.head == "sigmoid1":
        return [_dense(1), LayerSpec("Sigmoid")]
    return [_dense(2), LayerSpec("Softmax")]


def proposed_specs(config: ModelConfig) -> list[LayerSpec]:
    specs = []
    widths = [config.width(w) for w in PROPOSED_CONV_WIDTHS]
    for i in range(0, 6, 2):
        specs += [_conv(widths[i]), LayerSpec("ReLU"), _conv(widths[i + 1]), LayerSpec("ReLU"),
                  LayerSpec("MaxPool2D", dict(k=2, stride=2))]
    specs.append(LayerSpec("Flatten"))
    for w in PROPOSED_DENSE_WIDTHS:
        specs += [_dense(config.width(w)), LayerSpec("ReLU")]
    return specs + _head(config)


def vgg16_specs(config: ModelConfig) -> list[LayerSpec]:
    specs = []
    for width, repeats in VGG16_BLOCKS:
        for _ in range(repeats):
            specs += [_conv(config.width(width)), LayerSpec("ReLU")]
        specs.append(LayerSpec("MaxPool2D", dict(k=2, stride=2)))
    specs.append(LayerSpec("Flatten"))
    for w in VGG16_DENSE_WIDTHS:
        specs += [_dense(config.width(w)), LayerSpec("ReLU")]
    return specs + _head(config)


def resnet34_specs(config: ModelConfig) -> list[LayerSpec]:
    stem = config.width(64)
    specs = [
        _conv(stem, k=7, stride=2, padding=3, bias=False),
        LayerSpec("BatchNorm2D", dict(channels=stem)),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool2D", dict(k=3, stride=2, padding=1)),
    ]
    channels = stem
    for stage, (width, blocks) in enumerate(RESNET34_STAGES):
        width = config.width(width)
        for b in range(blocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            projection = stride != 1 or channels != width
            specs.append(LayerSpec("ResidualBlock",
                                   dict(channels=width, stride=stride, projection=projection)))
            channels = width
    specs.append(LayerSpec("GlobalAvgPool"))
    return specs + _head(config)


SPEC_BUILDERS = {"proposed": proposed_specs, "vgg16": vgg16_specs, "resnet34": resnet34_specs}


def architecture_specs(config: ModelConfig) -> list[LayerSpec]:
    return SPEC_BUILDERS[config.architecture](config)


@dataclass
class LayerRow:
    index: int
    kind: str
    hyperparams: str
    output_shape: tuple
    params: int


def layer_table(specs: list[LayerSpec], input_shape: tuple) -> list[LayerRow]:
    """Shape and parameter trace through ``specs`` without allocating weights."""
    rows = []
    shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        n = spec.param_count(shape)
        shape = spec.output_shape(shape)
        rows.append(LayerRow(i, spec.kind, spec.describe(), shape, n))
    return rows


class Model:
    """Sequential stack of layers with a sigmoid or softmax head.

    ``forward`` stops before the head and returns logits, which is what the
    losses consume; ``predict_proba`` applies the head.
    """

    def __init__(self, config: ModelConfig, specs: list[LayerSpec], layers: list[Layer]):
        self.config = config
        self.specs = specs
        self.layers = layers
        self.body, self.head = layers[:-1], layers[-1]
        self.name = config.architecture

    @classmethod
    def from_specs(cls, config: ModelConfig, specs: list[LayerSpec]) -> "Model":
        rng = np.random.default_rng(config.seed)
        shape = config.input_shape()
        layers = []
        for spec in specs:
            layers.append(spec.build(shape, rng))
            shape = spec.output_shape(shape)
        return cls(config, specs, layers)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        expected = self.config.input_shape()
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"{self.name} expects [b,{','.join(map(str, expected))}], got {x.shape}")
        for layer in self.body:
            x = layer.forward(x, train)
        return x

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = grad_logits
        for layer in reversed(self.body):
            g = layer.backward(g)
        return g

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.forward(x, train=False))

    def positive_score(self, x: np.ndarray) -> np.ndarray:
        """Probability of the Recyclable class for each sample."""
        p = self.predict_proba(x)
        return p[:, 0] if p.shape[1] == 1 else p[:, 1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class labels by the ``score >= 0.5`` rule, for either head."""
        return (self.positive_score(x) >= 0.5).astype(np.int64)

    def _named(self, method):
        for i, layer in enumerate(self.layers):
            yield from getattr(layer, method)(f"{i}.{layer.kind}.")

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return list(self._named("named_params"))

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self._named("named_grads"))

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return list(self._named("named_buffers"))

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters followed by buffers (batch-norm running statistics)."""
        return self.parameters() + self.buffers()

    def layer_table(self) -> list[LayerRow]:
        return layer_table(self.specs, self.config.input_shape())


def _check_arch(config, name):
    if config.architecture != name:
        raise ConfigError(f"config architecture is {config.architecture!r}, expected {name!r}")


def build_proposed(config: ModelConfig) -> Model:
    _check_arch(config, "proposed")
    return Model.from_specs(config, proposed_specs(config))


def build_vgg16(config: ModelConfig) -> Model:
    _check_arch(config, "vgg16")
    return Model.from_specs(config, vgg16_specs(config))


def build_resnet34(config: ModelConfig) -> Model:
    _check_arch(config, "resnet34")
    return Model.from_specs(config, resnet34_specs(config))


BUILDERS = {"proposed": build_proposed, "vgg16": build_vgg16, "resnet34": build_resnet34}


def build_model(config: ModelConfig) -> Model:
    return BUILDERS[config.architecture](config)


def count_params(model: Model) -> int:
    return sum(p.size for _, p in model.parameters())


# --------------------------------------------------------------------------
# Checkpoints
#
#   magic  b"WGCK"
#   u16    format version
#   u32    config byte length, then UTF-8 "key=value\n" lines
#   u32    tensor count, then per tensor:
#            u16 name length, UTF-8 name, u8 rank, u32 extents, f64 LE values
# All integers little-endian.
# --------------------------------------------------------------------------

MAGIC = b"WGCK"
FORMAT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    items = model.config.to_items()
    text = "".join(f"{k}={v}\n" for k, v in items.items()).encode("utf-8")
    state = model.state()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", len(state))
    for name, arr in state:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"truncated checkpoint {self.path}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"incompatible checkpoint {path}: bad magic")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"incompatible checkpoint {path}: format version {version}")
    (n,) = r.unpack("<I")
    try:
        lines = r.take(n).decode("utf-8").splitlines()
        items = dict(line.split("=", 1) for line in lines if line)
        config = ModelConfig.from_items(items)
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"incompatible checkpoint {path}: bad config block ({exc})") from None
    model = build_model(config)
    state = dict(model.state())
    (count,) = r.unpack("<I")
    if count != len(state):
        raise CheckpointError(
            f"incompatible checkpoint {path}: {count} tensors, model has {len(state)}")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        values = np.frombuffer(r.take(8 * int(np.prod(shape))), dtype="<f8")
        target = state.get(name)
        if target is None or target.shape != tuple(shape):
            raise CheckpointError(f"incompatible checkpoint {path}: unexpected tensor {name} {shape}")
        target[...] = values.reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointError(f"incompatible checkpoint {path}: trailing bytes")
    return model
