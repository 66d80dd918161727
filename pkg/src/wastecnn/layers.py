"""Layers with hand-written backward passes.

Every layer caches what its backward pass needs during ``forward`` and
returns the input gradient from ``backward``, leaving parameter gradients
in ``grads`` under the same keys as ``params``. A layer instance is not
re-entrant: one forward must be followed by at most one backward.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import DTYPE, col2im, conv_out_extent, im2col

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> dict[str, "Layer"]:
        return {}

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield from ((prefix + k, v) for k, v in self.params.items())
        for name, child in self.children().items():
            yield from child.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield from ((prefix + k, v) for k, v in self.grads.items())
        for name, child in self.children().items():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield from ((prefix + k, v) for k, v in self.buffers.items())
        for name, child in self.children().items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def __repr__(self):
        return f"{self.kind}()"


class ReLU(Layer):
    """Identity for x >= 0, zero otherwise. The gradient at exactly 0 is 1."""

    kind = "ReLU"

    def forward(self, x, train=False):
        self._mask = x >= 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp is only ever taken of a non-positive number
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x, train=False):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        y = self._y
        return grad * y * (1.0 - y)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a [b, n] tensor, evaluated after subtracting the row max."""
    if z.ndim != 2:
        raise ShapeError(f"softmax expects [b,n], got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, train=False):
        self._y = softmax(x)
        return self._y

    def backward(self, grad):
        y = self._y
        return y * (grad - (grad * y).sum(axis=1, keepdims=True))


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"global average pool expects [b,c,h,w], got {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        b, c, h, w = self._shape
        return np.broadcast_to((grad / (h * w))[:, :, None, None], self._shape).copy()


class Dense(Layer):
    """``y = x @ W + bias`` with W stored as [in_features, out_features]."""

    kind = "Dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        if rng is None:
            w = np.zeros((in_features, out_features), dtype=DTYPE)
        else:
            w = he_normal(rng, (in_features, out_features), in_features)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(out_features, dtype=DTYPE)

    def forward(self, x, train=False):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"Dense expects [b,{w.shape[0]}], got {x.shape}")
        self._x = x
        return x @ w + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = self._x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T


class Conv2D(Layer):
    """Cross-correlation (no kernel flip) lowered to im2col + matmul.

    Weights are [out_channels, in_channels, k, k]; ``bias=False`` drops the
    bias term, used where a batch norm follows.
    """

    kind = "Conv2D"

    def __init__(self, in_channels, out_channels, k, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.k, self.stride, self.padding = k, stride, padding
        shape = (out_channels, in_channels, k, k)
        fan_in = in_channels * k * k
        self.params["weight"] = (np.zeros(shape, dtype=DTYPE) if rng is None
                                 else he_normal(rng, shape, fan_in))
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2D expects [b,{self.in_channels},h,w], got {x.shape}")
        b, _, h, w = x.shape
        oh = conv_out_extent(h, self.k, self.stride, self.padding)
        ow = conv_out_extent(w, self.k, self.stride, self.padding)
        cols = im2col(x, self.k, self.stride, self.padding)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T
        if "bias" in self.params:
            out += self.params["bias"]
        self._cols, self._x_shape = cols, x.shape
        return out.reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        weight = self.params["weight"]
        self.grads["weight"] = (g.T @ self._cols).reshape(weight.shape)
        if "bias" in self.params:
            self.grads["bias"] = g.sum(axis=0)
        dcols = g @ weight.reshape(self.out_channels, -1)
        return col2im(dcols, self._x_shape, self.k, self.stride, self.padding)

    def __repr__(self):
        return (f"Conv2D({self.in_channels}->{self.out_channels}, k={self.k}, "
                f"s={self.stride}, p={self.padding})")


class MaxPool2D(Layer):
    """Window maximum; ties go to the first element in row-major window order."""

    kind = "MaxPool2D"

    def __init__(self, k=2, stride=2, padding=0):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"MaxPool2D expects [b,c,h,w], got {x.shape}")
        b, c, h, w = x.shape
        oh = conv_out_extent(h, self.k, self.stride, self.padding)
        ow = conv_out_extent(w, self.k, self.stride, self.padding)
        flat = x.reshape(b * c, 1, h, w)
        cols = im2col(flat, self.k, self.stride, self.padding, pad_value=-np.inf)
        self._argmax = cols.argmax(axis=1)
        self._x_shape = x.shape
        return cols[np.arange(cols.shape[0]), self._argmax].reshape(b, c, oh, ow)

    def backward(self, grad):
        b, c, h, w = self._x_shape
        dcols = np.zeros((self._argmax.size, self.k * self.k), dtype=DTYPE)
        dcols[np.arange(self._argmax.size), self._argmax] = grad.ravel()
        dx = col2im(dcols, (b * c, 1, h, w), self.k, self.stride, self.padding)
        return dx.reshape(self._x_shape)

    def __repr__(self):
        return f"MaxPool2D(k={self.k}, s={self.stride}, p={self.padding})"


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (batch, height, width).

    Running variance is tracked with the unbiased batch estimate.
    """

    kind = "BatchNorm2D"

    def __init__(self, channels, epsilon=BN_EPSILON, momentum=BN_MOMENTUM):
        super().__init__()
        self.channels, self.epsilon, self.momentum = channels, epsilon, momentum
        self.params["gamma"] = np.ones(channels, dtype=DTYPE)
        self.params["beta"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm2D expects [b,{self.channels},h,w], got {x.shape}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        self._train = train
        if train:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            if n < 2:
                raise ValidationError(
                    "degenerate variance: batch norm in train mode needs more than one "
                    "value per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - m
            rm += m * mean
            rv *= 1 - m
            rv += m * var * (n / (n - 1))
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._xhat, self._inv_std = xhat, inv_std
        return gamma * xhat + beta

    def backward(self, grad):
        xhat, inv_std = self._xhat, self._inv_std
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad.sum(axis=(0, 2, 3))
        scale = (self.params["gamma"] * inv_std)[None, :, None, None]
        if not self._train:
            return grad * scale
        n = grad.shape[0] * grad.shape[2] * grad.shape[3]
        dsum = grad.sum(axis=(0, 2, 3))[None, :, None, None]
        dxhat_sum = (grad * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return scale * (grad - dsum / n - xhat * dxhat_sum / n)


class ResidualBlock(Layer):
    """Two 3x3 conv + batch-norm stages added onto a shortcut, then ReLU.

    The shortcut is the identity unless ``projection`` is set, in which case
    it is a strided 1x1 convolution followed by batch norm.
    """

    kind = "ResidualBlock"

    def __init__(self, in_channels, channels, stride=1, projection=False, rng=None):
        super().__init__()
        needs_projection = stride != 1 or in_channels != channels
        if needs_projection and not projection:
            raise ShapeError(
                f"residual block {in_channels}->{channels} stride {stride} needs a projection shortcut")
        if projection and not needs_projection:
            raise ShapeError("projection shortcut given for a shape-preserving block")
        self.in_channels, self.channels, self.stride = in_channels, channels, stride
        self.conv1 = Conv2D(in_channels, channels, 3, stride, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm2D(channels)
        self.relu1 = ReLU()
        self.conv2 = Conv2D(channels, channels, 3, 1, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2D(channels)
        if projection:
            self.proj = Conv2D(in_channels, channels, 1, stride, 0, bias=False, rng=rng)
            self.proj_bn = BatchNorm2D(channels)
        else:
            self.proj = self.proj_bn = None
        self.relu_out = ReLU()

    @property
    def projection(self) -> bool:
        return self.proj is not None

    def _main(self):
        return [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2]

    def children(self):
        kids = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.proj is not None:
            kids.update(proj=self.proj, proj_bn=self.proj_bn)
        return kids

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"ResidualBlock expects [b,{self.in_channels},h,w], got {x.shape}")
        h = x
        for layer in self._main():
            h = layer.forward(h, train)
        if self.proj is not None:
            shortcut = self.proj_bn.forward(self.proj.forward(x, train), train)
        else:
            shortcut = x
        return self.relu_out.forward(h + shortcut, train)

    def backward(self, grad):
        g = self.relu_out.backward(grad)
        gm = g
        for layer in reversed(self._main()):
            gm = layer.backward(gm)
        if self.proj is not None:
            gs = self.proj.backward(self.proj_bn.backward(g))
        else:
            gs = g
        return gm + gs

    def __repr__(self):
        return (f"ResidualBlock({self.in_channels}->{self.channels}, s={self.stride}, "
                f"projection={self.projection})")


# --------------------------------------------------------------------------
# Layer specifications: pure descriptions with shape and parameter arithmetic
# --------------------------------------------------------------------------

KINDS = ("Conv2D", "MaxPool2D", "Dense", "ReLU", "Sigmoid", "Softmax", "Flatten",
         "BatchNorm2D", "ResidualBlock", "GlobalAvgPool")


@dataclass
class LayerSpec:
    """Kind plus hyperparameters of one layer, independent of its weights.

    Input shapes passed to the methods exclude the batch axis: ``(c, h, w)``
    for feature maps and ``(f,)`` for vectors.
    """

    kind: str
    hp: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for key, value in self.hp.items():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                if value < 0 or (value == 0 and key != "padding"):
                    raise ValueError(f"{self.kind} hyperparameter {key}={value} must be positive")

    def describe(self) -> str:
        return ", ".join(f"{k}={v}" for k, v in self.hp.items())

    def output_shape(self, in_shape: tuple) -> tuple:
        hp = self.hp
        if self.kind in ("Conv2D", "MaxPool2D"):
            c, h, w = _feature_map(in_shape, self.kind)
            k, s, p = hp["k"], hp["stride"], hp.get("padding", 0)
            oc = hp["out_channels"] if self.kind == "Conv2D" else c
            return (oc, conv_out_extent(h, k, s, p), conv_out_extent(w, k, s, p))
        if self.kind == "ResidualBlock":
            c, h, w = _feature_map(in_shape, self.kind)
            s = hp["stride"]
            needs_projection = s != 1 or c != hp["channels"]
            if needs_projection != bool(hp["projection"]):
                raise ShapeError(
                    f"residual block {c}->{hp['channels']} stride {s}: projection flag must be "
                    f"{needs_projection}")
            return (hp["channels"], conv_out_extent(h, 3, s, 1), conv_out_extent(w, 3, s, 1))
        if self.kind == "Dense":
            if len(in_shape) != 1:
                raise ShapeError(f"Dense needs a flat input, got {in_shape}")
            return (hp["out_features"],)
        if self.kind == "Flatten":
            return (int(np.prod(in_shape)),)
        if self.kind == "GlobalAvgPool":
            return (_feature_map(in_shape, self.kind)[0],)
        if self.kind == "BatchNorm2D":
            if in_shape[0] != hp["channels"]:
                raise ShapeError(f"BatchNorm2D over {hp['channels']} channels got {in_shape}")
        return tuple(in_shape)

    def param_count(self, in_shape: tuple) -> int:
        hp = self.hp
        if self.kind == "Conv2D":
            c = in_shape[0]
            n = hp["out_channels"] * c * hp["k"] ** 2
            return n + (hp["out_channels"] if hp.get("bias", True) else 0)
        if self.kind == "Dense":
            return in_shape[0] * hp["out_features"] + hp["out_features"]
        if self.kind == "BatchNorm2D":
            return 2 * hp["channels"]
        if self.kind == "ResidualBlock":
            shape = in_shape
            total = 0
            for sub in self.sublayers(in_shape[0]):
                total += sub.param_count(shape)
                shape = sub.output_shape(shape)
            if hp["projection"]:
                total += in_shape[0] * hp["channels"] + 2 * hp["channels"]
            return total
        return 0

    def sublayers(self, in_channels: int) -> list["LayerSpec"]:
        """Main-path specs of a residual block (the shortcut is counted separately)."""
        ch, s = self.hp["channels"], self.hp["stride"]
        return [
            LayerSpec("Conv2D", dict(out_channels=ch, k=3, stride=s, padding=1, bias=False)),
            LayerSpec("BatchNorm2D", dict(channels=ch)),
            LayerSpec("ReLU"),
            LayerSpec("Conv2D", dict(out_channels=ch, k=3, stride=1, padding=1, bias=False)),
            LayerSpec("BatchNorm2D", dict(channels=ch)),
        ]

    def build(self, in_shape: tuple, rng: np.random.Generator | None) -> Layer:
        self.output_shape(in_shape)  # validates geometry
        hp = self.hp
        if self.kind == "Conv2D":
            return Conv2D(in_shape[0], hp["out_channels"], hp["k"], hp["stride"],
                          hp.get("padding", 0), bias=hp.get("bias", True), rng=rng)
        if self.kind == "MaxPool2D":
            return MaxPool2D(hp["k"], hp["stride"], hp.get("padding", 0))
        if self.kind == "Dense":
            return Dense(in_shape[0], hp["out_features"], rng=rng)
        if self.kind == "BatchNorm2D":
            return BatchNorm2D(hp["channels"], hp.get("epsilon", BN_EPSILON),
                               hp.get("momentum", BN_MOMENTUM))
        if self.kind == "ResidualBlock":
            return ResidualBlock(in_shape[0], hp["channels"], hp["stride"], hp["projection"], rng=rng)
        return {"ReLU": ReLU, "Sigmoid": Sigmoid, "Softmax": Softmax, "Flatten": Flatten,
                "GlobalAvgPool": GlobalAvgPool}[self.kind]()


def _feature_map(in_shape, kind):
    if len(in_shape) != 3:
        raise ShapeError(f"{kind} needs a [c,h,w] input, got {in_shape}")
    return in_shape
