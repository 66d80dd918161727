"""Layer-by-layer finite-difference verification of the backward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .losses import binary_cross_entropy, cross_entropy, grad_check

DEFAULT_EPS = 1e-5
DEFAULT_THRESHOLD = 1e-4


@dataclass
class CheckResult:
    kind: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def layer_gradient_error(layer: L.Layer, x: np.ndarray, train: bool = False,
                         eps: float = DEFAULT_EPS, seed: int = 0) -> float:
    """Max relative error over the input gradient and every parameter gradient.

    The scalar probed is ``sum(layer(x) * r)`` for a fixed random ``r``.
    """
    r = np.random.default_rng(seed + 1).standard_normal(layer.forward(x, train).shape)

    def objective(_):
        return float((layer.forward(x, train) * r).sum())

    layer.forward(x, train)
    grad_x = layer.backward(r)
    analytic = {name: g.copy() for name, g in layer.named_grads()}
    errors = [grad_check(objective, x, grad_x, eps)]
    for name, p in layer.named_params():
        errors.append(grad_check(objective, p, analytic[name], eps))
    return max(errors)


def loss_gradient_error(loss_fn, logits: np.ndarray, target: np.ndarray,
                        eps: float = DEFAULT_EPS) -> float:
    analytic = loss_fn(logits, target).grad
    return grad_check(lambda z: loss_fn(z, target).value, logits, analytic, eps)


def away_from_zero(rng, shape, margin=0.05):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def distinct_values(rng, shape, spacing=0.01):
    """Values with pairwise gaps of at least ``spacing`` (no max-pool ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def _residual_input(rng, shape):
    return rng.standard_normal(shape)


def default_cases(rng: np.random.Generator):
    """(kind, thunk) pairs; each thunk returns the max relative error at ``eps``."""
    def conv(eps):
        layer = L.Conv2D(3, 4, 3, stride=1, padding=1, rng=rng)
        layer.params["bias"][:] = rng.standard_normal(4)
        return layer_gradient_error(layer, rng.standard_normal((2, 3, 6, 6)), eps=eps)

    def conv_strided(eps):
        layer = L.Conv2D(2, 3, 3, stride=2, padding=0, rng=rng)
        return layer_gradient_error(layer, rng.standard_normal((2, 2, 7, 7)), eps=eps)

    def maxpool(eps):
        return layer_gradient_error(L.MaxPool2D(2, 2), distinct_values(rng, (1, 2, 6, 6)), eps=eps)

    def dense(eps):
        layer = L.Dense(10, 3, rng=rng)
        layer.params["bias"][:] = rng.standard_normal(3)
        return layer_gradient_error(layer, rng.standard_normal((4, 10)), eps=eps)

    def relu(eps):
        return layer_gradient_error(L.ReLU(), away_from_zero(rng, (4, 4)), eps=eps)

    def sig(eps):
        return layer_gradient_error(L.Sigmoid(), rng.standard_normal((4, 5)) * 3, eps=eps)

    def softmax(eps):
        return layer_gradient_error(L.Softmax(), rng.standard_normal((3, 4)), eps=eps)

    def softmax_ce(eps):
        target = np.eye(4)[rng.integers(0, 4, size=5)]
        return loss_gradient_error(cross_entropy, rng.standard_normal((5, 4)) * 2, target, eps)

    def bce(eps):
        target = rng.integers(0, 2, size=(6, 1)).astype(np.float64)
        return loss_gradient_error(binary_cross_entropy, rng.standard_normal((6, 1)) * 2, target, eps)

    def batchnorm(eps):
        layer = L.BatchNorm2D(3)
        layer.params["gamma"][:] = 1 + 0.5 * rng.standard_normal(3)
        layer.params["beta"][:] = rng.standard_normal(3)
        x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
        train_err = layer_gradient_error(layer, x, train=True, eps=eps)
        eval_err = layer_gradient_error(layer, x, train=False, eps=eps)
        return max(train_err, eval_err)

    def residual(eps):
        worst = 0.0
        for in_ch, ch, stride in ((4, 4, 1), (3, 4, 2)):
            block = L.ResidualBlock(in_ch, ch, stride, projection=(in_ch != ch or stride != 1), rng=rng)
            x = _residual_input(rng, (2, in_ch, 8, 8))
            worst = max(worst, layer_gradient_error(block, x, train=True, eps=eps))
        return worst

    def gap(eps):
        return layer_gradient_error(L.GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)), eps=eps)

    def flatten(eps):
        return layer_gradient_error(L.Flatten(), rng.standard_normal((2, 2, 3, 3)), eps=eps)

    return [
        ("Conv2D", lambda eps: max(conv(eps), conv_strided(eps))),
        ("MaxPool2D", maxpool),
        ("Dense", dense),
        ("ReLU", relu),
        ("Sigmoid", sig),
        ("Softmax", softmax),
        ("Softmax+CrossEntropy", softmax_ce),
        ("BinaryCrossEntropy", bce),
        ("BatchNorm2D", batchnorm),
        ("ResidualBlock", residual),
        ("GlobalAvgPool", gap),
        ("Flatten", flatten),
    ]


def run_suite(eps: float = DEFAULT_EPS, threshold: float = DEFAULT_THRESHOLD,
              seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(kind, fn(eps), threshold) for kind, fn in default_cases(rng)]
