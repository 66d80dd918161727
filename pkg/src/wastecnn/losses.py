"""Losses, the SGD optimizer and the finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DivergenceError, ShapeError, ValidationError
from .layers import sigmoid


@dataclass
class LossValue:
    value: float
    grad: np.ndarray  # gradient with respect to the logits, same shape


def cross_entropy(logits: np.ndarray, target: np.ndarray) -> LossValue:
    """Mean softmax cross-entropy of [b, n] logits against one-hot targets.

    Uses the log-sum-exp form, so no probability is ever passed to ``log``.
    """
    if logits.ndim != 2 or logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} must both be [b,n]")
    if not (np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=1) == 1)):
        raise ValidationError("every target row must be one-hot")
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    value = float(-(target * log_probs).sum() / b)
    grad = (np.exp(log_probs) - target) / b
    return LossValue(max(value, 0.0), grad)


def binary_cross_entropy(logits: np.ndarray, target: np.ndarray) -> LossValue:
    """Mean binary cross-entropy of [b, 1] logits against 0/1 targets, in logit form."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} differ")
    if not np.all((target == 0) | (target == 1)):
        raise ValidationError("binary targets must be exactly 0 or 1")
    b = logits.shape[0]
    # -[t log s(z) + (1-t) log(1-s(z))] == max(z,0) - z t + log(1 + e^-|z|)
    per = np.maximum(logits, 0.0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    value = float(per.sum() / b)
    grad = (sigmoid(logits) - target) / b
    return LossValue(max(value, 0.0), grad)


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: Iterable[tuple[str, np.ndarray]], grads: dict[str, np.ndarray],
             state: OptimizerState) -> None:
    """In-place momentum SGD: ``v <- momentum*v - lr*g; p <- p + v``."""
    params = list(params)
    for name, _ in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence: non-finite gradient for parameter {name}")
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v -= state.learning_rate * g
        p += v


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps``; perturbs ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
               eps: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and the central-difference gradient of f at x."""
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient {analytic.shape} does not match x {x.shape}")
    numeric = numeric_gradient(f, x, eps)
    return float(relative_error(analytic, numeric).max())
