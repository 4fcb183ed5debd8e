"""Dense-array neural network core.

Layers carry explicit forward/backward passes, losses return per-sample
values, and parameters are updated with SGD + momentum + weight decay.

All contractions go through ``np.einsum`` without BLAS dispatch. BLAS
kernels change their accumulation order with the batch size, which breaks
bitwise batch consistency; the einsum loops sum in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a tensor picks up NaN or Inf values."""


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


@dataclass
class ParamBlock:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def reset_velocity(self) -> None:
        self.velocity[...] = 0.0


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be nonnegative")


def _check_2d(x: np.ndarray, name: str) -> None:
    if x.ndim != 2:
        raise ValueError(f"{name} must be rank 2, got shape {x.shape}")


def linear_forward(x: np.ndarray, weight: ParamBlock, bias: ParamBlock) -> np.ndarray:
    """Row-wise affine map ``x @ W + b`` for ``x`` of shape (batch, in)."""
    _check_2d(x, "input")
    w = weight.value
    if x.shape[1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise ValueError(
            f"shape mismatch: input {x.shape}, weight {w.shape}, bias {bias.shape}"
        )
    return np.einsum("bi,io->bo", x, w) + bias.value


def linear_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: ParamBlock, bias: ParamBlock
) -> np.ndarray:
    """Accumulate weight/bias gradients and return the input gradient."""
    _check_2d(grad_out, "grad_out")
    w = weight.value
    if grad_out.shape != (x.shape[0], w.shape[1]) or x.shape[1] != w.shape[0]:
        raise ValueError(
            f"shape mismatch: grad_out {grad_out.shape}, input {x.shape}, weight {w.shape}"
        )
    weight.grad += np.einsum("bi,bo->io", x, grad_out)
    bias.grad += np.einsum("bo->o", grad_out)
    return np.einsum("bo,io->bi", grad_out, w)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, grad_out, 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient w.r.t. the logits.

    ``grad[i]`` is the derivative of ``loss[i]`` with respect to ``logits[i]``,
    so the gradient of the batch mean is ``grad / batch``.
    """
    _check_2d(logits, "logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.intp)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample mean squared error over the last axis, with gradient."""
    _check_2d(pred, "pred")
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    diff = pred - target
    d = pred.shape[1]
    return (diff * diff).sum(axis=1) / d, 2.0 * diff / d


def gap(feature: np.ndarray) -> np.ndarray:
    """Global average pooling over spatial axes; identity on vector features."""
    if feature.ndim == 4:
        return feature.mean(axis=(2, 3))
    if feature.ndim == 2:
        return feature
    raise ValueError(f"gap expects rank 2 or 4 input, got rank {feature.ndim}")


def gap_backward(grad_out: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    if len(input_shape) == 2:
        return grad_out
    if len(input_shape) == 4:
        h, w = input_shape[2:]
        return np.broadcast_to(grad_out[:, :, None, None] / (h * w), input_shape).copy()
    raise ValueError(f"gap expects rank 2 or 4 input, got rank {len(input_shape)}")


def sgd_step(params: list[ParamBlock], cfg: OptimConfig) -> None:
    """In-place update: g = grad + wd*value; v = mu*v + g; value -= lr*v."""
    for p in params:
        g = p.grad + cfg.weight_decay * p.value
        p.velocity *= cfg.momentum
        p.velocity += g
        p.value -= cfg.learning_rate * p.velocity
        check_finite(p.value, "parameters after sgd_step")
        p.zero_grad()


def he_init(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Gaussian init with std sqrt(2 / fan_in).

    Weights are stored (in, out), so fan-in is the product of every axis but
    the last.
    """
    if len(shape) < 2:
        raise ValueError("he_init needs at least a 2-D shape to derive fan-in")
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Linear:
    """Affine layer holding its parameters and the cached forward input."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = ParamBlock(he_init((in_dim, out_dim), rng, dtype))
        self.bias = ParamBlock(np.zeros(out_dim, dtype=dtype))
        self._x: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[ParamBlock]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return linear_forward(x, self.weight, self.bias)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        return linear_backward(grad_out, self._x, self.weight, self.bias)


def param_count(params: list[ParamBlock]) -> int:
    return sum(p.size for p in params)


def zero_grads(params: list[ParamBlock]) -> None:
    for p in params:
        p.zero_grad()
