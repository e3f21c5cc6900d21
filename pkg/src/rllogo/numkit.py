"""Minimal dense numerical kernel.

Tensors are plain numpy arrays: float32 for parameters and activations,
float64 inside reductions (softmax, loss sums, bias gradients). Every layer
exposes an explicit forward/backward pair; there is no autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


@dataclass
class LinearLayer:
    """Affine map ``y = x @ weight.T + bias`` with gradient accumulators."""

    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=DTYPE) -> "LinearLayer":
        return cls(glorot_uniform(in_dim, out_dim, rng, dtype), np.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]

    def zero_grad(self):
        self.grad_weight.fill(0)
        self.grad_bias.fill(0)

    def astype(self, dtype) -> "LinearLayer":
        return LinearLayer(self.weight.astype(dtype), self.bias.astype(dtype))

    def copy(self) -> "LinearLayer":
        return self.astype(self.weight.dtype)


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"input {x.shape} does not match layer input dim {layer.in_dim}")
    y = x.astype(layer.weight.dtype, copy=False) @ layer.weight.T
    y += layer.bias
    return y


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Accumulate parameter gradients and return the gradient w.r.t. ``x``.

    Returns ``None`` when ``need_input_grad`` is false (first layer).
    """
    if grad_out.ndim != 2 or grad_out.shape != (x.shape[0], layer.out_dim) or x.shape[1] != layer.in_dim:
        raise ShapeError(f"grad_out {grad_out.shape} / x {x.shape} inconsistent with layer "
                         f"{layer.weight.shape}")
    dt = layer.weight.dtype
    grad_out = grad_out.astype(dt, copy=False)
    layer.grad_weight += grad_out.T @ x.astype(dt, copy=False)
    layer.grad_bias += grad_out.sum(axis=0, dtype=np.float64).astype(dt)
    if not need_input_grad:
        return None
    return grad_out @ layer.weight


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # gradient at exactly zero is zero
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, computed in float64 with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise ShapeError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    logp = log_softmax(logits)
    loss = float(-logp[rows, labels].sum() / n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    dt = logits.dtype if logits.dtype.kind == "f" else np.float64
    return loss, grad.astype(dt)


def mse_loss(pred, target):
    """Squared error ``(pred - target)**2`` and its gradient ``2 (pred - target)``.

    Works elementwise on arrays; callers average if they want a mean.
    """
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if diff.ndim == 0:
        return float(diff * diff), float(2.0 * diff)
    return diff * diff, 2.0 * diff


@dataclass
class SgdMomentumState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def buffer(self, name: str, like: np.ndarray) -> np.ndarray:
        v = self.velocity.get(name)
        if v is None:
            v = self.velocity[name] = np.zeros_like(like)
        elif v.shape != like.shape:
            raise ShapeError(f"velocity for {name!r} has shape {v.shape}, param {like.shape}")
        return v


def sgd_momentum_step(params, grads, state: SgdMomentumState):
    """One in-place step over ``params``/``grads`` (dicts keyed by parameter name).

    ``v <- m*v + g + wd*p`` then ``p <- p - lr*v``. A zero learning rate leaves
    parameters untouched bit for bit.
    """
    if params.keys() != grads.keys():
        raise ShapeError("params and grads must share names")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name!r} has shape {g.shape}, param {p.shape}")
        v = state.buffer(name, p)
        if state.learning_rate == 0.0:
            # still advance the velocity so a later nonzero lr sees the same history
            kernels.sgd_momentum_update(p.copy(), v, g, 0.0, state.momentum, state.weight_decay)
            continue
        kernels.sgd_momentum_update(p, v, g, state.learning_rate, state.momentum,
                                    state.weight_decay)
    return params


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinks: int


def grad_check(network, inputs, loss_fn, step: float = 1e-3, floor: float = 1e-6,
               max_params: int = 10_000, tol: float = 1e-3, details: bool = False,
               value_fn=None):
    """Largest relative error between analytic and central-difference gradients.

    ``network`` must provide ``astype(dtype)``, ``zero_grad()`` and ``params()``
    yielding ``(name, param, grad)``; ``loss_fn(net, inputs)`` runs forward and
    backward and returns the scalar loss. The check runs on a float64 shadow copy.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.

    A coordinate whose central difference disagrees with the analytic value is
    re-estimated with half the step. If the two estimates disagree with each
    other by more than ``tol`` the loss is not differentiable inside the step
    (a ReLU input crosses zero); such coordinates are counted as kinks and left
    out of the maximum.

    ``value_fn(net, inputs)``, if given, returns the loss without a backward
    pass and is used for the finite differences.
    """
    shadow = network.astype(np.float64)
    triples = list(shadow.params())
    total = sum(p.size for _, p, _ in triples)
    if total > max_params:
        raise ValueError(f"{total} parameters exceeds grad_check limit {max_params}")
    shadow.zero_grad()
    loss_fn(shadow, inputs)
    analytic = [g.copy() for _, _, g in triples]
    value_fn = value_fn or loss_fn

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = value_fn(shadow, inputs)
        flat[i] = orig - h
        down = value_fn(shadow, inputs)
        flat[i] = orig
        return (up - down) / (2.0 * h)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), floor)

    worst, kinks = 0.0, 0
    for (_, p, _), a in zip(triples, analytic):
        flat = p.reshape(-1)
        a = a.reshape(-1)
        for i in range(flat.size):
            num = central(flat, i, step)
            err = rel(a[i], num)
            if err > tol and rel(num, central(flat, i, step / 2)) > tol:
                kinks += 1
                continue
            worst = max(worst, err)
    if details:
        return GradCheckResult(worst, total - kinks, kinks)
    return worst
