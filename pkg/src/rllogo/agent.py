"""Joint DQN agent: shared encoder, two-layer trunk, Q head and class head.

Rewards come in two flavours. The confidence-guided pair needs only the image
label: the sign of the change in the softmax confidence of the true class
while moving, and a thresholded confidence at the end. The IoU pair needs the
ground-truth box and is kept as the annotated baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .locenv import NUM_ACTIONS, Action, BBox, iou
from .numkit import (
    LinearLayer,
    SgdMomentumState,
    ShapeError,
    cross_entropy_loss,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
    sgd_momentum_step,
    softmax,
)

LAYER_NAMES = ("class_head", "encoder", "q_head", "trunk1", "trunk2")


class ConfigurationError(ValueError):
    pass


class Observation(NamedTuple):
    pixels: np.ndarray  # uint8 crop, side × side × 3
    history: np.ndarray  # float32 one-hot action history


def preprocess(pixels: np.ndarray) -> np.ndarray:
    """uint8 crops (..., S, S, 3) -> float32 rows in [-1, 1]."""
    pixels = np.asarray(pixels)
    flat = pixels.reshape(-1, int(np.prod(pixels.shape[-3:])))
    return flat.astype(np.float32) * np.float32(1 / 127.5) - np.float32(1.0)


class AgentParams:
    """Weights of the encoder (crop -> features), the two trunk layers and both heads."""

    def __init__(self, layers: dict[str, LinearLayer], input_side: int, history_dim: int):
        self.layers = layers
        self.input_side = input_side
        self.history_dim = history_dim
        self._check()

    @classmethod
    def init(cls, num_classes: int, seed: int, input_side: int = 32, feature_dim: int = 256,
             trunk_width: int = 1024, history_dim: int = 90, dtype=np.float32) -> "AgentParams":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA6E]))
        in_dim = 3 * input_side * input_side
        layers = {
            "encoder": LinearLayer.init(in_dim, feature_dim, rng, dtype),
            "trunk1": LinearLayer.init(feature_dim + history_dim, trunk_width, rng, dtype),
            "trunk2": LinearLayer.init(trunk_width, trunk_width, rng, dtype),
            "q_head": LinearLayer.init(trunk_width, NUM_ACTIONS, rng, dtype),
            "class_head": LinearLayer.init(trunk_width, num_classes, rng, dtype),
        }
        return cls(layers, input_side, history_dim)

    def _check(self):
        L = self.layers
        if set(L) != set(LAYER_NAMES):
            raise ShapeError(f"layers must be {LAYER_NAMES}")
        if L["encoder"].in_dim != 3 * self.input_side ** 2:
            raise ShapeError("encoder input does not match input side")
        if L["trunk1"].in_dim != L["encoder"].out_dim + self.history_dim:
            raise ShapeError("trunk1 input must be features + history")
        if L["trunk2"].in_dim != L["trunk1"].out_dim or L["trunk2"].out_dim != L["trunk1"].out_dim:
            raise ShapeError("trunk layers must share one width")
        if L["q_head"].out_dim != NUM_ACTIONS:
            raise ShapeError("q_head must have 9 outputs")
        for head in ("q_head", "class_head"):
            if L[head].in_dim != L["trunk2"].out_dim:
                raise ShapeError(f"{head} input must match trunk width")

    @property
    def num_classes(self) -> int:
        return self.layers["class_head"].out_dim

    @property
    def feature_dim(self) -> int:
        return self.layers["encoder"].out_dim

    @property
    def trunk_width(self) -> int:
        return self.layers["trunk1"].out_dim

    def params(self):
        for lname in LAYER_NAMES:
            for pname, p, g in self.layers[lname].params():
                yield f"{lname}.{pname}", p, g

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.params()}

    def grads(self) -> dict[str, np.ndarray]:
        return {name: g for name, _, g in self.params()}

    def zero_grad(self):
        for lin in self.layers.values():
            lin.zero_grad()

    def astype(self, dtype) -> "AgentParams":
        return AgentParams({k: v.astype(dtype) for k, v in self.layers.items()},
                           self.input_side, self.history_dim)

    def copy(self) -> "AgentParams":
        return AgentParams({k: v.copy() for k, v in self.layers.items()},
                           self.input_side, self.history_dim)

    @classmethod
    def from_tensors(cls, tensors: dict, input_side: int, history_dim: int) -> "AgentParams":
        layers = {n: LinearLayer(np.array(tensors[f"{n}.weight"], dtype=np.float32),
                                 np.array(tensors[f"{n}.bias"], dtype=np.float32))
                  for n in LAYER_NAMES}
        return cls(layers, input_side, history_dim)

    # -- forward / backward -------------------------------------------------

    def forward_batch(self, x: np.ndarray, history: np.ndarray, need_cache: bool = False):
        """``x``: preprocessed crops [B, 3·S²]; ``history``: [B, history_dim]."""
        L = self.layers
        if history.ndim != 2 or history.shape[1] != self.history_dim or history.shape[0] != x.shape[0]:
            raise ShapeError(f"history {history.shape} does not match batch of {x.shape[0]}")
        f_pre = linear_forward(L["encoder"], x)
        f = relu(f_pre)
        t_in = np.concatenate([f, history.astype(f.dtype, copy=False)], axis=1)
        h1_pre = linear_forward(L["trunk1"], t_in)
        h1 = relu(h1_pre)
        h2_pre = linear_forward(L["trunk2"], h1)
        h2 = relu(h2_pre)
        q = linear_forward(L["q_head"], h2)
        logits = linear_forward(L["class_head"], h2)
        cache = (x, f_pre, t_in, h1_pre, h1, h2_pre, h2) if need_cache else None
        return q, logits, cache

    def backward(self, cache, grad_q: np.ndarray | None, grad_logits: np.ndarray | None):
        L = self.layers
        x, f_pre, t_in, h1_pre, h1, h2_pre, h2 = cache
        g = None
        if grad_q is not None:
            g = linear_backward(L["q_head"], h2, grad_q)
        if grad_logits is not None:
            gc = linear_backward(L["class_head"], h2, grad_logits)
            g = gc if g is None else g + gc
        g = relu_backward(h2_pre, g)
        g = linear_backward(L["trunk2"], h1, g)
        g = relu_backward(h1_pre, g)
        g = linear_backward(L["trunk1"], t_in, g)
        g = relu_backward(f_pre, g[:, : self.feature_dim])
        linear_backward(L["encoder"], x, g, need_input_grad=False)


def forward(params: AgentParams, obs: Observation):
    """Q-values (9) and class logits (C) for a single observation."""
    x = preprocess(obs.pixels)
    if x.shape[1] != params.layers["encoder"].in_dim:
        raise ShapeError(f"observation crop has {x.shape[1]} values, encoder expects "
                         f"{params.layers['encoder'].in_dim}")
    q, logits, _ = params.forward_batch(x, np.asarray(obs.history).reshape(1, -1))
    return q[0], logits[0]


def confidence(class_logits: np.ndarray, target_class: int) -> float:
    """Softmax probability of ``target_class``."""
    class_logits = np.asarray(class_logits)
    if not 0 <= int(target_class) < class_logits.shape[-1]:
        raise ValueError(f"class {target_class} out of range for {class_logits.shape[-1]} classes")
    return float(softmax(class_logits)[..., int(target_class)])


@dataclass(frozen=True)
class RewardParams:
    eta: float = 2.0
    tau: float = 0.75
    gamma: float = 0.9

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if not 0 < self.tau < 1:
            raise ConfigurationError("tau must lie in (0, 1)")
        if not 0 <= self.gamma < 1:
            raise ConfigurationError("gamma must lie in [0, 1)")


def reward_step_confidence(c_prev: float, c_next: float) -> float:
    return float(np.sign(c_next - c_prev))


def reward_terminal_confidence(c_final: float, params: RewardParams = RewardParams()) -> float:
    return params.eta if c_final >= params.tau else -params.eta


def reward_step_iou(box_prev: BBox, box_next: BBox, gt_box: BBox | None) -> float:
    """+1 when IoU with the ground truth improves, -1 otherwise (ties included)."""
    if gt_box is None:
        raise ConfigurationError("IoU reward needs a ground-truth box")
    return 1.0 if iou(box_next, gt_box) > iou(box_prev, gt_box) else -1.0


def reward_terminal_iou(box_final: BBox, gt_box: BBox | None, threshold: float = 0.5,
                        eta: float = 2.0) -> float:
    if gt_box is None:
        raise ConfigurationError("IoU reward needs a ground-truth box")
    return eta if iou(box_final, gt_box) >= threshold else -eta


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.1
    anneal_epochs: float = 5

    def __call__(self, epoch: float) -> float:
        if epoch >= self.anneal_epochs:
            return self.end
        return self.start + (self.end - self.start) * max(epoch, 0.0) / self.anneal_epochs


def greedy_action(q_values: np.ndarray) -> Action:
    # np.argmax returns the first maximum: ties go to the lowest index
    return Action(int(np.argmax(q_values)))


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> Action:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return Action(int(rng.integers(NUM_ACTIONS)))
    return greedy_action(q_values)


def select_action(params: AgentParams, obs: Observation, epsilon: float,
                  rng: np.random.Generator) -> Action:
    q, _ = forward(params, obs)
    return epsilon_greedy(q, epsilon, rng)


@dataclass
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    terminal: bool
    label: int


class TransitionBatch(NamedTuple):
    pixels: np.ndarray
    history: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_pixels: np.ndarray
    next_history: np.ndarray
    terminal: np.ndarray
    label: np.ndarray

    @classmethod
    def from_transitions(cls, transitions) -> "TransitionBatch":
        t = list(transitions)
        return cls(np.stack([x.obs.pixels for x in t]), np.stack([x.obs.history for x in t]),
                   np.array([int(x.action) for x in t]), np.array([x.reward for x in t], np.float32),
                   np.stack([x.next_obs.pixels for x in t]), np.stack([x.next_obs.history for x in t]),
                   np.array([x.terminal for x in t], bool), np.array([x.label for x in t]))


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first.

    ``allowed_rewards``, when given, is checked on every insertion.
    """

    def __init__(self, capacity: int, pixel_shape, history_dim: int, allowed_rewards=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.allowed_rewards = None if allowed_rewards is None else frozenset(allowed_rewards)
        self.pixels = np.zeros((capacity, *pixel_shape), np.uint8)
        self.next_pixels = np.zeros((capacity, *pixel_shape), np.uint8)
        self.history = np.zeros((capacity, history_dim), np.uint8)
        self.next_history = np.zeros((capacity, history_dim), np.uint8)
        self.action = np.zeros(capacity, np.int64)
        self.reward = np.zeros(capacity, np.float32)
        self.terminal = np.zeros(capacity, bool)
        self.label = np.zeros(capacity, np.int64)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, t: Transition) -> None:
        if self.allowed_rewards is not None and float(t.reward) not in self.allowed_rewards:
            raise ValueError(f"reward {t.reward} outside {sorted(self.allowed_rewards)}")
        i = self.inserted % self.capacity
        self.pixels[i] = t.obs.pixels
        self.history[i] = t.obs.history
        self.next_pixels[i] = t.next_obs.pixels
        self.next_history[i] = t.next_obs.history
        self.action[i] = int(t.action)
        self.reward[i] = t.reward
        self.terminal[i] = bool(t.terminal)
        self.label[i] = int(t.label)
        self.inserted += 1

    def _slot(self, k: int) -> int:
        """Storage slot of the k-th oldest live transition."""
        start = self.inserted - len(self)
        return (start + k) % self.capacity

    def get(self, k: int) -> Transition:
        if not 0 <= k < len(self):
            raise IndexError(k)
        i = self._slot(k)
        return Transition(Observation(self.pixels[i].copy(), self.history[i].astype(np.float32)),
                          int(self.action[i]), float(self.reward[i]),
                          Observation(self.next_pixels[i].copy(), self.next_history[i].astype(np.float32)),
                          bool(self.terminal[i]), int(self.label[i]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        idx = rng.integers(0, len(self), size=batch_size)
        return TransitionBatch(self.pixels[idx], self.history[idx].astype(np.float32), self.action[idx],
                               self.reward[idx], self.next_pixels[idx],
                               self.next_history[idx].astype(np.float32), self.terminal[idx],
                               self.label[idx])


def q_targets(target_params: AgentParams, batch: TransitionBatch, gamma: float) -> np.ndarray:
    """y = r for terminal transitions, r + gamma * max_a' Q_target(s', a') otherwise."""
    y = batch.reward.astype(np.float64).copy()
    live = ~batch.terminal
    if gamma > 0 and live.any():
        q_next, _, _ = target_params.forward_batch(preprocess(batch.next_pixels[live]),
                                                   batch.next_history[live])
        y[live] += gamma * q_next.max(axis=1).astype(np.float64)
    return y


def joint_loss(params: AgentParams, batch: TransitionBatch, y: np.ndarray,
               backward: bool = True) -> tuple[float, float]:
    """Mean squared TD error on the taken actions plus class cross-entropy.

    Both terms carry weight one. Gradients accumulate into ``params``.
    """
    n = len(batch.action)
    if n == 0:
        raise ValueError("empty batch")
    x = preprocess(batch.pixels).astype(params.layers["encoder"].weight.dtype, copy=False)
    q, logits, cache = params.forward_batch(x, batch.history, need_cache=backward)
    rows = np.arange(n)
    diff = q[rows, batch.action].astype(np.float64) - y
    q_loss = float((diff * diff).sum() / n)
    class_loss, grad_logits = cross_entropy_loss(logits, batch.label)
    if backward:
        grad_q = np.zeros_like(q)
        grad_q[rows, batch.action] = 2.0 * diff / n
        params.backward(cache, grad_q, grad_logits)
    return q_loss, class_loss


def q_update(params: AgentParams, target_params: AgentParams | None, batch: TransitionBatch,
             reward_params: RewardParams, optimizer: SgdMomentumState) -> tuple[float, float]:
    """One SGD-momentum step on the joint loss. ``target_params=None`` bootstraps from ``params``."""
    if isinstance(batch, (list, tuple)) and not isinstance(batch, TransitionBatch):
        batch = TransitionBatch.from_transitions(batch)
    y = q_targets(target_params if target_params is not None else params, batch, reward_params.gamma)
    params.zero_grad()
    q_loss, class_loss = joint_loss(params, batch, y)
    sgd_momentum_step(params.tensors(), params.grads(), optimizer)
    return q_loss, class_loss


def sync_target(params: AgentParams) -> AgentParams:
    return params.copy()
