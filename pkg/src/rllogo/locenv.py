"""Bounding-box MDP: boxes, the nine transformation actions, action history,
observation construction and episode stepping.

Box coordinates are normalized and snapped to a dyadic grid of 2**-32 so that
translations are exact in floating point (a move followed by the opposite
move restores the box bit for bit).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

GRID = 2.0 ** -32
MIN_SIDE = 0.05
ALPHA = 0.2
MAX_STEPS = 40
HISTORY_LEN = 10


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


def _snap(v: float) -> float:
    return round(v / GRID) * GRID


def _snap_up(v: float) -> float:
    return math.ceil(v / GRID - 1e-6) * GRID


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, _snap(float(getattr(self, name))))
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @classmethod
    def full(cls) -> "BBox":
        return cls(0.0, 0.0, 1.0, 1.0)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def is_valid(self, min_side: float = MIN_SIDE) -> bool:
        return (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0
                and self.width >= min_side - 1e-12 and self.height >= min_side - 1e-12)


class Action(enum.IntEnum):
    MOVE_LEFT = 0
    MOVE_RIGHT = 1
    MOVE_UP = 2
    MOVE_DOWN = 3
    SCALE_UP = 4
    SCALE_DOWN = 5
    FATTER = 6
    TALLER = 7
    TRIGGER = 8


NUM_ACTIONS = len(Action)


def _translate(lo: float, hi: float, delta: float) -> tuple[float, float]:
    size = hi - lo
    new_lo = min(max(lo + delta, 0.0), 1.0 - size)
    return new_lo, new_lo + size


def _shrink(lo: float, hi: float, frac: float, min_side: float) -> tuple[float, float]:
    size = hi - lo
    new = min(_snap_up(max(size * (1.0 - frac), min_side)), size)
    new_lo = _snap((lo + hi) / 2.0 - new / 2.0)
    new_lo = min(max(new_lo, lo), hi - new)
    return new_lo, new_lo + new


def _grow(lo: float, hi: float, frac: float) -> tuple[float, float]:
    center = (lo + hi) / 2.0
    half = (hi - lo) * (1.0 + frac) / 2.0
    return max(_snap(center - half), 0.0), min(_snap(center + half), 1.0)


def apply_action(box: BBox, action: Action, alpha: float = ALPHA,
                 min_side: float = MIN_SIDE) -> BBox:
    """Transform ``box`` by one non-trigger action.

    Moves shift by ``alpha`` of the matching box side and stop at the image
    border without resizing. Scaling acts about the center; shrinking never
    goes below ``min_side``. FATTER shrinks the height, TALLER the width.
    """
    action = Action(action)
    x1, y1, x2, y2 = box.as_tuple()
    if action is Action.TRIGGER:
        raise ContractError("TRIGGER does not transform the box")
    if action is Action.MOVE_LEFT:
        x1, x2 = _translate(x1, x2, -_snap(alpha * (x2 - x1)))
    elif action is Action.MOVE_RIGHT:
        x1, x2 = _translate(x1, x2, _snap(alpha * (x2 - x1)))
    elif action is Action.MOVE_UP:
        y1, y2 = _translate(y1, y2, -_snap(alpha * (y2 - y1)))
    elif action is Action.MOVE_DOWN:
        y1, y2 = _translate(y1, y2, _snap(alpha * (y2 - y1)))
    elif action is Action.SCALE_UP:
        x1, x2 = _grow(x1, x2, alpha)
        y1, y2 = _grow(y1, y2, alpha)
    elif action is Action.SCALE_DOWN:
        x1, x2 = _shrink(x1, x2, alpha, min_side)
        y1, y2 = _shrink(y1, y2, alpha, min_side)
    elif action is Action.FATTER:
        y1, y2 = _shrink(y1, y2, alpha, min_side)
    elif action is Action.TALLER:
        x1, x2 = _shrink(x1, x2, alpha, min_side)
    return BBox(x1, y1, x2, y2)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def crop_resize(image: np.ndarray, box: BBox, out_side: int) -> np.ndarray:
    """Bilinear resample of the ``box`` region of an H×W×3 uint8 image to out_side².

    Output pixel centers map linearly onto the box; values are rounded to uint8.
    """
    if out_side < 8:
        raise ValueError("out_side must be at least 8")
    return kernels.crop_resize_raw(image, box.as_tuple(), out_side)


@dataclass(frozen=True)
class ActionHistory:
    """The most recent actions, newest first; encodes to length × 9 one-hot groups."""

    actions: tuple = ()
    length: int = HISTORY_LEN

    def push(self, action: Action) -> "ActionHistory":
        return ActionHistory((int(action),) + self.actions[: self.length - 1], self.length)

    def vector(self) -> np.ndarray:
        v = np.zeros(self.length * NUM_ACTIONS, dtype=np.float32)
        for slot, a in enumerate(self.actions):
            v[slot * NUM_ACTIONS + a] = 1.0
        return v

    @property
    def dim(self) -> int:
        return self.length * NUM_ACTIONS


@dataclass(frozen=True)
class EnvConfig:
    alpha: float = ALPHA
    max_steps: int = MAX_STEPS
    min_box: float = MIN_SIDE
    encoder_input_side: int = 32
    history_len: int = HISTORY_LEN


@dataclass(frozen=True)
class EnvState:
    image: np.ndarray = field(repr=False, compare=False)
    box: BBox
    history: ActionHistory
    step_count: int = 0
    done: bool = False


def reset(image: np.ndarray, config: EnvConfig = EnvConfig()) -> EnvState:
    # episodes start from the whole image with an all-zero history
    return EnvState(image, BBox.full(), ActionHistory((), config.history_len))


def env_step(state: EnvState, action: Action, config: EnvConfig = EnvConfig()):
    """Advance one step. Returns ``(next_state, terminal)``.

    TRIGGER ends the episode without moving the box or counting a step. Any
    other action transforms the box, shifts the history and counts one step;
    reaching ``max_steps`` ends the episode.
    """
    if state.done:
        raise ContractError("episode already finished")
    action = Action(action)
    if action is Action.TRIGGER:
        nxt = EnvState(state.image, state.box, state.history, state.step_count, True)
        return nxt, True
    box = apply_action(state.box, action, config.alpha, config.min_box)
    steps = state.step_count + 1
    done = steps >= config.max_steps
    nxt = EnvState(state.image, box, state.history.push(action), steps, done)
    return nxt, done


def observe(state: EnvState, config: EnvConfig = EnvConfig()):
    """Raw observation: the resampled crop (uint8) and the history vector."""
    return crop_resize(state.image, state.box, config.encoder_input_side), state.history.vector()


def build_observation(encoder, state: EnvState, config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Encoder features of the current crop followed by the action history.

    ``encoder`` maps a uint8 crop to a 1-D feature vector.
    """
    crop, hist = observe(state, config)
    feats = np.asarray(encoder(crop), dtype=np.float32).reshape(-1)
    return np.concatenate([feats, hist])
