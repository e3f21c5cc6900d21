"""Two-stage training (whole-image pre-training, then joint DQN training), inference
and checkpointing.

Randomness: every stage owns a 64-bit state that is advanced with splitmix64 at
each epoch boundary; the epoch's generator is ``numpy.random.default_rng(state)``.
The state after the last epoch is stored in the checkpoint, so a run is fully
determined by (config, dataset, seed).
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import checkpoint as ckfmt
from .agent import (
    LAYER_NAMES,
    AgentParams,
    ConfigurationError,
    EpsilonSchedule,
    ReplayBuffer,
    RewardParams,
    Transition,
    Observation,
    confidence,
    epsilon_greedy,
    forward,
    preprocess,
    q_update,
    reward_step_confidence,
    reward_step_iou,
    reward_terminal_confidence,
    reward_terminal_iou,
    sync_target,
)
from .locenv import Action, BBox, EnvConfig, crop_resize, env_step, observe, reset
from .metrics import EvalReport, build_report, mean_report, rank_classes
from .numkit import SgdMomentumState, cross_entropy_loss, sgd_momentum_step
from .synthgen import DatasetManifest

log = logging.getLogger(__name__)

MASK64 = 0xFFFFFFFFFFFFFFFF
REWARD_KINDS = ("confidence", "iou")


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stage_state(seed: int, stage: int) -> int:
    return splitmix64((int(seed) * 0x100 + stage) & MASK64)


# -- configuration -----------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.001
    lr_after_drop: float = 0.0001
    drop_epoch: int = 20
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch: int = 64
    rotation_augment: bool = True


@dataclass
class JointConfig:
    epochs: int = 15
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_anneal_epochs: float = 5
    sub_epoch_epsilon: bool = False
    exploration: str = "uniform"
    gamma: float = 0.9
    eta: float = 2.0
    tau: float = 0.75
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    replay_capacity: int = 10_000
    batch: int = 64
    target_sync: int = 500
    update_every: int = 1
    episodes_per_epoch: int = 0  # 0: one episode per training scene


@dataclass
class EnvSection:
    alpha: float = 0.2
    max_steps: int = 40
    min_box: float = 0.05
    encoder_input_side: int = 32


@dataclass
class ModelConfig:
    feature_dim: int = 256
    trunk_width: int = 1024


_SECTIONS = {"pretrain": PretrainConfig, "joint": JointConfig, "env": EnvSection, "model": ModelConfig}


@dataclass
class TrainConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])

    def __post_init__(self):
        self.validate()

    def validate(self):
        p, j, e = self.pretrain, self.joint, self.env
        if p.epochs < 0 or j.epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if p.epochs > 0 and not 0 <= p.drop_epoch < p.epochs:
            raise ConfigurationError("pretrain.drop_epoch must be below pretrain.epochs")
        for name, v in (("pretrain.lr", p.lr), ("pretrain.lr_after_drop", p.lr_after_drop),
                        ("joint.lr", j.lr)):
            if v < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        for name, v in (("pretrain.momentum", p.momentum), ("joint.momentum", j.momentum)):
            if not 0 <= v < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1)")
        if p.weight_decay < 0 or j.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if min(p.batch, j.batch, j.replay_capacity, j.update_every) < 1:
            raise ConfigurationError("batch sizes, capacity and update_every must be positive")
        if j.target_sync < 0 or j.episodes_per_epoch < 0:
            raise ConfigurationError("target_sync and episodes_per_epoch must be non-negative")
        if not 0 <= j.epsilon_end <= j.epsilon_start <= 1 or j.epsilon_anneal_epochs <= 0:
            raise ConfigurationError("invalid epsilon schedule")
        if j.exploration != "uniform":
            raise ConfigurationError(f"unknown exploration policy {j.exploration!r}")
        self.reward_params()
        if not 0 < e.alpha < 1 or not 0 < e.min_box <= 1 or e.max_steps < 1:
            raise ConfigurationError("invalid environment section")
        if e.encoder_input_side < 8 or min(self.model.feature_dim, self.model.trunk_width) < 1:
            raise ConfigurationError("invalid model dimensions")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigurationError("seeds must be a nonempty list of non-negative integers")

    def reward_params(self) -> RewardParams:
        return RewardParams(self.joint.eta, self.joint.tau, self.joint.gamma)

    def env_config(self) -> EnvConfig:
        return EnvConfig(self.env.alpha, self.env.max_steps, self.env.min_box,
                         self.env.encoder_input_side)

    def epsilon_schedule(self) -> EpsilonSchedule:
        j = self.joint
        return EpsilonSchedule(j.epsilon_start, j.epsilon_end, j.epsilon_anneal_epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a (possibly partial) key tree. Unknown keys are rejected."""
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - {"seeds"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section in _SECTIONS.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigurationError(f"config section {name!r} must be an object")
            allowed = {f.name: f.type for f in fields(section)}
            bad = set(sub) - set(allowed)
            if bad:
                raise ConfigurationError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = section(**sub)
        if "seeds" in d:
            kwargs["seeds"] = list(d["seeds"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    params: AgentParams
    velocity: dict
    counters: dict
    config: TrainConfig
    class_names: list
    rng_state: int
    log: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.params.num_classes

    def to_tensors(self) -> dict:
        meta = {"class_names": list(self.class_names), "config": self.config.to_dict(),
                "counters": dict(self.counters), "history_dim": self.params.history_dim,
                "input_side": self.params.input_side, "log": self.log}
        out = {f"param/{k}": v for k, v in self.params.tensors().items()}
        out.update({f"velocity/{k}": v for k, v in self.velocity.items()})
        out["meta"] = ckfmt.bytes_to_tensor(json.dumps(meta, sort_keys=True).encode())
        return out

    def to_bytes(self) -> bytes:
        return ckfmt.encode(self.to_tensors(), self.rng_state)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        tensors, rng_state = ckfmt.decode(data)
        if "meta" not in tensors:
            raise ckfmt.CheckpointError("checkpoint lacks its metadata tensor")
        meta = json.loads(ckfmt.tensor_to_bytes(tensors["meta"]).decode())
        params = AgentParams.from_tensors({k[6:]: v for k, v in tensors.items() if k.startswith("param/")},
                                          meta["input_side"], meta["history_dim"])
        velocity = {k[9:]: v for k, v in tensors.items() if k.startswith("velocity/")}
        return cls(params, velocity, meta["counters"], TrainConfig.from_dict(meta["config"]),
                   meta["class_names"], rng_state, meta["log"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def _new_params(config: TrainConfig, num_classes: int, seed: int) -> AgentParams:
    return AgentParams.init(num_classes, seed, input_side=config.env.encoder_input_side,
                            feature_dim=config.model.feature_dim,
                            trunk_width=config.model.trunk_width)


# -- pre-training ------------------------------------------------------------


def whole_image_crops(manifest: DatasetManifest, side: int) -> np.ndarray:
    """Every scene resampled from the full-image box to ``side``² (uint8)."""
    full = BBox.full()
    return np.stack([crop_resize(manifest.image(i), full, side) for i in range(len(manifest))])


def _classify(params: AgentParams, crops: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(crops), batch):
        x = preprocess(crops[s:s + batch])
        _, logits, _ = params.forward_batch(x, np.zeros((len(x), params.history_dim), np.float32))
        out.append(logits)
    return np.concatenate(out)


def pretrain(config: TrainConfig, train: DatasetManifest, eval_manifest: DatasetManifest | None,
             seed: int, progress: Callable[[dict], None] | None = None) -> Checkpoint:
    """Classification pre-training on whole scenes with a zero action history.

    Trains encoder, trunk and class head with cross-entropy; the Q head keeps
    its initialization. Optional quarter-turn rotation augmentation. Each log
    entry holds the full-train-set loss at epoch start, the mean batch loss and
    the eval Top-1 at epoch end.
    """
    if eval_manifest is not None and eval_manifest.num_classes != train.num_classes:
        raise ConfigurationError("train and eval manifests disagree on the class count")
    pc = config.pretrain
    side = config.env.encoder_input_side
    params = _new_params(config, train.num_classes, seed)
    opt = SgdMomentumState(pc.lr, pc.momentum, pc.weight_decay)
    crops = whole_image_crops(train, side)
    labels = train.labels()
    rotated = np.stack([np.rot90(crops, k, axes=(1, 2)) for k in range(4)]) if pc.rotation_augment else None
    eval_crops = whole_image_crops(eval_manifest, side) if eval_manifest is not None else None
    eval_labels = eval_manifest.labels() if eval_manifest is not None else None
    trainable = [n for n in LAYER_NAMES if n != "q_head"]
    state = stage_state(seed, 1)
    entries = []
    for epoch in range(pc.epochs):
        state = splitmix64(state)
        rng = np.random.default_rng(state)
        opt.learning_rate = pc.lr if epoch < pc.drop_epoch else pc.lr_after_drop
        start_loss, _ = cross_entropy_loss(_classify(params, crops), labels)
        order = rng.permutation(len(labels))
        batch_losses = []
        for s in range(0, len(order), pc.batch):
            idx = order[s:s + pc.batch]
            if rotated is not None:
                pix = rotated[rng.integers(0, 4, size=len(idx)), idx]
            else:
                pix = crops[idx]
            params.zero_grad()
            hist = np.zeros((len(idx), params.history_dim), np.float32)
            _, logits, cache = params.forward_batch(preprocess(pix), hist, need_cache=True)
            loss, grad = cross_entropy_loss(logits, labels[idx])
            params.backward(cache, None, grad)
            names = [f"{n}.{p}" for n in trainable for p in ("weight", "bias")]
            t, g = params.tensors(), params.grads()
            sgd_momentum_step({k: t[k] for k in names}, {k: g[k] for k in names}, opt)
            batch_losses.append(loss)
        entry = {"stage": "pretrain", "epoch": epoch, "lr": opt.learning_rate,
                 "start_loss": float(start_loss), "batch_loss": float(np.mean(batch_losses))}
        if eval_crops is not None:
            pred = _classify(params, eval_crops).argmax(axis=1)
            entry["eval_top1"] = float((pred == eval_labels).mean())
        entries.append(entry)
        log.info("pretrain %s", entry)
        if progress:
            progress(entry)
    counters = {"pretrain_epochs": pc.epochs, "joint_epochs": 0, "updates": 0, "env_steps": 0}
    return Checkpoint(params, dict(opt.velocity), counters, config, list(train.class_names), state, entries)


# -- joint training ----------------------------------------------------------


def _allowed_rewards(reward_kind: str, rp: RewardParams) -> set:
    steps = {-1.0, 0.0, 1.0} if reward_kind == "confidence" else {-1.0, 1.0}
    return steps | {rp.eta, -rp.eta}


def train_joint(config: TrainConfig, pretrained: Checkpoint, train: DatasetManifest, seed: int,
                reward_kind: str = "confidence",
                progress: Callable[[dict], None] | None = None) -> Checkpoint:
    """Joint DQN + classification training starting from a pre-trained checkpoint.

    Each scene yields one ε-greedy episode from the full image. Transitions go
    to a replay buffer that persists across epochs; once it holds a batch, one
    ``q_update`` runs every ``update_every`` environment steps. The class head is
    supervised with the scene label at every visited state.
    """
    if reward_kind not in REWARD_KINDS:
        raise ConfigurationError(f"reward_kind must be one of {REWARD_KINDS}")
    if pretrained.num_classes != train.num_classes:
        raise ConfigurationError("checkpoint and manifest disagree on the class count")
    gts = train.gt_boxes()
    if reward_kind == "iou" and any(g is None for g in gts):
        raise ConfigurationError("IoU reward needs ground-truth boxes for every scene")
    jc = config.joint
    env = config.env_config()
    rp = config.reward_params()
    schedule = config.epsilon_schedule()
    params = pretrained.params.copy()
    opt = SgdMomentumState(jc.lr, jc.momentum, jc.weight_decay)
    target = sync_target(params) if jc.target_sync > 0 else None
    side = env.encoder_input_side
    buffer = ReplayBuffer(jc.replay_capacity, (side, side, 3), params.history_dim,
                          _allowed_rewards(reward_kind, rp))
    images = train.load_images()
    labels = train.labels()
    updates = env_steps = 0
    state = stage_state(seed, 2 if reward_kind == "confidence" else 3)
    entries = []
    for epoch in range(jc.epochs):
        state = splitmix64(state)
        rng = np.random.default_rng(state)
        order = rng.permutation(len(labels))
        if jc.episodes_per_epoch:
            order = order[: jc.episodes_per_epoch]
        q_losses, c_losses, returns, lengths, triggers = [], [], [], [], 0
        for j, idx in enumerate(order):
            eps = schedule(epoch + j / len(order) if jc.sub_epoch_epsilon else epoch)
            label, gt = int(labels[idx]), gts[idx]
            s = reset(images[idx], env)
            obs = Observation(*observe(s, env))
            q, logits = forward(params, obs)
            c = confidence(logits, label)
            total = 0.0
            while True:
                a = epsilon_greedy(q, eps, rng)
                nxt, terminal = env_step(s, a, env)
                if a is Action.TRIGGER:
                    next_obs, nq, nlogits, nc = obs, q, logits, c
                    triggers += 1
                else:
                    next_obs = Observation(*observe(nxt, env))
                    nq, nlogits = forward(params, next_obs)
                    nc = confidence(nlogits, label)
                if reward_kind == "confidence":
                    r = reward_terminal_confidence(nc, rp) if terminal else reward_step_confidence(c, nc)
                else:
                    r = (reward_terminal_iou(nxt.box, gt, eta=rp.eta) if terminal
                         else reward_step_iou(s.box, nxt.box, gt))
                buffer.push(Transition(obs, int(a), r, next_obs, terminal, label))
                total += r
                env_steps += 1
                updated = False
                if len(buffer) >= jc.batch and env_steps % jc.update_every == 0:
                    ql, cl = q_update(params, target, buffer.sample(jc.batch, rng), rp, opt)
                    q_losses.append(ql)
                    c_losses.append(cl)
                    updates += 1
                    updated = True
                    if jc.target_sync and updates % jc.target_sync == 0:
                        target = sync_target(params)
                if terminal:
                    break
                s, obs, c = nxt, next_obs, nc
                # after an update the policy acts on refreshed Q-values
                q, logits = forward(params, obs) if updated else (nq, nlogits)
            returns.append(total)
            lengths.append(nxt.step_count)
        entry = {"stage": f"joint-{reward_kind}", "epoch": epoch, "epsilon": schedule(epoch),
                 "episodes": int(len(order)), "updates": updates,
                 "q_loss": float(np.mean(q_losses)) if q_losses else None,
                 "class_loss": float(np.mean(c_losses)) if c_losses else None,
                 "mean_return": float(np.mean(returns)), "mean_steps": float(np.mean(lengths)),
                 "trigger_rate": triggers / len(order)}
        entries.append(entry)
        log.info("joint %s", entry)
        if progress:
            progress(entry)
    counters = dict(pretrained.counters)
    counters.update(joint_epochs=jc.epochs, updates=updates, env_steps=env_steps)
    return Checkpoint(params, dict(opt.velocity), counters, config, list(pretrained.class_names),
                      state, list(pretrained.log) + entries)


# -- inference ---------------------------------------------------------------


class TraceStep(NamedTuple):
    step: int
    box: BBox
    action: int | None  # action taken from this state; None when the cap ended the episode
    confidence: float  # softmax probability of the predicted class
    predicted_class: int


@dataclass
class EpisodeTrace:
    steps: list

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]


@dataclass
class InferenceResult:
    predicted_class: int
    final_box: BBox
    trace: EpisodeTrace
    triggered: bool
    steps: int
    class_logits: np.ndarray = field(repr=False)

    @property
    def ranking(self) -> list[int]:
        return rank_classes(self.class_logits)


def infer_params(params: AgentParams, image: np.ndarray, env: EnvConfig) -> InferenceResult:
    """Greedy rollout from the full image; stops at Trigger or the step cap."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected an H×W×3 uint8 image, got {image.shape} {image.dtype}")
    s = reset(image, env)
    records = []
    while True:
        q, logits = forward(params, Observation(*observe(s, env)))
        pred = int(np.argmax(logits))
        conf = confidence(logits, pred)
        if s.done:
            records.append(TraceStep(s.step_count, s.box, None, conf, pred))
            return InferenceResult(pred, s.box, EpisodeTrace(records), False, s.step_count, logits)
        a = Action(int(np.argmax(q)))
        records.append(TraceStep(s.step_count, s.box, int(a), conf, pred))
        if a is Action.TRIGGER:
            return InferenceResult(pred, s.box, EpisodeTrace(records), True, s.step_count, logits)
        s, _ = env_step(s, a, env)


def infer(ckpt: Checkpoint, image: np.ndarray) -> InferenceResult:
    return infer_params(ckpt.params, image, ckpt.config.env_config())


def eval_threads() -> int:
    env = os.environ.get("RLLOGO_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"RLLOGO_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def infer_manifest(ckpt: Checkpoint, manifest: DatasetManifest, threads: int | None = None) -> list:
    """Inference on every scene, returned in manifest order."""
    threads = threads or eval_threads()
    run = lambda i: infer(ckpt, manifest.image(i))  # noqa: E731
    if threads == 1:
        return [run(i) for i in range(len(manifest))]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(run, range(len(manifest))))


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, threshold: float = 0.5,
             threads: int | None = None) -> tuple[EvalReport, list]:
    results = infer_manifest(ckpt, manifest, threads)
    gts = manifest.gt_boxes()
    report = build_report(results, manifest.labels(), gts if all(g is not None for g in gts) else None,
                          threshold)
    return report, results


def run_4shot(config: TrainConfig, train: DatasetManifest, eval_manifest: DatasetManifest,
              reward_kind: str = "confidence", progress: Callable[[dict], None] | None = None) -> dict:
    """Pre-train, jointly train and evaluate once per configured seed."""
    rows = []
    for seed in config.seeds:
        pre = pretrain(config, train, eval_manifest, seed, progress)
        joint = train_joint(config, pre, train, seed, reward_kind, progress)
        report, _ = evaluate(joint, eval_manifest)
        rows.append((seed, report))
    out = mean_report([r for _, r in rows])
    out["per_seed"] = [dict(seed=s, **r.to_dict()) for s, r in rows]
    out["reward_kind"] = reward_kind
    return out
