"""Metrics, trajectory rendering, the reward ablation harness and the ``rllogo`` CLI."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import ConfigurationError
from .checkpoint import CheckpointError
from .locenv import Action, BBox, EnvConfig, env_step, reset
from .metrics import (
    EvalReport,
    build_report,
    iteration_stats,
    mean_report,
    rank_classes,
    recall_at_iou,
    top_k_accuracy,
)
from .pipeline import (
    EpisodeTrace,
    InferenceResult,
    TraceStep,
    TrainConfig,
    evaluate,
    infer,
    load_checkpoint,
    pretrain,
    run_4shot,
    save_checkpoint,
    stage_state,
    train_joint,
)
from .ppm import PPMError, read_ppm, write_ppm
from .synthgen import SCALE_RANGE, DatasetManifest, generate_dataset, load_dataset

log = logging.getLogger(__name__)

RED = (255, 0, 0)
LIGHT = (255, 230, 120)


# -- visualization -----------------------------------------------------------


def _box_pixels(box: BBox, h: int, w: int):
    """Inclusive pixel rectangle covering ``box``, clipped to the canvas."""
    x1 = min(max(int(np.floor(box.x1 * w)), 0), w - 1)
    y1 = min(max(int(np.floor(box.y1 * h)), 0), h - 1)
    x2 = min(max(int(np.ceil(box.x2 * w)) - 1, x1), w - 1)
    y2 = min(max(int(np.ceil(box.y2 * h)) - 1, y1), h - 1)
    return x1, y1, x2, y2


def draw_box(img: np.ndarray, box: BBox, color) -> None:
    """1-pixel rectangle outline, in place."""
    h, w = img.shape[:2]
    x1, y1, x2, y2 = _box_pixels(box, h, w)
    img[y1, x1:x2 + 1] = color
    img[y2, x1:x2 + 1] = color
    img[y1:y2 + 1, x1] = color
    img[y1:y2 + 1, x2] = color


def render_trace(image: np.ndarray, trace, out_path) -> np.ndarray:
    """Intermediate boxes in a light color, the final box in pure red; written as PPM."""
    steps = list(trace)
    if not steps:
        raise ValueError("trace is empty")
    img = np.array(image, dtype=np.uint8, copy=True)
    for s in steps[:-1]:
        draw_box(img, s.box, LIGHT)
    draw_box(img, steps[-1].box, RED)
    write_ppm(out_path, img)
    return img


# -- ablation ----------------------------------------------------------------


def random_policy(image: np.ndarray, env: EnvConfig, rng: np.random.Generator) -> InferenceResult:
    """Uniform box actions until the cap forces the episode to end."""
    s = reset(image, env)
    records = []
    while not s.done:
        a = Action(int(rng.integers(0, len(Action) - 1)))
        records.append(TraceStep(s.step_count, s.box, int(a), 0.0, -1))
        s, _ = env_step(s, a, env)
    records.append(TraceStep(s.step_count, s.box, None, 0.0, -1))
    return InferenceResult(-1, s.box, EpisodeTrace(records), False, s.step_count, np.zeros(1))


def random_report(manifest: DatasetManifest, env: EnvConfig, seed: int) -> EvalReport:
    rng = np.random.default_rng(stage_state(seed, 4))
    results = [random_policy(manifest.image(i), env, rng) for i in range(len(manifest))]
    median, mean = iteration_stats(results)
    recall = recall_at_iou(results, manifest.gt_boxes())
    chance = 1.0 / manifest.num_classes
    return EvalReport(chance, min(1.0, 5 * chance), recall, median, mean, len(manifest))


def manifest_hash(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for r in manifest.records:
        h.update(json.dumps([r.id, r.class_id, r.gt_box, r.seed]).encode())
        h.update(hashlib.sha256((manifest.root / r.image_path).read_bytes()).digest())
    return h.hexdigest()


@dataclass
class AblationReport:
    reports: dict  # kind -> list of per-seed EvalReports
    seeds: list
    eval_hash: str

    def mean(self, kind: str) -> dict:
        return mean_report(self.reports[kind])

    def to_dict(self) -> dict:
        return {"eval_hash": self.eval_hash, "seeds": list(self.seeds),
                "kinds": {k: {"mean": self.mean(k), "per_seed": [r.to_dict() for r in v]}
                          for k, v in self.reports.items()}}

    def table(self) -> str:
        lines = ["  Reward       Recall [%]  Top-1 [%]"]
        for k in self.reports:
            m = self.mean(k)
            lines.append(f"  {k:<11}  {100 * m['recall_iou50']:10.1f}  {100 * m['top1']:9.1f}")
        return "\n".join(lines) + "\n"


def ablate_rewards(config: TrainConfig, train: DatasetManifest, eval_manifest: DatasetManifest,
                   seeds=None, pretrained=None, progress=None) -> AblationReport:
    """Train one agent per reward kind and seed on identical data, plus a random baseline.

    ``pretrained`` optionally maps seed -> pre-trained checkpoint to reuse.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    if any(g is None for g in eval_manifest.gt_boxes()):
        raise ConfigurationError("ablation needs ground-truth boxes")
    reports = {"confidence": [], "iou": [], "random": []}
    for seed in seeds:
        pre = (pretrained or {}).get(seed) or pretrain(config, train, eval_manifest, seed, progress)
        for kind in ("confidence", "iou"):
            ck = train_joint(config, pre, train, seed, kind, progress)
            reports[kind].append(evaluate(ck, eval_manifest)[0])
        reports["random"].append(random_report(eval_manifest, config.env_config(), seed))
    return AblationReport(reports, seeds, manifest_hash(eval_manifest))


# -- command line ------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rllogo", description="Logo localization and recognition with a DQN agent.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--eval", type=int, default=500)
    p.add_argument("--scale", type=float, nargs=2, default=list(SCALE_RANGE), metavar=("MIN", "MAX"))

    p = sub.add_parser("pretrain", help="whole-image classification pre-training")
    _common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("train-joint", help="joint localization and classification training")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="pre-trained checkpoint")
    p.add_argument("--reward", choices=["confidence", "iou"], default="confidence")

    p = sub.add_parser("infer", help="run the agent on one image")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.5, help="recall IoU threshold")
    p.add_argument("--table", action="store_true", help="also print a plain-text table")

    p = sub.add_parser("viz", help="draw the agent's box trajectory on an image")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("ablate-rewards", help="confidence vs IoU reward vs random policy")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("run-4shot", help="pre-train, train and evaluate once per seed")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--reward", choices=["confidence", "iou"], default="confidence")
    return parser


def _config(args) -> TrainConfig:
    return TrainConfig.load(args.config) if args.config else TrainConfig()


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _run(args) -> None:
    cmd = args.command
    if cmd == "gen":
        if not args.out:
            raise UsageError("gen requires --out")
        tr, ev = generate_dataset(args.classes, args.train, args.eval, tuple(args.scale), args.seed, args.out)
        print(json.dumps({"train": len(tr), "eval": len(ev), "out": str(args.out)}))
        return
    if cmd in ("pretrain", "train-joint", "ablate-rewards", "run-4shot", "eval"):
        train, ev = load_dataset(args.data)
    if cmd == "pretrain":
        if not args.out:
            raise UsageError("pretrain requires --out")
        ck = pretrain(_config(args), train, ev, args.seed)
        save_checkpoint(ck, args.out)
        print(json.dumps(ck.log[-1] if ck.log else {}))
    elif cmd == "train-joint":
        if not args.out:
            raise UsageError("train-joint requires --out")
        pre = load_checkpoint(args.ckpt)
        cfg = TrainConfig.load(args.config) if args.config else pre.config
        ck = train_joint(cfg, pre, train, args.seed, args.reward)
        save_checkpoint(ck, args.out)
        print(json.dumps(ck.log[-1] if ck.log else {}))
    elif cmd == "infer":
        ck = load_checkpoint(args.ckpt)
        res = infer(ck, read_ppm(args.image))
        out = {"class_id": res.predicted_class, "class_name": ck.class_names[res.predicted_class],
               "box": list(res.final_box.as_tuple()), "steps": res.steps, "triggered": res.triggered}
        _emit(json.dumps(out) + "\n", args.out)
    elif cmd == "eval":
        ck = load_checkpoint(args.ckpt)
        report, _ = evaluate(ck, ev, args.iou)
        _emit(report.to_json(), args.out)
        if args.table:
            sys.stderr.write(report.table())
    elif cmd == "viz":
        if not args.out:
            raise UsageError("viz requires --out")
        ck = load_checkpoint(args.ckpt)
        image = read_ppm(args.image)
        res = infer(ck, image)
        render_trace(image, res.trace, args.out)
        print(json.dumps({"steps": res.steps, "box": list(res.final_box.as_tuple()), "out": args.out}))
    elif cmd == "ablate-rewards":
        report = ablate_rewards(_config(args), train, ev, args.seeds)
        _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
        sys.stderr.write(report.table())
    elif cmd == "run-4shot":
        cfg = _config(args)
        report = run_4shot(cfg, train, ev, args.reward)
        _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)


def cli_main(argv=None) -> int:
    """Exit codes: 0 success, 1 usage error, 2 runtime error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        if "usage:" not in str(exc):
            sys.stderr.write(parser.format_usage())
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except UsageError as exc:
        sys.stderr.write(f"rllogo: {exc}\n")
        return 1
    except (ConfigurationError, CheckpointError, PPMError, OSError, ValueError) as exc:
        sys.stderr.write(f"rllogo: error: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())


__all__ = [
    "AblationReport", "EvalReport", "ablate_rewards", "build_report", "cli_main", "draw_box",
    "iteration_stats", "main", "random_policy", "rank_classes", "recall_at_iou", "render_trace",
    "top_k_accuracy",
]
