import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from rllogo.evalcli import (
    LIGHT,
    RED,
    ablate_rewards,
    cli_main,
    iteration_stats,
    random_policy,
    recall_at_iou,
    render_trace,
    top_k_accuracy,
)
from rllogo.locenv import BBox, EnvConfig
from rllogo.metrics import EvalReport, rank_classes
from rllogo.pipeline import EpisodeTrace, TraceStep
from rllogo.ppm import read_ppm


class TestTopK:
    def test_all_correct(self):
        preds = [[c, (c + 1) % 10, (c + 2) % 10, (c + 3) % 10, (c + 4) % 10] for c in range(10)]
        assert top_k_accuracy(preds, range(10), 1) == top_k_accuracy(preds, range(10), 5) == 1.0

    def test_rank_three(self):
        preds = [[9, 8, 0, 1, 2]] * 4
        assert top_k_accuracy(preds, [0] * 4, 1) == 0.0
        assert top_k_accuracy(preds, [0] * 4, 5) == 1.0

    def test_random_predictions(self):
        rng = np.random.default_rng(0)
        preds = [list(rng.permutation(10)) for _ in range(10_000)]
        labels = rng.integers(0, 10, 10_000)
        assert top_k_accuracy(preds, labels, 1) == pytest.approx(0.1, abs=0.02)
        assert top_k_accuracy(preds, labels, 5) == pytest.approx(0.5, abs=0.02)

    def test_errors(self):
        with pytest.raises(ValueError):
            top_k_accuracy([], [], 1)
        with pytest.raises(ValueError):
            top_k_accuracy([[0, 1]], [0], 3)

    def test_ranking_tie_break(self):
        assert rank_classes(np.array([1.0, 3.0, 3.0, 0.0])) == [1, 2, 0, 3]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.floats(-5, 5), min_size=6, max_size=6), min_size=1, max_size=20),
           st.data())
    def test_top1_le_top5(self, logits, data):
        labels = data.draw(st.lists(st.integers(0, 5), min_size=len(logits), max_size=len(logits)))
        ranked = [rank_classes(np.array(v)) for v in logits]
        assert top_k_accuracy(ranked, labels, 1) <= top_k_accuracy(ranked, labels, 5)


class TestRecall:
    def test_exact_boxes(self):
        boxes = [BBox(0.1, 0.1, 0.4, 0.5), BBox(0.0, 0.2, 1.0, 0.9)]
        assert recall_at_iou(boxes, boxes) == 1.0

    def test_full_image_vs_small_gt(self):
        gt = [BBox(0.4, 0.4, 0.6, 0.6)] * 3  # area 0.04
        assert recall_at_iou([BBox.full()] * 3, gt) == 0.0

    def test_threshold_zero(self):
        gt = [BBox(0.0, 0.0, 0.2, 0.2), BBox(0.0, 0.0, 0.2, 0.2)]
        got = [BBox(0.1, 0.1, 0.3, 0.3), BBox(0.5, 0.5, 0.9, 0.9)]
        assert recall_at_iou(got, gt, 0.0) == 1.0  # IoU 0 still satisfies >= 0

    def test_missing_gt(self):
        with pytest.raises(ValueError):
            recall_at_iou([BBox.full()], [None])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(*[st.integers(0, 9)] * 8), min_size=1, max_size=15))
    def test_monotone_in_threshold(self, raw):
        def box(a, b, c, d):
            x1, x2 = sorted((a, c))
            y1, y2 = sorted((b, d))
            return BBox(x1 / 10, y1 / 10, max(x2, x1 + 1) / 10, max(y2, y1 + 1) / 10)
        got = [box(*r[:4]) for r in raw]
        gt = [box(*r[4:]) for r in raw]
        vals = [recall_at_iou(got, gt, t) for t in np.linspace(0, 1, 11)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestIterationStats:
    def test_examples(self):
        assert iteration_stats([0, 0, 0]) == (0.0, 0.0)
        assert iteration_stats([0, 0, 1, 9]) == (0.5, 2.5)
        assert iteration_stats([40]) == (40.0, 40.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            iteration_stats([])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=50))
    def test_naive_reference(self, steps):
        s = sorted(steps)
        n = len(s)
        median = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
        got = iteration_stats(steps)
        assert got[0] == median
        assert got[1] == pytest.approx(sum(s) / n, rel=1e-12)


class TestRenderTrace:
    image = np.full((64, 64, 3), 40, np.uint8)

    def test_single_state(self, tmp_path):
        trace = EpisodeTrace([TraceStep(0, BBox.full(), 8, 0.5, 0)])
        out = render_trace(self.image, trace, tmp_path / "t.ppm")
        back = read_ppm(tmp_path / "t.ppm")
        assert back.shape == self.image.shape and np.array_equal(back, out)
        border = np.zeros((64, 64), bool)
        border[[0, -1], :] = border[:, [0, -1]] = True
        assert np.all(back[border] == RED)
        assert np.all(back[~border] == 40)

    def test_intermediate_and_final(self, tmp_path):
        trace = EpisodeTrace([TraceStep(0, BBox.full(), 5, 0.2, 0),
                              TraceStep(1, BBox(0.1, 0.1, 0.9, 0.9), 5, 0.3, 0),
                              TraceStep(2, BBox(0.25, 0.25, 0.75, 0.75), 8, 0.9, 0)])
        img = render_trace(self.image, trace, tmp_path / "t.ppm")
        assert tuple(img[16, 16]) == RED and tuple(img[47, 47]) == RED  # final box corners
        assert tuple(img[6, 30]) == LIGHT
        assert tuple(img[0, 0]) == LIGHT

    def test_empty_trace(self, tmp_path):
        with pytest.raises(ValueError):
            render_trace(self.image, EpisodeTrace([]), tmp_path / "t.ppm")


def test_random_policy_reaches_cap():
    res = random_policy(np.zeros((64, 64, 3), np.uint8), EnvConfig(), np.random.default_rng(0))
    assert res.steps == 40 and not res.triggered and len(res.trace) == 41
    assert all(t.action != 8 for t in res.trace)


def test_report_invariants():
    with pytest.raises(ValueError):
        EvalReport(0.6, 0.5, None, 0, 0, 1)
    r = EvalReport(0.5, 0.9, 0.3, 1.0, 2.0, 10)
    assert json.loads(r.to_json())["top1"] == 0.5
    assert "Top-1" in r.table()


def test_ablation_shape(tiny_data):
    _, train, ev = tiny_data
    cfg = tiny_config(epochs=1)
    rep = ablate_rewards(cfg, train, ev, seeds=[0])
    d = rep.to_dict()
    assert set(d["kinds"]) == {"confidence", "iou", "random"}
    assert all(len(v["per_seed"]) == 1 for v in d["kinds"].values())
    assert all(r.n == len(ev) for v in rep.reports.values() for r in v)
    assert len(d["eval_hash"]) == 64


class TestCli:
    def test_no_args_usage(self, capsys):
        assert cli_main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli_main(["frobnicate"]) == 1

    def test_help(self, capsys):
        assert cli_main(["--help"]) == 0
        assert "gen" in capsys.readouterr().out

    def test_runtime_error(self, tmp_path, capsys):
        (tmp_path / "c.bin").write_bytes(b"nope")
        (tmp_path / "x.ppm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        assert cli_main(["infer", "--ckpt", str(tmp_path / "c.bin"), "--image", str(tmp_path / "x.ppm")]) == 2

    def test_gen_counts(self, tmp_path, capsys):
        assert cli_main(["gen", "--classes", "4", "--train", "8", "--eval", "4", "--seed", "42",
                         "--out", str(tmp_path / "d")]) == 0
        assert len(list((tmp_path / "d" / "images").glob("*.ppm"))) == 12
        assert (tmp_path / "d" / "train.jsonl").exists() and (tmp_path / "d" / "eval.jsonl").exists()

    def test_end_to_end(self, tiny_data, tmp_path, capsys):
        root, train, ev = tiny_data
        cfg = tmp_path / "cfg.json"
        cfg.write_text(tiny_config(epochs=1).to_json())
        assert cli_main(["pretrain", "--config", str(cfg), "--data", str(root), "--seed", "0",
                         "--out", str(tmp_path / "pre.bin")]) == 0
        assert cli_main(["train-joint", "--config", str(cfg), "--data", str(root), "--ckpt",
                         str(tmp_path / "pre.bin"), "--out", str(tmp_path / "j.bin")]) == 0
        capsys.readouterr()
        image = str(root / ev.records[0].image_path)
        assert cli_main(["infer", "--ckpt", str(tmp_path / "j.bin"), "--image", image]) == 0
        out = json.loads(capsys.readouterr().out)
        assert set(out) == {"class_id", "class_name", "box", "steps", "triggered"}
        assert out["class_name"] == ev.class_names[out["class_id"]] and len(out["box"]) == 4
        for name in ("a.json", "b.json"):
            assert cli_main(["eval", "--ckpt", str(tmp_path / "j.bin"), "--data", str(root),
                             "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        report = json.loads((tmp_path / "a.json").read_text())
        assert {"top1", "top5", "recall_iou50", "iter_median", "iter_mean", "n"} <= set(report)
        assert cli_main(["viz", "--ckpt", str(tmp_path / "j.bin"), "--image", image,
                         "--out", str(tmp_path / "v.ppm")]) == 0
        assert read_ppm(tmp_path / "v.ppm").shape == (64, 64, 3)

    def test_bad_config_is_runtime_error(self, tiny_data, tmp_path):
        root, _, _ = tiny_data
        (tmp_path / "bad.json").write_text('{"joint": {"nope": 1}}')
        assert cli_main(["pretrain", "--config", str(tmp_path / "bad.json"), "--data", str(root),
                         "--out", str(tmp_path / "x.bin")]) == 2
