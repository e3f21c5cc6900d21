import json

import numpy as np
import pytest

from conftest import tiny_config
from rllogo.agent import ConfigurationError
from rllogo.checkpoint import BadMagicError, TruncatedCheckpointError, VersionMismatchError
from rllogo.locenv import Action
from rllogo.pipeline import (
    Checkpoint,
    TrainConfig,
    evaluate,
    infer,
    load_checkpoint,
    pretrain,
    run_4shot,
    save_checkpoint,
    splitmix64,
    train_joint,
)
from rllogo.synthgen import DatasetManifest


class TestConfig:
    def test_defaults_keep_fixed_constants(self):
        c = TrainConfig()
        assert (c.pretrain.lr, c.pretrain.lr_after_drop, c.pretrain.momentum) == (0.001, 0.0001, 0.9)
        assert (c.joint.epochs, c.joint.eta, c.joint.tau, c.env.max_steps) == (15, 2.0, 0.75, 40)
        assert c.epsilon_schedule()(0) == 1.0 and c.epsilon_schedule()(5) == pytest.approx(0.1)
        assert c.model.trunk_width == 1024

    def test_json_round_trip(self):
        c = tiny_config()
        assert TrainConfig.from_dict(json.loads(c.to_json())) == c

    def test_key_tree(self):
        d = TrainConfig().to_dict()
        assert set(d) == {"pretrain", "joint", "env", "model", "seeds"}
        assert {"epochs", "lr", "lr_after_drop", "drop_epoch", "momentum", "weight_decay", "batch",
                "rotation_augment"} == set(d["pretrain"])
        assert {"alpha", "max_steps", "min_box", "encoder_input_side"} == set(d["env"])

    @pytest.mark.parametrize("bad", [{"extra": 1}, {"joint": {"lr_typo": 0.1}}, {"env": {"foo": 1}}])
    def test_unknown_keys_rejected(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(bad)

    @pytest.mark.parametrize("bad", [
        {"pretrain": {"epochs": 10, "drop_epoch": 10}},
        {"pretrain": {"lr": -1.0}},
        {"joint": {"tau": 1.5}},
        {"joint": {"gamma": 1.0}},
        {"seeds": []},
    ])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(bad)

    def test_load_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"joint": {"epochs": 3}}))
        assert TrainConfig.load(tmp_path / "c.json").joint.epochs == 3
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigurationError):
            TrainConfig.load(tmp_path / "bad.json")


def test_splitmix64_reference():
    # published first two outputs of splitmix64 seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


class TestPretrain:
    def test_zero_epochs_equals_init(self, tiny_data):
        _, train, ev = tiny_data
        cfg = TrainConfig.from_dict({**tiny_config().to_dict(),
                                     "pretrain": {"epochs": 0, "drop_epoch": 0}})
        ck = pretrain(cfg, train, ev, 5)
        from rllogo.pipeline import _new_params
        init = _new_params(cfg, 4, 5)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(ck.params.tensors().values(),
                                                                init.tensors().values()))

    def test_deterministic_bytes(self, tiny_data):
        _, train, ev = tiny_data
        a = pretrain(tiny_config(), train, ev, 1).to_bytes()
        b = pretrain(tiny_config(), train, ev, 1).to_bytes()
        assert a == b
        assert a != pretrain(tiny_config(), train, ev, 2).to_bytes()

    def test_q_head_untouched_and_log(self, tiny_data):
        _, train, ev = tiny_data
        ck = pretrain(tiny_config(), train, ev, 0)
        from rllogo.pipeline import _new_params
        init = _new_params(tiny_config(), 4, 0)
        assert ck.params.layers["q_head"].weight.tobytes() == init.layers["q_head"].weight.tobytes()
        assert ck.params.layers["encoder"].weight.tobytes() != init.layers["encoder"].weight.tobytes()
        assert [e["lr"] for e in ck.log] == [0.01, 0.0001]
        assert all(0 <= e["eval_top1"] <= 1 for e in ck.log)

    def test_class_mismatch(self, tiny_data, tmp_path):
        _, train, ev = tiny_data
        other = DatasetManifest(ev.records, "eval", 5, ev.class_names + ["x"], ev.root)
        with pytest.raises(ConfigurationError):
            pretrain(tiny_config(), train, other, 0)


@pytest.fixture(scope="module")
def pre_ckpt(tiny_data):
    _, train, ev = tiny_data
    return pretrain(tiny_config(), train, ev, 0)


class TestJoint:
    def test_lr_zero_keeps_params(self, tiny_data, pre_ckpt):
        _, train, _ = tiny_data
        ck = train_joint(tiny_config(lr=0.0), pre_ckpt, train, 0)
        for k, v in pre_ckpt.params.tensors().items():
            assert ck.params.tensors()[k].tobytes() == v.tobytes()
        assert ck.counters["updates"] > 0

    @pytest.mark.parametrize("kind", ["confidence", "iou"])
    def test_deterministic_and_changes_params(self, tiny_data, pre_ckpt, kind):
        _, train, _ = tiny_data
        a = train_joint(tiny_config(), pre_ckpt, train, 0, kind)
        b = train_joint(tiny_config(), pre_ckpt, train, 0, kind)
        assert a.to_bytes() == b.to_bytes()
        assert a.params.layers["q_head"].weight.tobytes() != pre_ckpt.params.layers["q_head"].weight.tobytes()
        assert [e["epsilon"] for e in a.log if e["stage"].startswith("joint")] == [1.0, pytest.approx(0.82)]

    def test_rewards_checked_on_insert(self, tiny_data, pre_ckpt, monkeypatch):
        _, train, _ = tiny_data
        import rllogo.pipeline as pl
        monkeypatch.setattr(pl, "reward_step_confidence", lambda a, b: 0.5)
        with pytest.raises(ValueError):
            train_joint(tiny_config(), pre_ckpt, train, 0, "confidence")

    def test_iou_needs_boxes(self, tiny_data, pre_ckpt):
        _, train, _ = tiny_data
        from dataclasses import replace
        stripped = DatasetManifest([replace(r, gt_box=None) for r in train.records], "train",
                                   train.num_classes, train.class_names, train.root)
        with pytest.raises(ConfigurationError):
            train_joint(tiny_config(), pre_ckpt, stripped, 0, "iou")
        with pytest.raises(ConfigurationError):
            train_joint(tiny_config(), pre_ckpt, train, 0, "bogus")


class TestCheckpoint:
    def test_round_trip(self, pre_ckpt, tmp_path):
        save_checkpoint(pre_ckpt, tmp_path / "a.bin")
        back = load_checkpoint(tmp_path / "a.bin")
        save_checkpoint(back, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert back.rng_state == pre_ckpt.rng_state and back.config == pre_ckpt.config
        assert back.class_names == pre_ckpt.class_names and back.log == pre_ckpt.log

    def test_corruptions(self, pre_ckpt):
        data = pre_ckpt.to_bytes()
        with pytest.raises(BadMagicError):
            Checkpoint.from_bytes(b"RLLX" + data[4:])
        with pytest.raises(VersionMismatchError):
            Checkpoint.from_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
        with pytest.raises(TruncatedCheckpointError):
            Checkpoint.from_bytes(data[:-3])


class TestInfer:
    def test_trace_shape(self, tiny_data, pre_ckpt):
        _, _, ev = tiny_data
        res = infer(pre_ckpt, ev.image(0))
        assert len(res.trace) == res.steps + 1 and res.steps <= 12
        assert res.trace[0].box.as_tuple() == (0.0, 0.0, 1.0, 1.0)
        assert res.final_box == res.trace[-1].box
        assert all(t.box.is_valid() for t in res.trace)
        again = infer(pre_ckpt, ev.image(0))
        assert again.trace.steps == res.trace.steps

    def test_trigger_first(self, tiny_data, pre_ckpt):
        _, _, ev = tiny_data
        ck = load_checkpoint_copy(pre_ckpt)
        ck.params.layers["q_head"].bias[int(Action.TRIGGER)] += 1e6
        res = infer(ck, ev.image(1))
        assert (res.steps, res.triggered, len(res.trace)) == (0, True, 1)
        from rllogo.pipeline import _classify, whole_image_crops
        whole = _classify(ck.params, whole_image_crops(ev, 8)[1:2]).argmax()
        assert res.predicted_class == whole

    def test_cap_without_trigger(self, tiny_data, pre_ckpt):
        _, _, ev = tiny_data
        ck = load_checkpoint_copy(pre_ckpt)
        ck.params.layers["q_head"].bias[int(Action.SCALE_DOWN)] += 1e6
        res = infer(ck, ev.image(2))
        assert (res.steps, res.triggered, len(res.trace)) == (12, False, 13)
        assert res.trace[-1].action is None

    def test_malformed_image(self, pre_ckpt):
        with pytest.raises(ValueError):
            infer(pre_ckpt, np.zeros((64, 64), np.uint8))

    def test_eval_reproducible(self, tiny_data, pre_ckpt, monkeypatch):
        _, _, ev = tiny_data
        a, _ = evaluate(pre_ckpt, ev, threads=1)
        b, _ = evaluate(pre_ckpt, ev, threads=3)
        assert a.to_json() == b.to_json()
        assert a.iter_mean <= 12 and a.top1 <= a.top5


def load_checkpoint_copy(ck):
    return Checkpoint.from_bytes(ck.to_bytes())


class TestRun4Shot:
    def test_shapes(self, tiny_data):
        _, train, ev = tiny_data
        cfg = TrainConfig.from_dict({**tiny_config(epochs=1).to_dict(), "seeds": [0]})
        rep = run_4shot(cfg, train, ev)
        assert len(rep["per_seed"]) == 1
        for k in ("top1", "top5", "recall_iou50", "iter_median", "iter_mean"):
            assert rep[k] == rep["per_seed"][0][k]

    def test_identical_seeds_zero_variance(self, tiny_data):
        _, train, ev = tiny_data
        cfg = TrainConfig.from_dict({**tiny_config(epochs=1).to_dict(), "seeds": [3, 3]})
        rep = run_4shot(cfg, train, ev)
        assert rep["per_seed"][0] == rep["per_seed"][1]
