import numpy as np
import pytest

from bevcollab.autodiff import Tensor
from bevcollab.config import load_config
from bevcollab.detection import LossConfig
from bevcollab.encoders import MessageSpec
from bevcollab.errors import CheckpointError, TrainingError
from bevcollab.params import ParamGroup, count_trainable_params
from bevcollab.pyramid import PyramidConfig
from bevcollab.scene import SceneConfig, generate_scene
from bevcollab.system import SystemConfig
from bevcollab.training import (
    Checkpoint,
    OptimizerState,
    TrainConfig,
    checkpoint_from_groups,
    freeze_check,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    train_collab_base,
    train_new_agent_type,
)

TINY_SYS = SystemConfig(
    msg=MessageSpec(channels=4, height=16, width=16, extent_x=16.0, extent_y=16.0),
    pyramid=PyramidConfig(dims=(4, 6), blocks=(1, 1)),
    loss=LossConfig(alphas=(0.4, 0.2)),
)

TINY_SCENE = SceneConfig(world_size=20.0, box_count=(3, 5), agent_count=(2, 3),
                         agent_spread=5.0, sensing_radius=12.0)


def tiny_scenes(n, offset=0):
    return [generate_scene(TINY_SCENE, seed=offset + i) for i in range(n)]


class TestOptimizerStep:
    def _group(self, values):
        g = ParamGroup("g")
        g.add("w", Tensor(np.asarray(values, dtype=np.float32), requires_grad=True))
        return g

    def test_zero_gradient_keeps_params(self):
        g = self._group([1.0, -2.0])
        state = OptimizerState()
        optimizer_step({"g": g}, {g["w"]: np.zeros(2, dtype=np.float32)}, state, lr=0.1)
        assert np.array_equal(g["w"].data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_closed_form(self):
        g = self._group([0.0])
        state = OptimizerState()
        optimizer_step({"g": g}, {g["w"]: np.ones(1, dtype=np.float32)}, state, lr=0.01)
        # bias-corrected first step: -lr * 1 / (sqrt(1) + eps)
        assert g["w"].data[0] == pytest.approx(-0.01, rel=1e-5)

    def test_frozen_group_untouched_and_stateless(self):
        g = self._group([3.0])
        g.set_trainable(False)
        state = OptimizerState()
        optimizer_step({"g": g}, {}, state, lr=0.1)
        assert np.array_equal(g["w"].data, [3.0])
        assert state.m == {} and state.v == {}

    def test_non_finite_gradient_aborts_with_name(self):
        g = self._group([0.0])
        with pytest.raises(TrainingError, match="g/w"):
            optimizer_step({"g": g}, {g["w"]: np.array([np.inf], dtype=np.float32)},
                           OptimizerState(), lr=0.1)


class TestCheckpointIO:
    def _checkpoint(self):
        rng = np.random.default_rng(0)
        enc = ParamGroup("encoder/scan-deep")
        enc.add("w", Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True))
        pyr = ParamGroup("pyramid", trainable=False)
        pyr.add("w", Tensor(rng.normal(size=(4, 4)).astype(np.float32)))
        return checkpoint_from_groups({"encoder/scan-deep": enc, "pyramid": pyr},
                                      {"seed": 3, "phase": "test"})

    def test_save_load_save_is_byte_identical(self, tmp_path):
        ckpt = self._checkpoint()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_restores_values_and_flags(self, tmp_path):
        ckpt = self._checkpoint()
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.metadata["seed"] == 3
        assert loaded.groups["pyramid"].trainable is False
        assert loaded.groups["encoder/scan-deep"].trainable is True
        assert np.array_equal(loaded.groups["pyramid"]["w"].data, ckpt.groups["pyramid"]["w"].data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPTxxxxxxxx")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_missing_group_check(self):
        ckpt = self._checkpoint()
        with pytest.raises(CheckpointError, match="head"):
            ckpt.require_groups(["pyramid", "head"])


class TestFreezeCheck:
    def test_checkpoint_vs_itself(self):
        rng = np.random.default_rng(1)
        g = ParamGroup("pyramid")
        g.add("w", Tensor(rng.normal(size=(3, 3)).astype(np.float32)))
        ckpt = checkpoint_from_groups({"pyramid": g}, {})
        assert freeze_check(ckpt, ckpt, ["pyramid"]).ok

    def test_single_element_perturbation_detected(self):
        rng = np.random.default_rng(2)
        g = ParamGroup("pyramid")
        g.add("w", Tensor(rng.normal(size=(3, 3)).astype(np.float32)))
        g["w"].data[0, 0] = 0.0  # 1e-9 is representable only near zero in float32
        a = checkpoint_from_groups({"pyramid": g}, {})
        b = checkpoint_from_groups({"pyramid": g}, {})
        b.groups["pyramid"]["w"].data[0, 0] += 1e-9
        report = freeze_check(a, b, ["pyramid"])
        assert not report.ok and report.per_group["pyramid"] is False

    def test_missing_group_raises(self):
        g = ParamGroup("pyramid")
        g.add("w", Tensor(np.zeros((2, 2), dtype=np.float32)))
        a = checkpoint_from_groups({"pyramid": g}, {})
        b = checkpoint_from_groups({}, {})
        with pytest.raises(CheckpointError):
            freeze_check(a, b, ["pyramid"])


class TestTrainCollabBase:
    def test_lr_zero_keeps_initial_params(self):
        scenes = tiny_scenes(3)
        cfg = TrainConfig(epochs=2, lr=0.0, lr_decay_epoch=None, patience=5, seed=3)
        ckpt = train_collab_base(scenes, [], TINY_SYS, cfg)
        from bevcollab.system import init_base_groups
        init = init_base_groups(TINY_SYS, 3)
        for name, group in init.items():
            for key, tensor in group.tensors.items():
                assert np.array_equal(ckpt.groups[name][key].data, tensor.data)

    def test_same_seed_byte_identical_checkpoints(self, tmp_path):
        scenes = tiny_scenes(4)
        cfg = TrainConfig(epochs=1, lr=2e-3, lr_decay_epoch=None, patience=5, seed=9)
        p1, p2 = tmp_path / "r1.ckpt", tmp_path / "r2.ckpt"
        save_checkpoint(train_collab_base(scenes, [], TINY_SYS, cfg), p1)
        save_checkpoint(train_collab_base(scenes, [], TINY_SYS, cfg), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_smoke_run_loss_decreases(self):
        scenes = tiny_scenes(1)
        cfg = TrainConfig(epochs=50, lr=2e-3, lr_decay_epoch=None, patience=100, seed=5)
        ckpt = train_collab_base(scenes, [], TINY_SYS, cfg)
        losses = np.array([h["train_loss"] for h in ckpt.metadata["history"]])
        avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert avg[-1] < 0.7 * avg[0]
        thirds = [losses[:17].mean(), losses[17:34].mean(), losses[34:].mean()]
        assert thirds[2] < thirds[1] < thirds[0]

    def test_empty_scene_list_rejected(self):
        from bevcollab.errors import ContractError
        with pytest.raises(ContractError):
            train_collab_base([], [], TINY_SYS, TrainConfig(epochs=1, seed=0))


class TestTrainNewAgentType:
    def _base(self):
        scenes = tiny_scenes(3)
        cfg = TrainConfig(epochs=1, lr=2e-3, lr_decay_epoch=None, patience=5, seed=4)
        return scenes, train_collab_base(scenes, [], TINY_SYS, cfg)

    def test_backend_byte_identical_after_alignment(self):
        scenes, base = self._base()
        spec = TINY_SYS.type_spec("cam-wide")
        cfg = TrainConfig(epochs=1, lr=2e-3, lr_decay_epoch=None, patience=5, seed=11)
        out = train_new_agent_type(scenes, base, spec, TINY_SYS, cfg)
        assert freeze_check(base, out, ["pyramid", "head"]).ok
        assert "encoder/cam-wide" in out.groups
        assert "encoder/scan-deep" in out.groups  # base encoder carried along

    def test_trainable_count_is_new_encoder_only(self):
        scenes, base = self._base()
        spec = TINY_SYS.type_spec("scan-lite")
        cfg = TrainConfig(epochs=1, lr=2e-3, lr_decay_epoch=None, patience=5, seed=12)
        out = train_new_agent_type(scenes, base, spec, TINY_SYS, cfg)
        frozen = {"pyramid", "head"}
        trainable = [g for name, g in out.groups.items()
                     if name == "encoder/scan-lite"]
        backend_count = count_trainable_params(
            [out.groups[n] for n in frozen if out.groups[n].trainable])
        assert backend_count == 0
        assert count_trainable_params(trainable) == out.groups["encoder/scan-lite"].scalar_count()

    def test_single_agent_loss_decreases(self):
        scenes = tiny_scenes(1)
        base_cfg = TrainConfig(epochs=1, lr=2e-3, lr_decay_epoch=None, patience=5, seed=4)
        base = train_collab_base(scenes, [], TINY_SYS, base_cfg)
        spec = TINY_SYS.type_spec("cam-wide")
        cfg = TrainConfig(epochs=50, lr=2e-3, lr_decay_epoch=None, patience=100, seed=13)
        out = train_new_agent_type(scenes, base, spec, TINY_SYS, cfg)
        losses = [h["train_loss"] for h in out.metadata["history"]]
        avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert avg[-1] < avg[0]

    def test_missing_backend_rejected(self):
        g = ParamGroup("encoder/scan-deep")
        g.add("w", Tensor(np.zeros((2, 2), dtype=np.float32)))
        bad = checkpoint_from_groups({"encoder/scan-deep": g}, {})
        with pytest.raises(CheckpointError):
            train_new_agent_type([], bad, TINY_SYS.type_spec("cam-wide"), TINY_SYS,
                                 TrainConfig(epochs=1, seed=0))

    def test_unfrozen_backend_mode_trains_copy_only(self):
        scenes, base = self._base()
        spec = TINY_SYS.type_spec("cam-wide")
        cfg = TrainConfig(epochs=1, lr=2e-3, lr_decay_epoch=None, patience=5, seed=14)
        out = train_new_agent_type(scenes, base, spec, TINY_SYS, cfg, freeze_backend=False)
        # returned checkpoint still carries the ORIGINAL backend
        assert freeze_check(base, out, ["pyramid", "head"]).ok
