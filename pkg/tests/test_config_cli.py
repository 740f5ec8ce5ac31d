import json
import os
import subprocess
import sys

import numpy as np
import pytest

import bevcollab.cli as cli
from bevcollab.config import (
    build_config,
    config_hash,
    default_config_dict,
    load_config,
    parse_override,
)
from bevcollab.errors import ConfigError


class TestConfig:
    def test_defaults_validate(self):
        cfg = load_config(None)
        assert cfg.seed == 7
        assert cfg.sys_cfg.pyramid.dims == (16, 32, 64)
        assert cfg.integration_order == ["cam-wide", "scan-lite", "cam-low"]

    def test_unknown_key_rejected_with_field_name(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "wheels": 4}))
        with pytest.raises(ConfigError, match="wheels"):
            load_config(str(path))

    def test_nested_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "world": {"gravity": 9.8}}))
        with pytest.raises(ConfigError, match="gravity"):
            load_config(str(path))

    def test_bad_type_named(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "data": {"train_scenes": -3}}))
        with pytest.raises(ConfigError, match="train_scenes"):
            load_config(str(path))

    def test_unknown_agent_type_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "agents": {"integration_order": ["hovercraft"]}}))
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_overrides_apply_and_change_hash(self):
        a = load_config(None)
        b = load_config(None, overrides=["seed=9", "train_base.epochs=3"])
        assert b.seed == 9 and b.base_train.epochs == 3
        assert a.hash != b.hash

    def test_hash_stable_for_same_config(self):
        assert load_config(None).hash == load_config(None).hash
        assert config_hash(default_config_dict()) == config_hash(default_config_dict())

    def test_parse_override_forms(self):
        assert parse_override("a.b=3") == {"a": {"b": 3}}
        assert parse_override("x=[1,2]") == {"x": [1, 2]}
        assert parse_override("agents.base_type=scan-lite") == {"agents": {"base_type": "scan-lite"}}
        with pytest.raises(ConfigError):
            parse_override("novalue")

    def test_uniform_weight_requires_zero_alphas(self):
        with pytest.raises(ConfigError, match="uniform"):
            load_config(None, overrides=["pyramid.uniform_weight=true"])
        cfg = load_config(None, overrides=["pyramid.uniform_weight=true",
                                           "loss.alphas=[0,0,0]"])
        assert cfg.sys_cfg.pyramid.uniform_weight

    def test_scene_seed_split_offsets(self):
        cfg = load_config(None)
        assert cfg.scene_seed("train", 0) != cfg.scene_seed("val", 0)
        assert cfg.scene_seed("test", 5) == cfg.scene_seed("test", 5)
        with pytest.raises(ConfigError):
            cfg.scene_seed("holdout", 0)


class TestCli:
    def test_missing_required_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train-new-type", "--type", "cam-wide", "--scenes", "x.json"])
        assert exc.value.code == 2
        assert "--base-ckpt" in capsys.readouterr().err

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "bogus": True}))
        rc = cli.main(["gen-scenes", "--config", str(path), "--out", str(tmp_path)])
        assert rc == 2
        assert "bogus" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path, capsys):
        rc = cli.main(["gen-scenes", "--config", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path)])
        assert rc == 2

    def test_gen_scenes_writes_three_splits(self, tmp_path):
        rc = cli.main(["gen-scenes", "--set", "data.train_scenes=3", "--set", "data.val_scenes=2",
                       "--set", "data.test_scenes=2", "--out", str(tmp_path)])
        assert rc == 0
        for split, count in (("train", 3), ("val", 2), ("test", 2)):
            payload = json.loads((tmp_path / f"scenes_{split}.json").read_text())
            assert len(payload["scenes"]) == count
            assert payload["metadata"]["split"] == split
            assert "config_hash" in payload["metadata"]

    def test_gen_scenes_deterministic(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            assert cli.main(["gen-scenes", "--set", "data.train_scenes=2",
                             "--set", "data.val_scenes=1", "--set", "data.test_scenes=1",
                             "--out", str(d)]) == 0
        for split in ("train", "val", "test"):
            assert ((d1 / f"scenes_{split}.json").read_bytes()
                    == (d2 / f"scenes_{split}.json").read_bytes())

    def test_runtime_error_exits_1(self, tmp_path, capsys):
        rc = cli.main(["train-base", "--scenes", str(tmp_path / "missing.json"),
                       "--out", str(tmp_path / "x.ckpt")])
        assert rc == 1

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0

    def test_console_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "bevcollab.cli", "--version"],
                             capture_output=True, text=True)
        assert out.returncode == 0
        assert "bevcollab" in out.stdout

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        rc = cli.main(["gen-scenes", "--set", "data.train_scenes=1", "--set", "data.val_scenes=1",
                       "--set", "data.test_scenes=1"])
        assert rc == 0
        out_root = tmp_path / "bevcollab-out" / "scenes"
        assert (out_root / "scenes_train.json").exists()


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    overrides = [
        "--set", "message.channels=4", "--set", "message.height=16",
        "--set", "message.width=16", "--set", "message.extent_x=16.0",
        "--set", "message.extent_y=16.0",
        "--set", "pyramid.dims=[4,6]", "--set", "pyramid.blocks=[1,1]",
        "--set", "loss.alphas=[0.4,0.2]",
        "--set", "world.world_size=20.0", "--set", "world.sensing_radius=12.0",
        "--set", "world.agent_spread=5.0", "--set", "world.box_count=[3,5]",
        "--set", "data.train_scenes=4", "--set", "data.val_scenes=2",
        "--set", "data.test_scenes=2", "--set", "data.test_agent_count=3",
        "--set", "train_base.epochs=1", "--set", "train_align.epochs=1",
    ]
    return root, overrides


class TestCliPipeline:
    """End-to-end CLI flow on a miniature configuration."""

    def test_full_flow(self, mini):
        root, overrides = mini
        scenes = root / "scenes"
        assert cli.main(["gen-scenes", *overrides, "--out", str(scenes)]) == 0

        base = root / "base.ckpt"
        assert cli.main(["train-base", *overrides,
                         "--scenes", str(scenes / "scenes_train.json"),
                         "--val", str(scenes / "scenes_val.json"),
                         "--out", str(base)]) == 0
        assert base.exists()

        with_new = root / "with_cam.ckpt"
        assert cli.main(["train-new-type", *overrides, "--base-ckpt", str(base),
                         "--type", "cam-wide",
                         "--scenes", str(scenes / "scenes_train.json"),
                         "--out", str(with_new)]) == 0

        ae_path = root / "ae.ckpt"
        assert cli.main(["train-autoencoder", *overrides, "--ckpt", str(base),
                         "--ratio", "2", "--scenes", str(scenes / "scenes_train.json"),
                         "--set", "sweeps.autoencoder_steps=50",
                         "--out", str(ae_path)]) == 0

        eval_dir = root / "eval"
        assert cli.main(["eval", *overrides, "--ckpt", str(with_new),
                         "--scenes", str(scenes / "scenes_test.json"),
                         "--types", "cam-wide", "--out", str(eval_dir)]) == 0
        payload = json.loads((eval_dir / "eval.json").read_text())
        assert "intermediate" in payload["results"]

        report_dir = root / "rerender"
        sweep_dir = root / "sweep"
        assert cli.main(["sweep", *overrides, "--ckpt", str(with_new),
                         "--scenes", str(scenes / "scenes_test.json"),
                         "--set", "sweeps.pose_sigmas=[0.0,0.4]",
                         "--out", str(sweep_dir)]) == 0
        assert cli.main(["report", "--report", str(sweep_dir / "report.json"),
                         "--out", str(report_dir)]) == 0
        assert (report_dir / "pose_sweep.csv").exists()
