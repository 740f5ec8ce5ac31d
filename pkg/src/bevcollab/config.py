"""Experiment configuration: JSON file + schema validation + derived objects.

A config file only needs ``seed``; every other section has defaults matching
the desk-scale experiment. Unknown keys are rejected. Command-line overrides
use ``section.key=json-value`` paths and are applied before validation, so
all outputs embed the hash of the fully resolved configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

import jsonschema

from .detection import LossConfig
from .encoders import MessageSpec
from .errors import ConfigError
from .pyramid import PyramidConfig
from .scene import SceneConfig
from .system import SystemConfig
from .training import TrainConfig

_SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "config_schema.json")

SPLIT_OFFSETS = {"train": 0, "val": 200_000, "test": 400_000}


def default_config_dict() -> dict:
    return {
        "seed": 7,
        "output_dir": "bevcollab-out",
        "world": {
            "world_size": 40.0,
            "box_count": [4, 12],
            "box_length": [3.5, 5.0],
            "box_width": [1.6, 2.2],
            "agent_count": [2, 5],
            "agent_spread": 8.0,
            "sensing_radius": 25.0,
        },
        "message": {"channels": 16, "height": 64, "width": 64, "extent_x": 32.0, "extent_y": 32.0},
        "pyramid": {"dims": [16, 32, 64], "blocks": [2, 2, 2], "uniform_weight": False},
        "loss": {"alphas": [0.4, 0.2, 0.1], "focal_alpha": 0.25, "focal_gamma": 2.0, "reg_weight": 2.0},
        "detection": {"conf_thresh": 0.3, "nms_iou": 0.15},
        "agents": {"base_type": "scan-deep", "integration_order": ["cam-wide", "scan-lite", "cam-low"]},
        "data": {"train_scenes": 200, "val_scenes": 30, "test_scenes": 50, "test_agent_count": 4},
        "train_base": {"epochs": 6, "lr": 0.002, "lr_decay_epoch": 4, "lr_decay": 0.1, "patience": 5},
        "train_align": {"epochs": 4, "lr": 0.002, "lr_decay_epoch": 3, "lr_decay": 0.1, "patience": 5},
        "sweeps": {"pose_sigmas": [0.0, 0.2, 0.4, 0.6], "compression_ratios": [1, 4, 16],
                   "autoencoder_steps": 1500},
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(spec: str) -> dict:
    """Turn ``a.b.c=value`` into a nested single-leaf dict; value parsed as JSON."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like section.key=value")
    path, _, raw = spec.partition("=")
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {spec!r} has an empty key path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are allowed unquoted
    leaf: dict = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        leaf = {key: leaf}
    return leaf


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(canonical_json(resolved).encode("utf-8")).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    scene_cfg: SceneConfig
    sys_cfg: SystemConfig
    base_train: TrainConfig
    align_train: TrainConfig
    integration_order: list[str]
    n_train: int
    n_val: int
    n_test: int
    test_agent_count: int
    pose_sigmas: list[float]
    compression_ratios: list[int]
    autoencoder_steps: int
    resolved: dict = field(repr=False)
    hash: str = ""

    def scene_seed(self, split: str, index: int) -> int:
        if split not in SPLIT_OFFSETS:
            raise ConfigError(f"unknown split {split!r}")
        return self.seed * 1_000_000 + SPLIT_OFFSETS[split] + index


def _validate(resolved: dict) -> None:
    with open(_SCHEMA_PATH) as fh:
        schema = json.load(fh)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(resolved), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = ".".join(str(p) for p in first.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {first.message}")


def build_config(resolved: dict) -> ExperimentConfig:
    """Construct the typed config tree from a fully resolved dict."""
    _validate(resolved)
    w = resolved["world"]
    agents = resolved["agents"]
    scene_cfg = SceneConfig(
        world_size=w["world_size"],
        box_count=tuple(w["box_count"]),
        box_length=tuple(w["box_length"]),
        box_width=tuple(w["box_width"]),
        agent_count=tuple(w["agent_count"]),
        agent_spread=w["agent_spread"],
        sensing_radius=w["sensing_radius"],
        agent_type_mix=(agents["base_type"],),
    )
    msg = MessageSpec(**resolved["message"])
    pyramid = PyramidConfig(
        dims=tuple(resolved["pyramid"]["dims"]),
        blocks=tuple(resolved["pyramid"]["blocks"]),
        uniform_weight=resolved["pyramid"]["uniform_weight"],
    )
    loss = LossConfig(
        alphas=tuple(resolved["loss"]["alphas"]),
        focal_alpha=resolved["loss"]["focal_alpha"],
        focal_gamma=resolved["loss"]["focal_gamma"],
        reg_weight=resolved["loss"]["reg_weight"],
    )
    sys_cfg = SystemConfig(
        msg=msg, pyramid=pyramid, loss=loss,
        base_type=agents["base_type"],
        conf_thresh=resolved["detection"]["conf_thresh"],
        nms_iou=resolved["detection"]["nms_iou"],
    )
    for type_id in agents["integration_order"]:
        if type_id not in sys_cfg.types:
            raise ConfigError(f"config field agents.integration_order: "
                              f"unknown agent type {type_id!r}")

    seed = resolved["seed"]
    base_train = TrainConfig(seed=seed, **resolved["train_base"])
    align_train = TrainConfig(seed=seed, **resolved["train_align"])
    data = resolved["data"]
    sweeps = resolved["sweeps"]
    return ExperimentConfig(
        seed=seed,
        output_dir=resolved["output_dir"],
        scene_cfg=scene_cfg,
        sys_cfg=sys_cfg,
        base_train=base_train,
        align_train=align_train,
        integration_order=list(agents["integration_order"]),
        n_train=data["train_scenes"],
        n_val=data["val_scenes"],
        n_test=data["test_scenes"],
        test_agent_count=data["test_agent_count"],
        pose_sigmas=list(sweeps["pose_sigmas"]),
        compression_ratios=list(sweeps["compression_ratios"]),
        autoencoder_steps=sweeps["autoencoder_steps"],
        resolved=resolved,
        hash=config_hash(resolved),
    )


def load_config(path: str | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    """Read a JSON config file, apply overrides, validate, construct."""
    resolved = default_config_dict()
    if path is not None:
        try:
            with open(path) as fh:
                file_dict = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(file_dict, dict):
            raise ConfigError(f"config file {path} must contain a JSON object")
        resolved = _merge(resolved, file_dict)
    for spec in overrides:
        resolved = _merge(resolved, parse_override(spec))
    return build_config(resolved)
