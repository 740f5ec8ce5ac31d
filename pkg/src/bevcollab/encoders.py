"""Per-agent-type encoders mapping sensor rasters to shared-format BEV features.

Each agent type pairs a sensor modality with its own convolutional stack;
architectures differ in depth, width, and kernel sizes, but every type must
emit the same (C_msg, H_msg, W_msg) message shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scene as sim
from .autodiff import Tensor, add, conv2d, leaky_relu
from .errors import ConfigError
from .geometry import FeatureMap, GridSpec
from .params import ParamGroup, count_trainable_params, init_bias, init_conv

__all__ = [
    "AgentTypeSpec",
    "MessageSpec",
    "default_type_registry",
    "init_encoder_params",
    "encode",
    "count_trainable_params",
    "encoder_group_name",
]


@dataclass(frozen=True)
class MessageSpec:
    """Shared shape and physical extent of every inter-agent feature message."""

    channels: int = 16
    height: int = 64
    width: int = 64
    extent_x: float = 32.0
    extent_y: float = 32.0

    def grid(self) -> GridSpec:
        return GridSpec(self.height, self.width, self.extent_x, self.extent_y)


@dataclass(frozen=True)
class AgentTypeSpec:
    """One (modality, encoder architecture) pair."""

    type_id: str
    modality: str
    channels: tuple[int, ...]  # hidden widths; the message layer is appended
    kernels: tuple[int, ...]  # one per conv, including the final message conv
    init_seed: int = 0

    def __post_init__(self):
        if len(self.kernels) != len(self.channels) + 1:
            raise ConfigError(
                f"type {self.type_id!r}: {len(self.channels)} hidden layers need "
                f"{len(self.channels) + 1} kernels, got {len(self.kernels)}"
            )
        if self.modality not in sim.MODALITIES:
            raise ConfigError(f"type {self.type_id!r}: unknown modality {self.modality!r}")


def default_type_registry() -> dict[str, AgentTypeSpec]:
    """Four built-in heterogeneous agent types: two scanner and two camera variants."""
    specs = [
        AgentTypeSpec("scan-deep", sim.MODALITY_DENSE_SCAN, channels=(12, 16, 16), kernels=(3, 3, 3, 1), init_seed=101),
        AgentTypeSpec("cam-wide", sim.MODALITY_BLUR_CAM, channels=(28,), kernels=(5, 3), init_seed=202),
        AgentTypeSpec("scan-lite", sim.MODALITY_SPARSE_SCAN, channels=(12,), kernels=(3, 3), init_seed=303),
        AgentTypeSpec("cam-low", sim.MODALITY_BLUR_CAM_LOWRES, channels=(16, 16), kernels=(7, 3, 1), init_seed=404),
    ]
    return {s.type_id: s for s in specs}


def encoder_group_name(type_id: str) -> str:
    return f"encoder/{type_id}"


def init_encoder_params(spec: AgentTypeSpec, msg: MessageSpec, seed: int | None = None) -> ParamGroup:
    """Fresh encoder parameters for one agent type, seeded per type."""
    rng = np.random.default_rng(np.random.SeedSequence([seed if seed is not None else spec.init_seed, 0xE2C]))
    group = ParamGroup(encoder_group_name(spec.type_id))
    widths = [sim.OBS_CHANNELS, *spec.channels, msg.channels]
    for i, k in enumerate(spec.kernels):
        c_in, c_out = widths[i], widths[i + 1]
        group.add(f"conv{i}.weight", init_conv(rng, c_out, c_in, k))
        group.add(f"conv{i}.bias", init_bias(rng, c_out, c_in * k * k))
    return group


def encode(obs: sim.Observation, spec: AgentTypeSpec, params: ParamGroup, msg: MessageSpec) -> FeatureMap:
    """Run one agent's raster through its type's conv stack.

    Hidden layers use a leaky rectifier; the final message layer is linear so
    features may take either sign. Output is always (C_msg, H_msg, W_msg) in
    the agent's own frame.
    """
    c, h, w = obs.data.shape
    if (c, h, w) != (sim.OBS_CHANNELS, msg.height, msg.width):
        raise ConfigError(
            f"observation shape {(c, h, w)} does not match the {spec.type_id!r} input spec "
            f"({sim.OBS_CHANNELS}, {msg.height}, {msg.width})"
        )
    x = Tensor(obs.data)
    n_layers = len(spec.kernels)
    for i, k in enumerate(spec.kernels):
        x = conv2d(x, params[f"conv{i}.weight"], stride=1, padding=k // 2)
        x = add(x, params[f"conv{i}.bias"])
        if i < n_layers - 1:
            x = leaky_relu(x)
    if x.shape != (msg.channels, msg.height, msg.width):
        raise ConfigError(f"encoder for {spec.type_id!r} emitted {x.shape}, expected message shape "
                          f"({msg.channels}, {msg.height}, {msg.width})")
    return FeatureMap(x, msg.grid())
