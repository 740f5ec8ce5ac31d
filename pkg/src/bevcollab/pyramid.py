"""Multi-scale foreground-aware fusion of ego-aligned agent feature maps.

At each scale every agent's map passes through a residual downsampling stage
and a 1x1 foreground estimator; the per-agent foreground logits are softmax
normalized per cell into fusion weights, features are weight-summed, and the
per-scale results are upsampled back to the first scale and concatenated.
The single-agent path is the same code with a one-element list, which is what
lets a frozen back-end supervise new encoders trained on single agents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    leaky_relu,
    mul,
    mul_const,
    slice_channels,
    softmax_over_agents,
    upsample_nearest,
)
from .encoders import MessageSpec
from .errors import ConfigError, EmptyCollaboratorError, ParameterError
from .geometry import FeatureMap
from .params import ParamGroup, init_bias, init_conv

PYRAMID_GROUP = "pyramid"


@dataclass(frozen=True)
class PyramidConfig:
    """Architecture of the fusion stack.

    ``dims[l]`` is the channel width after scale l+1 (strictly increasing),
    ``blocks[l]`` the number of residual blocks at that scale; the first block
    of each scale halves the spatial dims. ``uniform_weight`` replaces the
    estimator-driven softmax with a flat average (ablation switch).
    """

    dims: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (2, 2, 2)
    uniform_weight: bool = False

    def __post_init__(self):
        if len(self.dims) < 1:
            raise ConfigError("pyramid needs at least one scale")
        if len(self.blocks) != len(self.dims):
            raise ConfigError(f"blocks {self.blocks} must match dims {self.dims}")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("every scale needs at least one block")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ConfigError(f"channel dims must be strictly increasing, got {self.dims}")

    @property
    def levels(self) -> int:
        return len(self.dims)

    @property
    def fused_channels(self) -> int:
        return sum(self.dims)

    def single_scale(self) -> "PyramidConfig":
        return PyramidConfig(dims=self.dims[:1], blocks=self.blocks[:1], uniform_weight=self.uniform_weight)


@dataclass
class FusionTrace:
    """Intermediate per-scale products of one fusion pass."""

    scores: list[Tensor | None]  # (N, h_l, w_l) logits per scale; None in uniform mode
    weights: list[Tensor | None]  # softmax of scores
    fused: list[Tensor]  # (dims[l], h_l, w_l) per scale
    final: Tensor  # (sum(dims), h_1, w_1)
    agent_count: int


def init_pyramid_params(cfg: PyramidConfig, msg: MessageSpec, seed: int) -> ParamGroup:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF5]))
    group = ParamGroup(PYRAMID_GROUP)
    in_ch = msg.channels
    for level, (dim, n_blocks) in enumerate(zip(cfg.dims, cfg.blocks), start=1):
        for b in range(n_blocks):
            c_in = in_ch if b == 0 else dim
            stride_block = b == 0  # first block downsamples
            prefix = f"scale{level}.block{b}"
            group.add(f"{prefix}.conv1.weight", init_conv(rng, dim, c_in, 3))
            group.add(f"{prefix}.conv1.bias", init_bias(rng, dim, c_in * 9))
            group.add(f"{prefix}.conv2.weight", init_conv(rng, dim, dim, 3))
            group.add(f"{prefix}.conv2.bias", init_bias(rng, dim, dim * 9))
            if stride_block or c_in != dim:
                group.add(f"{prefix}.proj.weight", init_conv(rng, dim, c_in, 1))
                group.add(f"{prefix}.proj.bias", init_bias(rng, dim, c_in))
        group.add(f"scale{level}.estimator.weight", init_conv(rng, 1, dim, 1))
        group.add(f"scale{level}.estimator.bias", init_bias(rng, 1, dim))
        in_ch = dim
    return group


def _residual_block(x: Tensor, params: ParamGroup, prefix: str, stride: int) -> Tensor:
    h = conv2d(x, params[f"{prefix}.conv1.weight"], stride=stride, padding=1)
    h = add(h, params[f"{prefix}.conv1.bias"])
    h = leaky_relu(h)
    h = conv2d(h, params[f"{prefix}.conv2.weight"], stride=1, padding=1)
    h = add(h, params[f"{prefix}.conv2.bias"])
    if f"{prefix}.proj.weight" in params.tensors:
        skip = conv2d(x, params[f"{prefix}.proj.weight"], stride=stride, padding=0)
        skip = add(skip, params[f"{prefix}.proj.bias"])
    else:
        skip = x
    return add(h, skip)


def pyramid_encode_scale(f: Tensor, level: int, cfg: PyramidConfig, params: ParamGroup) -> Tensor:
    """Residual stage for one scale: halves spatial dims, widens to dims[level-1]."""
    if not 1 <= level <= cfg.levels:
        raise ParameterError(f"scale {level} out of range 1..{cfg.levels}")
    x = f
    for b in range(cfg.blocks[level - 1]):
        x = _residual_block(x, params, f"scale{level}.block{b}", stride=2 if b == 0 else 1)
    return x


def estimate_foreground(f: Tensor, level: int, cfg: PyramidConfig, params: ParamGroup) -> Tensor:
    """Raw foreground logits (1, h, w) at one scale; sigmoid is applied only downstream."""
    if not 1 <= level <= cfg.levels:
        raise ParameterError(f"scale {level} out of range 1..{cfg.levels}")
    expected = cfg.dims[level - 1]
    if f.shape[0] != expected:
        raise ParameterError(f"scale {level} estimator expects {expected} channels, got {f.shape[0]}")
    s = conv2d(f, params[f"scale{level}.estimator.weight"], stride=1, padding=0)
    return add(s, params[f"scale{level}.estimator.bias"])


def fuse(features: list[FeatureMap], cfg: PyramidConfig, params: ParamGroup,
         msg: MessageSpec) -> tuple[FeatureMap, FusionTrace]:
    """Fuse ego-aligned agent features into one multi-scale map.

    Returns the concatenated fused feature (channels = sum(dims), spatial dims
    halved once relative to the message shape) and the full trace of per-scale
    scores, weights, and fused maps.
    """
    if not features:
        raise EmptyCollaboratorError("fuse requires at least one agent feature")
    expected = (msg.channels, msg.height, msg.width)
    for i, fm in enumerate(features):
        if fm.data.shape != expected:
            raise ConfigError(f"agent {i} feature shape {fm.data.shape} != message shape {expected}")

    n = len(features)
    per_agent = [fm.data for fm in features]
    scores_per_scale: list[Tensor | None] = []
    weights_per_scale: list[Tensor | None] = []
    fused_per_scale: list[Tensor] = []

    for level in range(1, cfg.levels + 1):
        per_agent = [pyramid_encode_scale(f, level, cfg, params) for f in per_agent]
        if cfg.uniform_weight:
            scores_per_scale.append(None)
            weights_per_scale.append(None)
            fused = None
            for f in per_agent:
                term = mul_const(f, 1.0 / n)
                fused = term if fused is None else add(fused, term)
        else:
            scores = concat_channels([estimate_foreground(f, level, cfg, params) for f in per_agent])
            weights = softmax_over_agents(scores)
            scores_per_scale.append(scores)
            weights_per_scale.append(weights)
            fused = None
            for j, f in enumerate(per_agent):
                term = mul(f, slice_channels(weights, j, j + 1))
                fused = term if fused is None else add(fused, term)
        fused_per_scale.append(fused)

    upsampled = [fused_per_scale[0]]
    for level in range(2, cfg.levels + 1):
        upsampled.append(upsample_nearest(fused_per_scale[level - 1], factor=2 ** (level - 1)))
    final = upsampled[0] if len(upsampled) == 1 else concat_channels(upsampled)

    out_grid = msg.grid().halved()
    trace = FusionTrace(scores=scores_per_scale, weights=weights_per_scale,
                        fused=fused_per_scale, final=final, agent_count=n)
    return FeatureMap(final, out_grid), trace


def single_agent_path(f: FeatureMap, cfg: PyramidConfig, params: ParamGroup,
                      msg: MessageSpec) -> tuple[FeatureMap, FusionTrace]:
    """Fusion applied to exactly one agent; shares the fuse code path."""
    return fuse([f], cfg, params, msg)


def dump_trace_images(trace: FusionTrace, out_dir, prefix: str = "trace") -> list[str]:
    """Render per-scale foreground weights and fused-feature energy to PNG files."""
    import os

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for level, fused in enumerate(trace.fused, start=1):
        weights = trace.weights[level - 1]
        n = trace.agent_count
        cols = n + 1
        fig, axes = plt.subplots(1, cols, figsize=(3 * cols, 3))
        axes = np.atleast_1d(axes)
        for j in range(n):
            ax = axes[j]
            if weights is not None:
                ax.imshow(weights.data[j], origin="lower", cmap="viridis", vmin=0.0, vmax=1.0)
                ax.set_title(f"agent {j} weight, scale {level}")
            else:
                ax.text(0.5, 0.5, "uniform", ha="center", va="center")
                ax.set_title(f"agent {j}, scale {level}")
            ax.axis("off")
        energy = np.sqrt((fused.data.astype(np.float64) ** 2).mean(axis=0))
        axes[-1].imshow(energy, origin="lower", cmap="magma")
        axes[-1].set_title(f"fused energy, scale {level}")
        axes[-1].axis("off")
        path = os.path.join(out_dir, f"{prefix}_scale{level}.png")
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
