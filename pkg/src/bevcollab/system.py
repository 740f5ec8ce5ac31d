"""Shared assembly of the perception system: config, parameter init, forward paths.

The same forward code serves collective training (many agents warped into an
ego frame), single-agent alignment training (a one-element agent list), and
inference; the one-agent case reduces bitwise to the single-agent path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import scene as sim
from .autodiff import Tensor
from .detection import LossConfig, TargetMaps, assign_targets, head_forward, init_head_params, stack_agent_targets
from .encoders import AgentTypeSpec, MessageSpec, default_type_registry, encode, encoder_group_name, init_encoder_params
from .errors import ConfigError, UnknownAgentError
from .geometry import FeatureMap, Pose2D, relative_pose, transform_box, warp_feature
from .params import ParamGroup
from .pyramid import FusionTrace, PyramidConfig, fuse, init_pyramid_params

ObsCache = dict  # (scene_seed, agent_id, modality) -> Observation


@dataclass(frozen=True)
class SystemConfig:
    """Everything needed to build and run the perception stack."""

    msg: MessageSpec = MessageSpec()
    pyramid: PyramidConfig = PyramidConfig()
    loss: LossConfig = LossConfig()
    types: dict[str, AgentTypeSpec] = field(default_factory=default_type_registry)
    base_type: str = "scan-deep"
    conf_thresh: float = 0.3
    nms_iou: float = 0.15

    def __post_init__(self):
        if self.base_type not in self.types:
            raise ConfigError(f"base type {self.base_type!r} not in the agent type registry")
        if len(self.loss.alphas) != self.pyramid.levels:
            raise ConfigError(
                f"loss has {len(self.loss.alphas)} foreground weights but the pyramid has "
                f"{self.pyramid.levels} scales"
            )
        if self.pyramid.uniform_weight and any(a > 0 for a in self.loss.alphas):
            raise ConfigError("uniform-weight fusion requires all foreground supervision weights to be zero")

    def head_grid(self):
        return self.msg.grid().halved()

    def type_spec(self, type_id: str) -> AgentTypeSpec:
        try:
            return self.types[type_id]
        except KeyError:
            raise UnknownAgentError(f"agent type {type_id!r} is not registered") from None


def derive_seed(master: int, *stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), *[int(s) for s in stream]])


def init_base_groups(cfg: SystemConfig, seed: int) -> dict[str, ParamGroup]:
    """Fresh collaboration-base parameters: base encoder, pyramid, head."""
    enc_seed, pyr_seed, head_seed = (int(derive_seed(seed, i).generate_state(1)[0]) for i in range(3))
    enc = init_encoder_params(cfg.type_spec(cfg.base_type), cfg.msg, seed=enc_seed)
    pyr = init_pyramid_params(cfg.pyramid, cfg.msg, seed=pyr_seed)
    head = init_head_params(cfg.pyramid.fused_channels, seed=head_seed)
    return {enc.name: enc, pyr.name: pyr, head.name: head}


def get_observation(scn: sim.Scene, agent_id: int, modality: str, cfg: SystemConfig,
                    cache: ObsCache | None = None) -> sim.Observation:
    key = (scn.seed, agent_id, modality)
    if cache is not None and key in cache:
        return cache[key]
    obs = sim.render_observation(scn, agent_id, modality, cfg.msg.grid())
    if cache is not None:
        cache[key] = obs
    return obs


def encode_agent(scn: sim.Scene, agent_id: int, type_id: str, groups: dict[str, ParamGroup],
                 cfg: SystemConfig, cache: ObsCache | None = None) -> FeatureMap:
    """Render and encode one agent's observation in its own frame."""
    spec = cfg.type_spec(type_id)
    group_name = encoder_group_name(type_id)
    if group_name not in groups:
        raise UnknownAgentError(f"no encoder parameters for agent type {type_id!r}")
    obs = get_observation(scn, agent_id, spec.modality, cfg, cache)
    return encode(obs, spec, groups[group_name], cfg.msg)


def ego_aligned_features(scn: sim.Scene, ego_id: int, participants: list[tuple[int, str]],
                         groups: dict[str, ParamGroup], cfg: SystemConfig,
                         cache: ObsCache | None = None,
                         sender_poses: dict[int, Pose2D] | None = None) -> list[FeatureMap]:
    """Encode every participant and warp into the ego frame.

    ``sender_poses`` optionally overrides the pose metadata used for spatial
    alignment (e.g. noisy broadcast poses); observations are always rendered
    from true poses.
    """
    ego_pose = scn.agent(ego_id).pose
    feats = []
    for agent_id, type_id in participants:
        fm = encode_agent(scn, agent_id, type_id, groups, cfg, cache)
        pose = scn.agent(agent_id).pose
        if sender_poses is not None and agent_id in sender_poses:
            pose = sender_poses[agent_id]
        if agent_id == ego_id:
            rel = relative_pose(ego_pose, ego_pose)
        else:
            rel = relative_pose(ego_pose, pose)
        feats.append(warp_feature(fm, rel))
    return feats


def fuse_and_head(features: list[FeatureMap], groups: dict[str, ParamGroup],
                  cfg: SystemConfig) -> tuple[Tensor, FusionTrace]:
    fused, trace = fuse(features, cfg.pyramid, groups["pyramid"], cfg.msg)
    return head_forward(fused.data, groups["head"]), trace


def _boxes_in_ego_frame(scn: sim.Scene, ego_pose: Pose2D, boxes) -> list:
    rel = relative_pose(ego_pose, Pose2D.identity())  # world -> ego
    return [transform_box(b, rel) for b in boxes]


def build_step_targets(scn: sim.Scene, ego_id: int, participants: list[tuple[int, str]],
                       cfg: SystemConfig) -> TargetMaps:
    """Per-agent foreground masks plus head targets from the union of visible boxes."""
    ego_pose = scn.agent(ego_id).pose
    per_agent = []
    union_ids = set()
    union_boxes = []
    for agent_id, _ in participants:
        agent = scn.agent(agent_id)
        vis = sim.visible_boxes(scn, agent)
        for b in vis:
            if id(b) not in union_ids:
                union_ids.add(id(b))
                union_boxes.append(b)
        ego_frame = _boxes_in_ego_frame(scn, ego_pose, vis)
        per_agent.append(assign_targets(ego_frame, cfg.head_grid(), cfg.pyramid.levels))
    head = assign_targets(_boxes_in_ego_frame(scn, ego_pose, union_boxes),
                          cfg.head_grid(), cfg.pyramid.levels)
    return stack_agent_targets(per_agent, head)


def evaluation_ground_truth(scn: sim.Scene, ego_id: int, cfg: SystemConfig) -> list:
    """All scene boxes whose centers fall inside the ego's BEV window, in ego frame."""
    ego_pose = scn.agent(ego_id).pose
    ego_frame = _boxes_in_ego_frame(scn, ego_pose, scn.boxes)
    hx, hy = cfg.msg.extent_x / 2.0, cfg.msg.extent_y / 2.0
    return [b for b in ego_frame if abs(b.cx) <= hx and abs(b.cy) <= hy]
