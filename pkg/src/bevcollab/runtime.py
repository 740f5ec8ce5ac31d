"""Inference-time collaboration: feature messages, channel compression, fusion.

Messages carry a feature payload plus the sender's pose and grid metadata in
a fixed little-endian wire format. Compression is a sender-side 1x1-conv
autoencoder that shrinks the channel dimension by an integer ratio.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import scene as sim
from .autodiff import Tape, Tensor, add, backward, conv2d, mul, sub, tensor_mean
from .detection import DetectionSet, decode_detections, head_forward, nms
from .encoders import encoder_group_name
from .errors import ConfigError, ContractError, TrainingError, UnknownAgentError
from .geometry import FeatureMap, GridSpec, Pose2D, relative_pose, transform_box, warp_feature
from .params import ParamGroup, init_bias, init_conv
from .pyramid import fuse
from .system import SystemConfig, derive_seed, encode_agent
from .training import Checkpoint, OptimizerState, optimizer_step

logger = logging.getLogger(__name__)

MESSAGE_MAGIC = b"BVMS"
MESSAGE_VERSION = 1
_HEADER = struct.Struct("<4sHI16s5d4I")
ALLOWED_RATIOS = (1, 2, 4, 8, 16, 32)


@dataclass
class Message:
    sender_id: int
    type_id: str
    pose: Pose2D
    grid: GridSpec
    payload: np.ndarray  # (C/ratio, H, W) float32
    ratio: int = 1

    @property
    def payload_bytes(self) -> int:
        return int(self.payload.size) * 4

    @property
    def header_bytes(self) -> int:
        return _HEADER.size


def message_to_bytes(msg: Message) -> bytes:
    type_raw = msg.type_id.encode("ascii")
    if len(type_raw) > 16:
        raise ConfigError(f"type id {msg.type_id!r} exceeds the 16-byte wire field")
    header = _HEADER.pack(
        MESSAGE_MAGIC, MESSAGE_VERSION, msg.sender_id, type_raw.ljust(16, b"\x00"),
        msg.pose.x, msg.pose.y, msg.pose.yaw, msg.grid.extent_x, msg.grid.extent_y,
        msg.grid.height, msg.grid.width, msg.payload.shape[0], msg.ratio,
    )
    return header + np.ascontiguousarray(msg.payload.astype("<f4", copy=False)).tobytes()


def message_from_bytes(raw: bytes) -> Message:
    magic, version, sender_id, type_raw, x, y, yaw, dx, dy, h, w, c, ratio = _HEADER.unpack_from(raw, 0)
    if magic != MESSAGE_MAGIC:
        raise ConfigError("bad message magic")
    if version != MESSAGE_VERSION:
        raise ConfigError(f"unsupported message version {version}")
    payload = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).copy()
    return Message(
        sender_id=sender_id,
        type_id=type_raw.rstrip(b"\x00").decode("ascii"),
        pose=Pose2D(x, y, yaw),
        grid=GridSpec(h, w, dx, dy),
        payload=payload,
        ratio=ratio,
    )


# ---------------------------------------------------------------------------
# channel autoencoder
# ---------------------------------------------------------------------------

AUTOENCODER_GROUP_PREFIX = "autoencoder"


def autoencoder_group_name(ratio: int) -> str:
    return f"{AUTOENCODER_GROUP_PREFIX}/r{ratio}"


@dataclass
class AutoencoderParams:
    ratio: int
    group: ParamGroup

    def __post_init__(self):
        if self.ratio not in ALLOWED_RATIOS:
            raise ConfigError(f"compression ratio must be one of {ALLOWED_RATIOS}, got {self.ratio}")


def init_autoencoder(channels: int, ratio: int, seed: int) -> AutoencoderParams:
    if ratio not in ALLOWED_RATIOS:
        raise ConfigError(f"compression ratio must be one of {ALLOWED_RATIOS}, got {ratio}")
    if channels % ratio != 0:
        raise ConfigError(f"ratio {ratio} does not divide {channels} message channels")
    hidden = channels // ratio
    rng = np.random.default_rng(derive_seed(seed, 0xAE, ratio))
    group = ParamGroup(autoencoder_group_name(ratio))
    group.add("enc.weight", init_conv(rng, hidden, channels, 1))
    group.add("enc.bias", init_bias(rng, hidden, channels))
    group.add("dec.weight", init_conv(rng, channels, hidden, 1))
    group.add("dec.bias", init_bias(rng, channels, hidden))
    return AutoencoderParams(ratio=ratio, group=group)


def ae_encode(x: Tensor, ae: AutoencoderParams) -> Tensor:
    return add(conv2d(x, ae.group["enc.weight"]), ae.group["enc.bias"])


def ae_decode(z: Tensor, ae: AutoencoderParams) -> Tensor:
    return add(conv2d(z, ae.group["dec.weight"]), ae.group["dec.bias"])


def pack_message(feature: FeatureMap, agent: sim.AgentState,
                 ae: AutoencoderParams | None = None,
                 pose_override: Pose2D | None = None) -> Message:
    """Wrap a sender-frame feature as a message, compressing channels if asked."""
    pose = pose_override if pose_override is not None else agent.pose
    if ae is not None and ae.ratio == 1:
        ae = None  # ratio 1 on the wire means raw; identity autoencoders are tested off-wire
    if ae is None:
        payload = feature.data.data.astype(np.float32, copy=True)
        ratio = 1
    else:
        if feature.channels % ae.ratio != 0:
            raise ConfigError(f"ratio {ae.ratio} does not divide {feature.channels} channels")
        payload = ae_encode(feature.data, ae).data.astype(np.float32, copy=False)
        ratio = ae.ratio
    return Message(sender_id=agent.agent_id, type_id=agent.type_id, pose=pose,
                   grid=feature.grid, payload=payload, ratio=ratio)


def unpack_feature(msg: Message, aes: dict[int, AutoencoderParams] | None = None) -> FeatureMap:
    """Recover the sender-frame feature map, decompressing when needed."""
    if msg.ratio == 1:
        return FeatureMap(Tensor(msg.payload), msg.grid)
    if not aes or msg.ratio not in aes:
        raise ConfigError(f"no autoencoder available for compression ratio {msg.ratio}")
    decoded = ae_decode(Tensor(msg.payload), aes[msg.ratio])
    return FeatureMap(decoded, msg.grid)


@dataclass
class AutoencoderLog:
    losses: list[float]
    holdout_mse: float


def train_autoencoder(ckpt: Checkpoint, scenes, ratio: int, sys_cfg: SystemConfig,
                      steps: int = 1500, lr: float = 2e-3, seed: int = 0,
                      type_ids: tuple[str, ...] | None = None,
                      holdout_fraction: float = 0.1) -> tuple[AutoencoderParams, AutoencoderLog]:
    """Fit the channel autoencoder to reconstruct features from trained encoders.

    Perception weights are read-only here; only the autoencoder is updated.
    """
    if type_ids is None:
        type_ids = (sys_cfg.base_type,)
    feats: list[np.ndarray] = []
    cache: dict = {}
    for scn in scenes:
        for agent in scn.agents:
            for type_id in type_ids:
                if encoder_group_name(type_id) not in ckpt.groups:
                    continue
                fm = encode_agent(scn, agent.agent_id, type_id, ckpt.groups, sys_cfg, cache)
                feats.append(fm.data.data.copy())
    if len(feats) < 2:
        raise ContractError("autoencoder training needs at least two feature maps")
    n_holdout = max(1, int(len(feats) * holdout_fraction))
    holdout, train = feats[:n_holdout], feats[n_holdout:]

    ae = init_autoencoder(sys_cfg.msg.channels, ratio, seed)
    state = OptimizerState()
    rng = np.random.default_rng(derive_seed(seed, 0xAE7))
    losses = []
    for step in range(steps):
        x = Tensor(train[int(rng.integers(0, len(train)))])
        with Tape() as tape:
            recon = ae_decode(ae_encode(x, ae), ae)
            loss = tensor_mean(mul(sub(recon, x), sub(recon, x)))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"autoencoder training diverged at step {step}")
        grads = backward(loss, tape)
        optimizer_step({ae.group.name: ae.group}, grads, state, lr)
        losses.append(value)

    mse = 0.0
    for arr in holdout:
        x = Tensor(arr)
        recon = ae_decode(ae_encode(x, ae), ae)
        mse += float(((recon.data - arr) ** 2).mean())
    return ae, AutoencoderLog(losses=losses, holdout_mse=mse / len(holdout))


# ---------------------------------------------------------------------------
# collaborative inference
# ---------------------------------------------------------------------------

def build_message(scn: sim.Scene, agent_id: int, type_id: str, ckpt: Checkpoint,
                  sys_cfg: SystemConfig, ae: AutoencoderParams | None = None,
                  cache: dict | None = None) -> Message:
    """Sender side: render, encode, optionally compress, attach true pose metadata."""
    agent = scn.agent(agent_id)
    fm = encode_agent(scn, agent_id, type_id, ckpt.groups, sys_cfg, cache)
    state = sim.AgentState(agent_id=agent_id, pose=agent.pose, type_id=type_id,
                           sensing_radius=agent.sensing_radius)
    return pack_message(fm, state, ae=ae)


def collaborate_infer(ego_id: int, messages: list[Message], ckpt: Checkpoint,
                      sys_cfg: SystemConfig, noise: sim.NoiseConfig | None = None,
                      aes: dict[int, AutoencoderParams] | None = None,
                      skipped_out: list | None = None) -> DetectionSet:
    """Fuse the union of incoming agent messages in the ego frame and decode.

    Sender poses may be perturbed by ``noise`` (the ego pose stays clean);
    messages from agent types without a registered encoder are skipped with a
    warning rather than aborting the collaboration.
    """
    ego_msg = next((m for m in messages if m.sender_id == ego_id), None)
    if ego_msg is None:
        raise UnknownAgentError(f"no message from ego agent {ego_id}")
    usable = []
    for m in messages:
        if m.type_id not in sys_cfg.types or encoder_group_name(m.type_id) not in ckpt.groups:
            logger.warning("skipping message from agent %d: unknown type %r", m.sender_id, m.type_id)
            if skipped_out is not None:
                skipped_out.append(m.type_id)
            continue
        usable.append(m)

    ego_pose = ego_msg.pose
    feats = []
    for m in sorted(usable, key=lambda m: m.sender_id):
        fm = unpack_feature(m, aes)
        if m.sender_id == ego_id:
            rel = relative_pose(ego_pose, ego_pose)
        else:
            sender_pose = m.pose
            if noise is not None and (noise.sigma_p > 0 or noise.sigma_r > 0):
                sender_pose = sim.perturb_pose(sender_pose, noise, draw_seed=m.sender_id)
            rel = relative_pose(ego_pose, sender_pose)
        feats.append(warp_feature(fm, rel))

    fused, _ = fuse(feats, sys_cfg.pyramid, ckpt.groups["pyramid"], sys_cfg.msg)
    head_out = head_forward(fused.data, ckpt.groups["head"])
    return decode_detections(head_out, sys_cfg.head_grid(), sys_cfg.conf_thresh,
                             sys_cfg.nms_iou, frame=ego_id)


def single_agent_detect(scn: sim.Scene, agent_id: int, type_id: str, ckpt: Checkpoint,
                        sys_cfg: SystemConfig, cache: dict | None = None) -> DetectionSet:
    """No-fusion baseline: one agent's detections in its own frame."""
    fm = encode_agent(scn, agent_id, type_id, ckpt.groups, sys_cfg, cache)
    fused, _ = fuse([fm], sys_cfg.pyramid, ckpt.groups["pyramid"], sys_cfg.msg)
    head_out = head_forward(fused.data, ckpt.groups["head"])
    return decode_detections(head_out, sys_cfg.head_grid(), sys_cfg.conf_thresh,
                             sys_cfg.nms_iou, frame=agent_id)


def late_fusion(detections: list[tuple[DetectionSet, Pose2D]], ego_id: int,
                nms_iou: float) -> DetectionSet:
    """Merge per-agent detections in the ego frame with confidence-ordered suppression."""
    ego_pose = None
    for det, pose in detections:
        if det.frame == ego_id:
            ego_pose = pose
            break
    if ego_pose is None:
        raise UnknownAgentError(f"late fusion needs the ego set (frame {ego_id}) among inputs")
    pooled = []
    for det, pose in detections:
        rel = relative_pose(ego_pose, pose)
        pooled.extend(transform_box(b, rel) for b in det.boxes)
    return DetectionSet(boxes=nms(pooled, nms_iou), frame=ego_id)
