"""Two-phase training with strict freeze semantics, Adam, and binary checkpoints.

Phase 1 trains the collaboration base end to end (encoder + fusion + head,
all trainable). Phase 2 integrates a new agent type by training only a fresh
encoder against the frozen fusion stack and head on single-agent steps; the
back-end tensors must come out byte-identical.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import scene as sim
from .autodiff import Tape, Tensor, backward
from .detection import total_loss
from .encoders import AgentTypeSpec, init_encoder_params
from .errors import CheckpointError, ContractError, TrainingError
from .params import ParamGroup
from .system import (
    SystemConfig,
    build_step_targets,
    derive_seed,
    ego_aligned_features,
    fuse_and_head,
    init_base_groups,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BVCKPT01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    lr: float = 2e-3
    lr_decay_epoch: int | None = 4
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    seed: int = 0


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Bias-corrected first/second moment accumulators for trainable groups only."""

    m: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    v: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(groups: dict[str, ParamGroup], grads: dict[Tensor, np.ndarray],
                   state: OptimizerState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One adaptive-moment update over every trainable group, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for group_name in sorted(groups):
        group = groups[group_name]
        if not group.trainable:
            continue
        for tensor_name, tensor in group.tensors.items():
            g = grads.get(tensor)
            if g is None:
                g = np.zeros_like(tensor.data)
            elif not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {group_name}/{tensor_name}")
            key = (group_name, tensor_name)
            if key not in state.m:
                state.m[key] = np.zeros_like(tensor.data)
                state.v[key] = np.zeros_like(tensor.data)
            m = state.m[key]
            v = state.v[key]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            tensor.data = tensor.data - tensor.data.dtype.type(lr) * update.astype(tensor.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    groups: dict[str, ParamGroup]
    metadata: dict

    def require_groups(self, names) -> None:
        missing = [n for n in names if n not in self.groups]
        if missing:
            raise CheckpointError(f"checkpoint is missing groups: {missing}")


def checkpoint_from_groups(groups: dict[str, ParamGroup], metadata: dict) -> Checkpoint:
    copied = {name: g.copy() for name, g in groups.items()}
    return Checkpoint(version=CHECKPOINT_VERSION, groups=copied, metadata=dict(metadata))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic + length-prefixed JSON manifest + little-endian float payload."""
    manifest_groups = []
    payload = bytearray()
    for group_name in sorted(ckpt.groups):
        group = ckpt.groups[group_name]
        tensors = []
        for tensor_name, tensor in group.tensors.items():
            raw = np.ascontiguousarray(tensor.data.astype("<f4", copy=False)).tobytes()
            tensors.append({
                "name": tensor_name,
                "shape": list(tensor.shape),
                "dtype": "<f4",
                "offset": len(payload),
                "nbytes": len(raw),
            })
            payload.extend(raw)
        manifest_groups.append({"name": group_name, "trainable": group.trainable, "tensors": tensors})
    manifest = {
        "version": ckpt.version,
        "metadata": ckpt.metadata,
        "groups": manifest_groups,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    groups = {}
    for g in manifest["groups"]:
        group = ParamGroup(g["name"], trainable=bool(g["trainable"]))
        for t in g["tensors"]:
            raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
            arr = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).astype(np.float32)
            group.add(t["name"], Tensor(arr.copy(), requires_grad=group.trainable))
        groups[g["name"]] = group
    return Checkpoint(version=manifest["version"], groups=groups, metadata=manifest["metadata"])


@dataclass
class FreezeReport:
    ok: bool
    per_group: dict[str, bool]


def freeze_check(before: Checkpoint, after: Checkpoint, group_names) -> FreezeReport:
    """True iff every tensor in the named groups is byte-identical across checkpoints."""
    per_group = {}
    for name in group_names:
        if name not in before.groups or name not in after.groups:
            raise CheckpointError(f"group {name!r} missing from one of the checkpoints")
        ga, gb = before.groups[name], after.groups[name]
        same = set(ga.tensors) == set(gb.tensors)
        if same:
            for key in ga.tensors:
                ta, tb = ga.tensors[key].data, gb.tensors[key].data
                if ta.shape != tb.shape or ta.astype("<f4").tobytes() != tb.astype("<f4").tobytes():
                    same = False
                    break
        per_group[name] = same
    return FreezeReport(ok=all(per_group.values()), per_group=per_group)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay_epoch is not None and epoch >= cfg.lr_decay_epoch:
        return cfg.lr * cfg.lr_decay
    return cfg.lr


def _step(scn: sim.Scene, ego_id: int, participants, groups, sys_cfg: SystemConfig, cache) -> tuple[float, dict]:
    with Tape() as tape:
        feats = ego_aligned_features(scn, ego_id, participants, groups, sys_cfg, cache)
        head_out, trace = fuse_and_head(feats, groups, sys_cfg)
        targets = build_step_targets(scn, ego_id, participants, sys_cfg)
        loss = total_loss(head_out, trace, targets, sys_cfg.loss)
    value = loss.item()
    grads = backward(loss, tape)
    return value, grads


def _validation_loss(scenes, groups, sys_cfg: SystemConfig, participants_fn, cache) -> float:
    total = 0.0
    for scn in scenes:
        ego_id, participants = participants_fn(scn)
        feats = ego_aligned_features(scn, ego_id, participants, groups, sys_cfg, cache)
        head_out, trace = fuse_and_head(feats, groups, sys_cfg)
        targets = build_step_targets(scn, ego_id, participants, sys_cfg)
        total += total_loss(head_out, trace, targets, sys_cfg.loss).item()
    return total / max(1, len(scenes))


def _run_epochs(train_scenes, val_scenes, groups, sys_cfg, cfg: TrainConfig,
                pick_step, participants_fn, phase: str, metadata: dict) -> Checkpoint:
    """Shared epoch loop: per-step sampling, Adam, early stop on val plateau."""
    if not train_scenes:
        raise ContractError("training requires at least one scene")
    rng = np.random.default_rng(derive_seed(cfg.seed, 0x7A1 if phase == "base" else 0x7A2))
    state = OptimizerState()
    cache: dict = {}
    best_val = np.inf
    best_snapshot: Checkpoint | None = None
    epochs_without_improvement = 0
    history: list[dict] = []
    last_good = checkpoint_from_groups(groups, {**metadata, "epoch": 0})

    for epoch in range(1, cfg.epochs + 1):
        lr = _lr_at(cfg, epoch)
        order = rng.permutation(len(train_scenes))
        epoch_loss = 0.0
        for idx in order:
            scn = train_scenes[int(idx)]
            ego_id, participants = pick_step(scn, rng)
            value, grads = _step(scn, ego_id, participants, groups, sys_cfg, cache)
            if not np.isfinite(value):
                err = TrainingError(f"{phase} training diverged at epoch {epoch} (non-finite loss)")
                err.last_good_checkpoint = last_good
                raise err
            optimizer_step(groups, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            epoch_loss += value
        epoch_loss /= len(train_scenes)

        val_loss = _validation_loss(val_scenes, groups, sys_cfg, participants_fn, cache) \
            if val_scenes else epoch_loss
        history.append({"epoch": epoch, "train_loss": epoch_loss, "val_loss": val_loss, "lr": lr})
        logger.info("%s epoch %d: train %.4f val %.4f (lr %.2e)", phase, epoch, epoch_loss, val_loss, lr)

        last_good = checkpoint_from_groups(groups, {**metadata, "epoch": epoch})
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            best_snapshot = last_good
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience:
                logger.info("%s: early stop after epoch %d", phase, epoch)
                break

    final = best_snapshot if best_snapshot is not None else last_good
    final.metadata = {**final.metadata, "history": history, "stopped_epoch": history[-1]["epoch"]}
    return final


def train_collab_base(train_scenes, val_scenes, sys_cfg: SystemConfig, cfg: TrainConfig) -> Checkpoint:
    """Phase 1: collective end-to-end training of the homogeneous collaboration base.

    Every step picks a scene, draws a random ego among the agents, treats all
    agents as the base type, warps their features into the ego frame, fuses,
    and supervises detection plus per-scale foreground maps.
    """
    groups = init_base_groups(sys_cfg, cfg.seed)

    def pick_step(scn, rng):
        # random ego and a random participant subset around it, so the fusion
        # stack sees every collaboration size from 1 to N during training
        ids = [a.agent_id for a in scn.agents]
        ego = ids[int(rng.integers(0, len(ids)))]
        others = np.array([i for i in ids if i != ego])
        rng.shuffle(others)
        size = int(rng.integers(1, len(ids) + 1))
        chosen = sorted([ego, *others[:size - 1].tolist()])
        return ego, [(i, sys_cfg.base_type) for i in chosen]

    def participants_fn(scn):
        ego = min(a.agent_id for a in scn.agents)
        return ego, [(a.agent_id, sys_cfg.base_type) for a in scn.agents]

    metadata = {"phase": "base", "seed": cfg.seed, "base_type": sys_cfg.base_type}
    return _run_epochs(train_scenes, val_scenes, groups, sys_cfg, cfg,
                       pick_step, participants_fn, "base", metadata)


def train_new_agent_type(train_scenes, base_ckpt: Checkpoint, new_type: AgentTypeSpec,
                         sys_cfg: SystemConfig, cfg: TrainConfig,
                         val_scenes=(), freeze_backend: bool = True) -> Checkpoint:
    """Phase 2: align a new agent type's encoder to the frozen fusion back-end.

    Each step uses exactly one agent's observation with no warping and no
    multi-agent fusion. Only the fresh encoder is trainable; the pyramid and
    head are loaded frozen and returned untouched. ``freeze_backend=False``
    trains a throwaway unfrozen copy of the back-end instead (ablation only);
    the returned checkpoint then carries the trained encoder with the
    original back-end.
    """
    base_ckpt.require_groups(["pyramid", "head"])
    enc_seed = int(derive_seed(cfg.seed, 0xA11).generate_state(1)[0])
    enc = init_encoder_params(new_type, sys_cfg.msg, seed=enc_seed)
    enc.set_trainable(True)

    backend = {name: base_ckpt.groups[name].copy(trainable=not freeze_backend)
               for name in ("pyramid", "head")}
    for g in backend.values():
        g.set_trainable(not freeze_backend)
    groups = {enc.name: enc, **backend}

    def pick_step(scn, rng):
        agent = scn.agents[int(rng.integers(0, len(scn.agents)))].agent_id
        return agent, [(agent, new_type.type_id)]

    def participants_fn(scn):
        agent = min(a.agent_id for a in scn.agents)
        return agent, [(agent, new_type.type_id)]

    metadata = {"phase": "align", "seed": cfg.seed, "new_type": new_type.type_id,
                "backend_frozen": freeze_backend}
    result = _run_epochs(train_scenes, val_scenes, groups, sys_cfg, cfg,
                         pick_step, participants_fn, "align", metadata)

    out_groups = dict(base_ckpt.groups)
    out_groups[enc.name] = result.groups[enc.name]
    if freeze_backend:
        # the trained snapshot's backend is byte-identical to base by construction;
        # reuse the base tensors so the contract is structural, not incidental
        out_groups["pyramid"] = base_ckpt.groups["pyramid"]
        out_groups["head"] = base_ckpt.groups["head"]
    merged = checkpoint_from_groups(out_groups, result.metadata)
    # only the new encoder was trainable in this phase
    for name, group in merged.groups.items():
        group.set_trainable(name == enc.name)
    return merged
