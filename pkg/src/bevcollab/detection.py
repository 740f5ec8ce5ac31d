"""Detection head, target assignment, training losses, and box decoding.

The head is a 1x1 convolution over the fused feature emitting one
classification channel and six regression channels per cell:
(dx, dy) offsets from the cell center in cell units, log length and width
in meters, and the (sin, cos) pair of the box yaw.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    clamp,
    const_minus,
    conv2d,
    huber,
    log,
    mul,
    mul_const,
    neg,
    pow_const,
    sigmoid,
    slice_channels,
    tensor_mean,
    tensor_sum,
)
from .errors import ContractError, ParameterError
from .geometry import GridSpec, OrientedBox, footprint_mask, normalize_angle, oriented_iou
from .params import ParamGroup, init_bias, init_conv
from .pyramid import FusionTrace

HEAD_GROUP = "head"
HEAD_CHANNELS = 7  # 1 classification + 6 regression
_PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alphas: tuple[float, ...] = (0.4, 0.2, 0.1)  # per-scale foreground supervision weights
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 2.0

    def __post_init__(self):
        if any(a < 0 for a in self.alphas):
            raise ParameterError(f"foreground weights must be non-negative, got {self.alphas}")


@dataclass
class TargetMaps:
    """Supervision rasters for one training step.

    ``fg_masks[l]`` is an (N, h_l, w_l) binary stack, one slice per agent.
    Regression targets are zero-filled where ``reg_valid`` is 0.
    """

    fg_masks: list[np.ndarray]
    cls_mask: np.ndarray  # (h, w) binary at head scale
    reg_targets: np.ndarray  # (6, h, w)
    reg_valid: np.ndarray  # (h, w) binary


@dataclass
class DetectionSet:
    boxes: list[OrientedBox]
    frame: int | str

    def to_dict(self) -> dict:
        return {
            "frame": self.frame,
            "boxes": [
                {"cx": b.cx, "cy": b.cy, "length": b.length, "width": b.width,
                 "yaw": b.yaw, "confidence": b.confidence}
                for b in self.boxes
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "DetectionSet":
        boxes = [OrientedBox(b["cx"], b["cy"], b["length"], b["width"], b["yaw"], b["confidence"])
                 for b in d["boxes"]]
        return DetectionSet(boxes=boxes, frame=d["frame"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def init_head_params(in_channels: int, seed: int) -> ParamGroup:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4EAD]))
    group = ParamGroup(HEAD_GROUP)
    group.add("conv.weight", init_conv(rng, HEAD_CHANNELS, in_channels, 1))
    group.add("conv.bias", init_bias(rng, HEAD_CHANNELS, in_channels))
    return group


def head_forward(fused: Tensor, params: ParamGroup) -> Tensor:
    out = conv2d(fused, params["conv.weight"], stride=1, padding=0)
    return add(out, params["conv.bias"])


# ---------------------------------------------------------------------------
# target construction
# ---------------------------------------------------------------------------

def _maxpool_binary(mask: np.ndarray, factor: int) -> np.ndarray:
    h, w = mask.shape
    if h % factor or w % factor:
        raise ParameterError(f"mask {h}x{w} not divisible by pooling factor {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def _dilate3(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    for dr in range(3):
        for dc in range(3):
            out |= padded[dr:dr + mask.shape[0], dc:dc + mask.shape[1]]
    return out


def assign_targets(boxes: list[OrientedBox], grid: GridSpec, levels: int) -> TargetMaps:
    """Build supervision maps for one box set on the head-scale grid.

    The scale-1 foreground mask marks cells whose centers lie inside a box
    footprint; coarser scales are max-pooled versions. The classification
    mask marks box-center cells dilated by one; those cells carry regression
    targets toward their nearest box.
    """
    fg1 = footprint_mask(grid, boxes)
    fg_masks = [fg1[None].astype(np.float32)]
    for level in range(2, levels + 1):
        fg_masks.append(_maxpool_binary(fg1, 2 ** (level - 1))[None].astype(np.float32))

    cls_centers = np.zeros((grid.height, grid.width), dtype=bool)
    xs, ys = grid.cell_centers()
    in_grid_boxes = []
    for b in boxes:
        col = int(math.floor((b.cx + grid.extent_x / 2.0) / grid.cell_x))
        row = int(math.floor((b.cy + grid.extent_y / 2.0) / grid.cell_y))
        if 0 <= row < grid.height and 0 <= col < grid.width:
            cls_centers[row, col] = True
            in_grid_boxes.append(b)
    cls_mask = _dilate3(cls_centers)

    reg = np.zeros((6, grid.height, grid.width), dtype=np.float32)
    if in_grid_boxes:
        centers = np.array([[b.cx, b.cy] for b in in_grid_boxes])
        rows, cols = np.nonzero(cls_mask)
        for r, c in zip(rows, cols):
            cell = np.array([xs[r, c], ys[r, c]])
            b = in_grid_boxes[int(np.argmin(((centers - cell) ** 2).sum(axis=1)))]
            reg[0, r, c] = (b.cx - cell[0]) / grid.cell_x
            reg[1, r, c] = (b.cy - cell[1]) / grid.cell_y
            reg[2, r, c] = math.log(b.length)
            reg[3, r, c] = math.log(b.width)
            # doubled angle: a rectangle is identical under yaw + pi, so only
            # yaw mod pi is observable; (sin 2y, cos 2y) makes targets consistent
            reg[4, r, c] = math.sin(2.0 * b.yaw)
            reg[5, r, c] = math.cos(2.0 * b.yaw)

    return TargetMaps(
        fg_masks=fg_masks,
        cls_mask=cls_mask.astype(np.float32),
        reg_targets=reg,
        reg_valid=cls_mask.astype(np.float32),
    )


def stack_agent_targets(per_agent: list[TargetMaps], head: TargetMaps) -> TargetMaps:
    """Combine per-agent foreground masks with shared head-scale targets."""
    levels = len(head.fg_masks)
    fg = [np.concatenate([t.fg_masks[level] for t in per_agent], axis=0) for level in range(levels)]
    return TargetMaps(fg_masks=fg, cls_mask=head.cls_mask,
                      reg_targets=head.reg_targets, reg_valid=head.reg_valid)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Alpha-balanced focal penalty, averaged over all cells."""
    target = np.asarray(target)
    if logits.shape != target.shape:
        raise ParameterError(f"focal_loss shapes differ: logits {logits.shape} vs target {target.shape}")
    t = target.astype(logits.dtype)
    p = clamp(sigmoid(logits), _PROB_EPS, 1.0 - _PROB_EPS)
    one_m_p = const_minus(1.0, p)
    pos_term = neg(mul(pow_const(one_m_p, gamma), log(p)))
    neg_term = neg(mul(pow_const(p, gamma), log(one_m_p)))
    w_pos = Tensor((alpha * t).astype(logits.dtype))
    w_neg = Tensor(((1.0 - alpha) * (1.0 - t)).astype(logits.dtype))
    return tensor_mean(add(mul(pos_term, w_pos), mul(neg_term, w_neg)))


def smooth_l1(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean unit-huber error over valid cells; zero when nothing is valid."""
    target = np.asarray(target)
    valid = np.asarray(valid)
    if pred.shape != target.shape:
        raise ParameterError(f"smooth_l1 shapes differ: pred {pred.shape} vs target {target.shape}")
    mask = np.broadcast_to(valid.astype(pred.dtype), pred.shape)
    n_valid = float(mask.sum())
    if n_valid == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    safe_target = np.where(mask > 0, target, 0.0).astype(pred.dtype)
    err = mul(add(pred, Tensor(-safe_target)), Tensor(mask))
    return mul_const(tensor_sum(huber(err)), 1.0 / n_valid)


def total_loss(head_out: Tensor, trace: FusionTrace | None, targets: TargetMaps, cfg: LossConfig) -> Tensor:
    """Detection supervision plus per-scale, per-agent foreground supervision."""
    cls_logits = slice_channels(head_out, 0, 1)
    reg_pred = slice_channels(head_out, 1, HEAD_CHANNELS)
    loss = focal_loss(cls_logits, targets.cls_mask[None], cfg.focal_alpha, cfg.focal_gamma)
    loss = add(loss, mul_const(smooth_l1(reg_pred, targets.reg_targets, targets.reg_valid), cfg.reg_weight))

    if any(a > 0 for a in cfg.alphas):
        if trace is None:
            raise ContractError("foreground supervision requested but no fusion trace supplied")
        for level, alpha_l in enumerate(cfg.alphas, start=1):
            if alpha_l == 0:
                continue
            if level > len(trace.scores) or trace.scores[level - 1] is None:
                raise ContractError(f"trace is missing foreground scores at scale {level}")
            scores = trace.scores[level - 1]
            fg = targets.fg_masks[level - 1]
            if scores.shape != fg.shape:
                raise ContractError(f"scale {level}: scores {scores.shape} vs foreground target {fg.shape}")
            for j in range(scores.shape[0]):
                term = focal_loss(slice_channels(scores, j, j + 1), fg[j:j + 1],
                                  cfg.focal_alpha, cfg.focal_gamma)
                loss = add(loss, mul_const(term, alpha_l))
    return loss


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def nms(boxes: list[OrientedBox], iou_thresh: float) -> list[OrientedBox]:
    """Greedy confidence-ordered suppression of overlapping boxes."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept: list[OrientedBox] = []
    for i in order:
        if all(oriented_iou(boxes[i], k) < iou_thresh for k in kept):
            kept.append(boxes[i])
    return kept


def decode_detections(head_out, grid: GridSpec, conf_thresh: float = 0.3,
                      nms_iou: float = 0.15, frame: int | str = "ego") -> DetectionSet:
    """Turn head output into oriented boxes: threshold, decode, suppress."""
    if not (0.0 <= conf_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ParameterError(f"thresholds must lie in [0, 1], got conf={conf_thresh}, nms={nms_iou}")
    data = head_out.data if isinstance(head_out, Tensor) else np.asarray(head_out)
    if data.shape != (HEAD_CHANNELS, grid.height, grid.width):
        raise ParameterError(f"head output shape {data.shape} does not match grid "
                             f"({HEAD_CHANNELS}, {grid.height}, {grid.width})")
    data = data.astype(np.float64)
    conf = 1.0 / (1.0 + np.exp(-data[0]))
    xs, ys = grid.cell_centers()
    rows, cols = np.nonzero(conf >= conf_thresh)
    candidates = []
    for r, c in zip(rows, cols):
        dx, dy, log_l, log_w, sin_2y, cos_2y = data[1:, r, c]
        candidates.append(OrientedBox(
            cx=float(xs[r, c] + dx * grid.cell_x),
            cy=float(ys[r, c] + dy * grid.cell_y),
            length=float(np.exp(np.clip(log_l, -4.0, 4.0))),
            width=float(np.exp(np.clip(log_w, -4.0, 4.0))),
            yaw=normalize_angle(0.5 * math.atan2(sin_2y, cos_2y)),
            confidence=float(conf[r, c]),
        ))
    return DetectionSet(boxes=nms(candidates, nms_iou), frame=frame)
