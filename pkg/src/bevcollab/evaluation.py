"""Average precision, the sequential type-integration experiment, and reports.

AP pools detections across frames, greedily matches them to unmatched ground
truth at a rotated-box IoU threshold, and integrates the precision-recall
curve with all-point interpolation. The integration experiment trains the
collaboration base, aligns each new agent type in order, and evaluates the
growing agent union against no-fusion and late-fusion baselines, tracking the
cumulative trainable-parameter ledger of alignment versus full retraining.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import scene as sim
from .detection import DetectionSet
from .encoders import encoder_group_name
from .errors import EvaluationError, ParameterError
from .geometry import OrientedBox, oriented_iou
from .runtime import (
    AutoencoderParams,
    build_message,
    collaborate_infer,
    late_fusion,
    single_agent_detect,
    train_autoencoder,
)
from .system import SystemConfig, evaluation_ground_truth
from .training import Checkpoint, TrainConfig, train_collab_base, train_new_agent_type

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
METHOD_NO_FUSION = "no_fusion"
METHOD_LATE = "late_fusion"
METHOD_INTERMEDIATE = "intermediate"


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def average_precision(dets_per_frame: list[DetectionSet], gts_per_frame: list[list[OrientedBox]],
                      iou_thresh: float) -> float | None:
    """All-point-interpolated AP at one IoU threshold; None when no ground truth exists."""
    if not 0.0 < iou_thresh < 1.0:
        raise ParameterError(f"iou threshold must lie in (0, 1), got {iou_thresh}")
    if len(dets_per_frame) != len(gts_per_frame):
        raise ParameterError("detections and ground truth must cover the same frames")

    total_gt = sum(len(g) for g in gts_per_frame)
    if total_gt == 0:
        return None

    pooled = []
    for frame_idx, det in enumerate(dets_per_frame):
        for det_idx, box in enumerate(det.boxes):
            pooled.append((-box.confidence, frame_idx, det_idx, box))
    pooled.sort(key=lambda item: item[:3])

    matched = [np.zeros(len(g), dtype=bool) for g in gts_per_frame]
    tp = np.zeros(len(pooled))
    for rank, (_, frame_idx, _, box) in enumerate(pooled):
        gts = gts_per_frame[frame_idx]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[frame_idx][j]:
                continue
            iou = oriented_iou(box, gt)
            if iou >= iou_thresh and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[frame_idx][best_j] = True
            tp[rank] = 1.0

    if len(pooled) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(pooled) + 1)
    recall = cum_tp / total_gt

    # area under the PR curve with precision replaced by its running max from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(interp, recall):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


# ---------------------------------------------------------------------------
# per-configuration evaluation
# ---------------------------------------------------------------------------

def _filter_to_window(det: DetectionSet, sys_cfg: SystemConfig) -> DetectionSet:
    hx, hy = sys_cfg.msg.extent_x / 2.0, sys_cfg.msg.extent_y / 2.0
    boxes = [b for b in det.boxes if abs(b.cx) <= hx and abs(b.cy) <= hy]
    return DetectionSet(boxes=boxes, frame=det.frame)


def stage_participants(scn: sim.Scene, base_type: str, new_types: list[str]) -> list[tuple[int, str]]:
    """Assign types to agent slots: slot 0 is the base ego, later slots the new types in order."""
    agents = sorted(scn.agents, key=lambda a: a.agent_id)
    assignment = [(agents[0].agent_id, base_type)]
    for k, type_id in enumerate(new_types):
        if k + 1 >= len(agents):
            break
        assignment.append((agents[k + 1].agent_id, type_id))
    return assignment


def evaluate_methods(scenes, ckpt: Checkpoint, sys_cfg: SystemConfig,
                     participants_fn, methods=(METHOD_NO_FUSION, METHOD_LATE, METHOD_INTERMEDIATE),
                     noise_base: sim.NoiseConfig | None = None,
                     compress: AutoencoderParams | None = None,
                     iou_thresholds=(0.5, 0.7), cache: dict | None = None) -> dict:
    """AP per method over a scene list; the ego is the lowest agent id per scene.

    When ``compress`` is given, every sender packs its feature through the
    autoencoder and the receiver decompresses before fusing.
    """
    cache = {} if cache is None else cache
    aes = {compress.ratio: compress} if compress is not None else None
    per_method_dets: dict[str, list[DetectionSet]] = {m: [] for m in methods}
    gts: list[list[OrientedBox]] = []
    skipped: list[str] = []

    for scene_idx, scn in enumerate(scenes):
        participants = participants_fn(scn)
        ego_id = participants[0][0]
        gts.append(evaluation_ground_truth(scn, ego_id, sys_cfg))

        single = {}
        if METHOD_NO_FUSION in methods or METHOD_LATE in methods:
            for agent_id, type_id in participants:
                single[agent_id] = single_agent_detect(scn, agent_id, type_id, ckpt, sys_cfg, cache)

        if METHOD_NO_FUSION in methods:
            per_method_dets[METHOD_NO_FUSION].append(_filter_to_window(single[ego_id], sys_cfg))

        if METHOD_LATE in methods:
            fused = late_fusion(
                [(single[a], scn.agent(a).pose) for a, _ in participants], ego_id, sys_cfg.nms_iou)
            per_method_dets[METHOD_LATE].append(_filter_to_window(fused, sys_cfg))

        if METHOD_INTERMEDIATE in methods:
            messages = [build_message(scn, a, t, ckpt, sys_cfg, ae=compress, cache=cache)
                        for a, t in participants]
            noise = None
            if noise_base is not None and (noise_base.sigma_p > 0 or noise_base.sigma_r > 0):
                noise = sim.NoiseConfig(noise_base.sigma_p, noise_base.sigma_r,
                                        seed=noise_base.seed + scene_idx)
            det = collaborate_infer(ego_id, messages, ckpt, sys_cfg, noise=noise,
                                    aes=aes, skipped_out=skipped)
            per_method_dets[METHOD_INTERMEDIATE].append(_filter_to_window(det, sys_cfg))

    out = {"skipped_types": sorted(set(skipped))}
    for method in methods:
        out[method] = {
            f"ap{int(t * 100)}": average_precision(per_method_dets[method], gts, t)
            for t in iou_thresholds
        }
    return out


# ---------------------------------------------------------------------------
# analytic compute estimate
# ---------------------------------------------------------------------------

def estimate_forward_macs(sys_cfg: SystemConfig, type_id: str) -> int:
    """Multiply-accumulate count for one agent's encode pass plus its share of fusion."""
    spec = sys_cfg.type_spec(type_id)
    h, w = sys_cfg.msg.height, sys_cfg.msg.width
    macs = 0
    widths = [sim.OBS_CHANNELS, *spec.channels, sys_cfg.msg.channels]
    for i, k in enumerate(spec.kernels):
        macs += widths[i] * widths[i + 1] * k * k * h * w
    sh, sw = h, w
    in_ch = sys_cfg.msg.channels
    for dim, blocks in zip(sys_cfg.pyramid.dims, sys_cfg.pyramid.blocks):
        sh, sw = sh // 2, sw // 2
        for b in range(blocks):
            c_in = in_ch if b == 0 else dim
            macs += (c_in * dim * 9 + dim * dim * 9) * sh * sw
            if b == 0:
                macs += c_in * dim * sh * sw
        macs += dim * 1 * sh * sw
        in_ch = dim
    return macs


# ---------------------------------------------------------------------------
# integration experiment
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    metadata: dict
    stages: list[dict] = field(default_factory=list)
    homogeneous_pair: dict = field(default_factory=dict)
    ledger: list[dict] = field(default_factory=list)
    pose_sweep: list[dict] = field(default_factory=list)
    compression_sweep: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "metadata": self.metadata,
            "stages": self.stages,
            "homogeneous_pair": self.homogeneous_pair,
            "ledger": self.ledger,
            "pose_sweep": self.pose_sweep,
            "compression_sweep": self.compression_sweep,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(metadata=d["metadata"], stages=d["stages"],
                          homogeneous_pair=d.get("homogeneous_pair", {}),
                          ledger=d["ledger"], pose_sweep=d["pose_sweep"],
                          compression_sweep=d["compression_sweep"])


def build_ledger(base_ckpt: Checkpoint, stage_ckpts: list[Checkpoint], new_types: list[str],
                 sys_cfg: SystemConfig) -> list[dict]:
    """Cumulative trainable parameters: encoder-only alignment versus full retraining."""
    backend = base_ckpt.groups["pyramid"].scalar_count() + base_ckpt.groups["head"].scalar_count()
    base_type = sys_cfg.base_type
    encoder_sizes = {base_type: base_ckpt.groups[encoder_group_name(base_type)].scalar_count()}

    rows = []
    heal_cum = 0
    retrain_cum = 0
    for stage, (ckpt, type_id) in enumerate(zip(stage_ckpts, new_types), start=1):
        enc = ckpt.groups[encoder_group_name(type_id)]
        encoder_sizes[type_id] = enc.scalar_count()
        heal_new = enc.scalar_count()
        retrain_stage = backend + sum(encoder_sizes.values())
        heal_cum += heal_new
        retrain_cum += retrain_stage
        rows.append({
            "stage": stage,
            "new_type": type_id,
            "heal_new_params": heal_new,
            "heal_cumulative": heal_cum,
            "retrain_stage_params": retrain_stage,
            "retrain_cumulative": retrain_cum,
            "reduction_percent": 100.0 * (1.0 - heal_cum / retrain_cum),
        })
    return rows


def run_integration_experiment(train_scenes, val_scenes, test_scenes,
                               sys_cfg: SystemConfig, base_train: TrainConfig,
                               align_train: TrainConfig, new_types: list[str],
                               metadata: dict | None = None,
                               pose_sigmas: list[float] = (),
                               compression_ratios: list[int] = (),
                               ae_steps: int = 1500,
                               base_ckpt: Checkpoint | None = None,
                               out_dir: str | None = None) -> tuple[EvalReport, Checkpoint]:
    """Train the base, integrate each new type by encoder-only alignment, evaluate stages.

    Returns the report and the final checkpoint (base plus every aligned encoder).
    """
    report = EvalReport(metadata={
        "code_version": __version__,
        "seed": base_train.seed,
        "ap_interpolation": "all-point",
        "new_types": list(new_types),
        "base_type": sys_cfg.base_type,
        **(metadata or {}),
    })
    cache: dict = {}

    if base_ckpt is None:
        logger.info("training collaboration base (%d scenes)", len(train_scenes))
        base_ckpt = train_collab_base(train_scenes, val_scenes, sys_cfg, base_train)
    base_ckpt.metadata.setdefault("base_type", sys_cfg.base_type)

    # homogeneous two-agent collaboration versus single agent, on the base system
    pair_fn = lambda scn: stage_participants(scn, sys_cfg.base_type, [sys_cfg.base_type])
    report.homogeneous_pair = evaluate_methods(
        test_scenes, base_ckpt, sys_cfg, pair_fn, cache=cache)

    # stage 0: ego alone
    stage0 = evaluate_methods(test_scenes, base_ckpt, sys_cfg,
                              lambda scn: stage_participants(scn, sys_cfg.base_type, []),
                              cache=cache)
    msg_bytes = sys_cfg.msg.channels * sys_cfg.msg.height * sys_cfg.msg.width * 4
    report.stages.append({"stage": 0, "participant_types": [sys_cfg.base_type],
                          "message_payload_bytes": msg_bytes, **stage0})

    ckpt = base_ckpt
    stage_ckpts = []
    for stage, type_id in enumerate(new_types, start=1):
        logger.info("aligning new agent type %r (stage %d)", type_id, stage)
        spec = sys_cfg.type_spec(type_id)
        align_cfg = TrainConfig(**{**align_train.__dict__, "seed": align_train.seed + stage})
        ckpt = train_new_agent_type(train_scenes, ckpt, spec, sys_cfg, align_cfg,
                                    val_scenes=val_scenes)
        stage_ckpts.append(ckpt)
        types_so_far = list(new_types[:stage])
        stage_eval = evaluate_methods(
            test_scenes, ckpt, sys_cfg,
            lambda scn, t=types_so_far: stage_participants(scn, sys_cfg.base_type, t),
            cache=cache)
        report.stages.append({"stage": stage,
                              "participant_types": [sys_cfg.base_type, *types_so_far],
                              "message_payload_bytes": msg_bytes, **stage_eval})

    report.ledger = build_ledger(base_ckpt, stage_ckpts, list(new_types), sys_cfg)
    report.metadata["forward_macs"] = {
        t: estimate_forward_macs(sys_cfg, t) for t in [sys_cfg.base_type, *new_types]}

    all_types = list(new_types)
    final_fn = lambda scn: stage_participants(scn, sys_cfg.base_type, all_types)

    for sigma in pose_sigmas:
        sigma_r = math.radians(sigma)  # degrees-equivalent yaw noise
        noise = sim.NoiseConfig(sigma_p=sigma, sigma_r=sigma_r, seed=base_train.seed + 9000)
        res = evaluate_methods(test_scenes, ckpt, sys_cfg, final_fn,
                               methods=(METHOD_NO_FUSION, METHOD_LATE, METHOD_INTERMEDIATE),
                               noise_base=noise, cache=cache)
        for method in (METHOD_NO_FUSION, METHOD_LATE, METHOD_INTERMEDIATE):
            report.pose_sweep.append({"sigma_p_m": sigma, "sigma_r_rad": sigma_r,
                                      "method": method, **res[method]})

    for ratio in compression_ratios:
        ae, log = train_autoencoder(ckpt, train_scenes[:min(40, len(train_scenes))], ratio,
                                    sys_cfg, steps=ae_steps, seed=base_train.seed + 500 + ratio,
                                    type_ids=(sys_cfg.base_type, *all_types))
        res = evaluate_methods(test_scenes, ckpt, sys_cfg, final_fn,
                               methods=(METHOD_INTERMEDIATE,), cache=cache,
                               compress=ae if ratio > 1 else None)
        payload = msg_bytes // ratio
        decreased = (np.mean(log.losses[-10:]) < np.mean(log.losses[:10])) if len(log.losses) >= 20 else True
        report.compression_sweep.append({
            "ratio": ratio,
            "payload_bytes": payload,
            "holdout_mse": log.holdout_mse,
            "loss_decreased": bool(decreased),
            **res[METHOD_INTERMEDIATE],
        })

    if out_dir is not None:
        emit_report(report, out_dir)
        dump_sample_trace(test_scenes[0], ckpt, sys_cfg, final_fn, out_dir)
    return report, ckpt


def dump_sample_trace(scn, ckpt: Checkpoint, sys_cfg: SystemConfig, participants_fn, out_dir) -> list[str]:
    """Render per-scale fusion weights and fused energy for one scene."""
    from .pyramid import dump_trace_images, fuse
    from .system import ego_aligned_features

    participants = participants_fn(scn)
    ego_id = participants[0][0]
    feats = ego_aligned_features(scn, ego_id, participants, ckpt.groups, sys_cfg)
    _, trace = fuse(feats, sys_cfg.pyramid, ckpt.groups["pyramid"], sys_cfg.msg)
    return dump_trace_images(trace, out_dir, prefix="fusion_trace")


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _provenance_line(metadata: dict) -> str:
    return (f"# config_hash={metadata.get('config_hash', 'none')} "
            f"seed={metadata.get('seed', 'none')} code_version={metadata.get('code_version', 'none')}")


def _write_csv(path: str, metadata: dict, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    buf.write(_provenance_line(metadata) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _ap_cell(entry: dict, key: str):
    value = entry.get(key)
    return None if value is None else round(float(value), 6)


def emit_report(report: EvalReport, out_dir) -> list[str]:
    """Write the raw JSON report, CSV tables, and figure files."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "report.json")
    try:
        with open(path, "w") as fh:
            fh.write(report.to_json())
    except OSError as exc:
        raise EvaluationError(f"cannot write report to {path}: {exc}") from exc
    written.append(path)

    meta = report.metadata
    rows = []
    for stage in report.stages:
        for method in (METHOD_NO_FUSION, METHOD_LATE, METHOD_INTERMEDIATE):
            if method not in stage:
                continue
            rows.append([stage["stage"], "+".join(stage["participant_types"]), method,
                         _ap_cell(stage[method], "ap50"), _ap_cell(stage[method], "ap70")])
    path = os.path.join(out_dir, "stage_ap.csv")
    _write_csv(path, meta, ["stage", "participant_types", "method", "ap50", "ap70"], rows)
    written.append(path)

    path = os.path.join(out_dir, "ledger.csv")
    _write_csv(path, meta,
               ["stage", "new_type", "heal_new_params", "heal_cumulative",
                "retrain_stage_params", "retrain_cumulative", "reduction_percent"],
               [[r["stage"], r["new_type"], r["heal_new_params"], r["heal_cumulative"],
                 r["retrain_stage_params"], r["retrain_cumulative"],
                 round(r["reduction_percent"], 3)] for r in report.ledger])
    written.append(path)

    path = os.path.join(out_dir, "pose_sweep.csv")
    _write_csv(path, meta, ["sigma_p_m", "sigma_r_rad", "method", "ap50", "ap70"],
               [[r["sigma_p_m"], round(r["sigma_r_rad"], 9), r["method"],
                 _ap_cell(r, "ap50"), _ap_cell(r, "ap70")] for r in report.pose_sweep])
    written.append(path)

    path = os.path.join(out_dir, "compression_sweep.csv")
    _write_csv(path, meta, ["ratio", "payload_bytes", "holdout_mse", "loss_decreased", "ap50", "ap70"],
               [[r["ratio"], r["payload_bytes"], f"{r['holdout_mse']:.8f}", r["loss_decreased"],
                 _ap_cell(r, "ap50"), _ap_cell(r, "ap70")] for r in report.compression_sweep])
    written.append(path)

    written.extend(_emit_figures(report, out_dir))
    return written


def _emit_figures(report: EvalReport, out_dir) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if report.pose_sweep:
        sigmas = sorted({r["sigma_p_m"] for r in report.pose_sweep})
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method, marker in ((METHOD_INTERMEDIATE, "o"), (METHOD_LATE, "s"), (METHOD_NO_FUSION, "^")):
            ys = [next((r.get("ap50") for r in report.pose_sweep
                        if r["method"] == method and r["sigma_p_m"] == s), None) for s in sigmas]
            if any(y is not None for y in ys):
                ax.plot(sigmas, [float("nan") if y is None else y for y in ys],
                        marker=marker, label=method.replace("_", " "))
        ax.set_xlabel("pose noise sigma (m; yaw deg-equivalent)")
        ax.set_ylabel("AP@0.5")
        ax.set_xticks(sigmas)
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = os.path.join(out_dir, "ap_vs_pose_noise.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if report.compression_sweep:
        ratios = [r["ratio"] for r in report.compression_sweep]
        aps = [r.get("ap50") for r in report.compression_sweep]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(ratios, [float("nan") if a is None else a for a in aps], marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xticks(ratios)
        ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
        ax.set_xlabel("channel compression ratio")
        ax.set_ylabel("AP@0.5")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = os.path.join(out_dir, "ap_vs_compression.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
