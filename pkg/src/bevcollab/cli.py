"""Command-line entry point wiring configs to the pipeline.

Subcommands: gen-scenes, train-base, train-new-type, train-autoencoder,
eval, integrate, sweep, report, selftest. Exit codes: 0 on success, 1 on a
runtime failure, 2 on invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import BevCollabError, ConfigError
from .evaluation import (
    METHOD_INTERMEDIATE,
    METHOD_LATE,
    METHOD_NO_FUSION,
    EvalReport,
    emit_report,
    evaluate_methods,
    run_integration_experiment,
    stage_participants,
)
from .scene import NoiseConfig, generate_scene, load_scenes, save_scenes
from .training import (
    checkpoint_from_groups,
    load_checkpoint,
    save_checkpoint,
    train_collab_base,
    train_new_agent_type,
)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "BEVCOLLAB_OUT"


def _out_path(cfg_dir: str, *parts: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    return os.path.join(root, cfg_dir, *parts)


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed, "code_version": __version__}


def generate_splits(cfg: ExperimentConfig):
    """Deterministic train/val/test scene lists from the config seed."""
    from dataclasses import replace

    train = [generate_scene(cfg.scene_cfg, cfg.scene_seed("train", i)) for i in range(cfg.n_train)]
    val = [generate_scene(cfg.scene_cfg, cfg.scene_seed("val", i)) for i in range(cfg.n_val)]
    k = cfg.test_agent_count
    test_cfg = replace(cfg.scene_cfg, agent_count=(k, k))
    test = [generate_scene(test_cfg, cfg.scene_seed("test", i)) for i in range(cfg.n_test)]
    return train, val, test


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE", help="override a config key (repeatable)")


def _load(args) -> ExperimentConfig:
    return load_config(args.config, overrides=args.overrides)


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    cfg = _load(args)
    out_dir = args.out or _out_path(cfg.output_dir, "scenes")
    os.makedirs(out_dir, exist_ok=True)
    train, val, test = generate_splits(cfg)
    for split, scenes in (("train", train), ("val", val), ("test", test)):
        path = os.path.join(out_dir, f"scenes_{split}.json")
        save_scenes(path, scenes, metadata={**_provenance(cfg), "split": split})
        print(f"wrote {len(scenes)} scenes to {path}")
    return 0


def cmd_train_base(args) -> int:
    cfg = _load(args)
    train = load_scenes(args.scenes)
    val = load_scenes(args.val) if args.val else []
    ckpt = train_collab_base(train, val, cfg.sys_cfg, cfg.base_train)
    ckpt.metadata.update(_provenance(cfg))
    out = args.out or _out_path(cfg.output_dir, "base.ckpt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_checkpoint(ckpt, out)
    print(f"wrote base checkpoint to {out}")
    return 0


def cmd_train_new_type(args) -> int:
    cfg = _load(args)
    base = load_checkpoint(args.base_ckpt)
    spec = cfg.sys_cfg.type_spec(args.type)
    train = load_scenes(args.scenes)
    val = load_scenes(args.val) if args.val else []
    ckpt = train_new_agent_type(train, base, spec, cfg.sys_cfg, cfg.align_train, val_scenes=val)
    ckpt.metadata.update(_provenance(cfg))
    out = args.out or _out_path(cfg.output_dir, f"with_{args.type}.ckpt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_checkpoint(ckpt, out)
    print(f"wrote checkpoint with {args.type!r} encoder to {out}")
    return 0


def cmd_train_autoencoder(args) -> int:
    from .runtime import train_autoencoder

    cfg = _load(args)
    ckpt = load_checkpoint(args.ckpt)
    scenes = load_scenes(args.scenes)
    ae, log = train_autoencoder(ckpt, scenes, args.ratio, cfg.sys_cfg,
                                steps=cfg.autoencoder_steps, seed=cfg.seed)
    out = args.out or _out_path(cfg.output_dir, f"autoencoder_r{args.ratio}.ckpt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    meta = {**_provenance(cfg), "ratio": args.ratio, "holdout_mse": log.holdout_mse}
    save_checkpoint(checkpoint_from_groups({ae.group.name: ae.group}, meta), out)
    print(f"wrote ratio-{args.ratio} autoencoder to {out} (holdout MSE {log.holdout_mse:.6f})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    ckpt = load_checkpoint(args.ckpt)
    scenes = load_scenes(args.scenes)
    new_types = args.types.split(",") if args.types else cfg.integration_order
    new_types = [t for t in new_types if t]
    noise = None
    if args.sigma_p > 0 or args.sigma_r_deg > 0:
        noise = NoiseConfig(args.sigma_p, math.radians(args.sigma_r_deg), seed=cfg.seed + 9000)
    res = evaluate_methods(
        scenes, ckpt, cfg.sys_cfg,
        lambda scn: stage_participants(scn, cfg.sys_cfg.base_type, new_types),
        noise_base=noise)
    out_dir = args.out or _out_path(cfg.output_dir, "eval")
    os.makedirs(out_dir, exist_ok=True)
    payload = {"metadata": _provenance(cfg), "participants": [cfg.sys_cfg.base_type, *new_types],
               "sigma_p_m": args.sigma_p, "sigma_r_deg": args.sigma_r_deg, "results": res}
    path = os.path.join(out_dir, "eval.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    for method in (METHOD_NO_FUSION, METHOD_LATE, METHOD_INTERMEDIATE):
        print(f"{method}: " + " ".join(f"{k}={v:.4f}" if v is not None else f"{k}=n/a"
                                       for k, v in sorted(res[method].items())))
    print(f"wrote {path}")
    return 0


def cmd_integrate(args) -> int:
    cfg = _load(args)
    out_dir = args.out or _out_path(cfg.output_dir, "integration")
    os.makedirs(out_dir, exist_ok=True)
    train, val, test = generate_splits(cfg)
    scenes_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    for split, scenes in (("train", train), ("val", val), ("test", test)):
        save_scenes(os.path.join(scenes_dir, f"scenes_{split}.json"), scenes,
                    metadata={**_provenance(cfg), "split": split})
    report, ckpt = run_integration_experiment(
        train, val, test, cfg.sys_cfg, cfg.base_train, cfg.align_train,
        cfg.integration_order, metadata=_provenance(cfg),
        pose_sigmas=[] if args.no_sweeps else cfg.pose_sigmas,
        compression_ratios=[] if args.no_sweeps else cfg.compression_ratios,
        ae_steps=cfg.autoencoder_steps)
    files = emit_report(report, out_dir)
    from .evaluation import dump_sample_trace
    files += dump_sample_trace(
        test[0], ckpt, cfg.sys_cfg,
        lambda scn: stage_participants(scn, cfg.sys_cfg.base_type, cfg.integration_order),
        out_dir)
    ckpt.metadata.update(_provenance(cfg))
    ckpt_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    for f in [*files, ckpt_path]:
        print(f"wrote {f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    ckpt = load_checkpoint(args.ckpt)
    scenes = load_scenes(args.scenes)
    report, _ = run_integration_experiment(
        [], [], scenes, cfg.sys_cfg, cfg.base_train, cfg.align_train,
        [], metadata=_provenance(cfg), pose_sigmas=cfg.pose_sigmas,
        compression_ratios=[], base_ckpt=ckpt)
    out_dir = args.out or _out_path(cfg.output_dir, "sweep")
    files = emit_report(report, out_dir)
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_report(args) -> int:
    with open(args.report) as fh:
        report = EvalReport.from_dict(json.load(fh))
    files = emit_report(report, args.out)
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(verbose=True)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevcollab",
        description="heterogeneous multi-agent BEV collaborative perception, desk scale")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate train/val/test scene files")
    _add_config_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("train-base", help="phase 1: train the collaboration base")
    _add_config_args(p)
    p.add_argument("--scenes", required=True, help="training scene file")
    p.add_argument("--val", help="validation scene file")
    p.add_argument("--out", help="checkpoint output path")
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("train-new-type", help="phase 2: align a new agent type's encoder")
    _add_config_args(p)
    p.add_argument("--base-ckpt", required=True, help="checkpoint with the frozen back-end")
    p.add_argument("--type", required=True, help="agent type id to integrate")
    p.add_argument("--scenes", required=True)
    p.add_argument("--val")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train_new_type)

    p = sub.add_parser("train-autoencoder", help="fit the channel-compression autoencoder")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ratio", type=int, required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train_autoencoder)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene file")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--types", help="comma-separated new types joining the ego (default: config order)")
    p.add_argument("--sigma-p", type=float, default=0.0, help="pose noise sigma in meters")
    p.add_argument("--sigma-r-deg", type=float, default=0.0, help="yaw noise sigma in degrees")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("integrate", help="full experiment: train base, align types, evaluate, report")
    _add_config_args(p)
    p.add_argument("--out")
    p.add_argument("--no-sweeps", action="store_true", help="skip pose-noise and compression sweeps")
    p.set_defaults(fn=cmd_integrate)

    p = sub.add_parser("sweep", help="pose-noise sweep on an existing checkpoint")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="re-render CSV tables and figures from a raw report")
    p.add_argument("--report", required=True, help="path to report.json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("selftest", help="run gradient checks and invariant suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BevCollabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
