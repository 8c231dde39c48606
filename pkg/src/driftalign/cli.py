"""Command-line pipeline driver: driftalign <subcommand> [flags]."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DriftAlignError, StageError
from .globalopt import run_global
from .icp import Stage1Result
from .pointcloud import ensure_dir, read_ply, write_ply
from .spatial import set_num_threads

log = logging.getLogger("driftalign")


def _setup_logging():
    level = os.environ.get("DRIFTALIGN_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    cfg.validate()
    set_num_threads(cfg.threads)
    return cfg


def _checkpoint_to_result(ckpt: Checkpoint) -> Stage1Result:
    """Rehydrate the in-memory stage result; frames carry camera points only."""
    from dataclasses import dataclass

    frames = []
    for fid in sorted(ckpt.per_frame_cam):
        state = ckpt.states[fid]

        @dataclass
        class _SlimFrame:
            frame_id: int
            camera: object
            p_cam: np.ndarray

        frames.append(_SlimFrame(frame_id=fid, camera=state.camera, p_cam=ckpt.per_frame_cam[fid]))
    return Stage1Result(
        model=ckpt.model,
        states=ckpt.states,
        stats=ckpt.stats,
        frames=frames,
        unalignable=ckpt.unalignable,
        accept_fraction=ckpt.accept_fraction,
        accept_masks={},
    )


def cmd_synth(args) -> int:
    from .synth import SceneSpec, default_scene_spec, generate

    if args.default or args.spec is None:
        cfg = _load_config(args)
        spec = default_scene_spec(seed=cfg.seed)
    else:
        with open(args.spec) as fh:
            spec = SceneSpec.from_dict(json.load(fh))
    generate(spec, args.out_dir)
    log.info("scene written to %s", args.out_dir)
    return 0


def cmd_filter(args) -> int:
    from .pipeline import ingest_scene

    cfg = _load_config(args)
    ingested = ingest_scene(args.scene_dir, cfg)
    write_ply(ingested.unaligned_cloud, args.out_ply)
    log.info("filtered cloud (%d points) written to %s", len(ingested.unaligned_cloud), args.out_ply)
    return 0


def cmd_align(args) -> int:
    from .pipeline import align_scene

    cfg = _load_config(args)
    result = align_scene(args.scene_dir, cfg, ablate=args.ablate)
    save_checkpoint(args.out_ckpt, result, cfg, stage="align")
    log.info("stage-1 checkpoint written to %s (%d model points)", args.out_ckpt, len(result.model))
    return 0


def cmd_refine(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stage != "align":
        raise StageError(f"refine expects an 'align' checkpoint, got {ckpt.stage!r}")
    cfg = ckpt.config if args.config is None else _load_config(args)
    set_num_threads(cfg.threads)
    result = _checkpoint_to_result(ckpt)
    run_global(result.states, result.model, cfg)
    save_checkpoint(args.out_ckpt, result, cfg, stage="refine")
    log.info("stage-2 checkpoint written to %s", args.out_ckpt)
    return 0


def cmd_invert(args) -> int:
    from .pipeline import invert_deformations

    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stage not in ("align", "refine"):
        raise StageError(f"invert expects an align/refine checkpoint, got {ckpt.stage!r}")
    cfg = ckpt.config if args.config is None else _load_config(args)
    set_num_threads(cfg.threads)
    out = invert_deformations(ckpt.states, ckpt.per_frame_cam, cfg)
    Path(args.out_field).write_bytes(out.field.to_bytes())
    log.info("inverse field written to %s (final loss %.3e)", args.out_field, out.final_loss)
    return 0


def cmd_export(args) -> int:
    from .splats import export_splats, write_splat_ply

    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config if args.config is None else _load_config(args)
    splats = export_splats(
        ckpt.model.to_cloud(), cfg.splat_target_count, k=cfg.splat_knn, seed=cfg.seed
    )
    write_splat_ply(splats, args.out_ply)
    log.info("%d splats written to %s", len(splats), args.out_ply)
    return 0


def cmd_metrics(args) -> int:
    from .pipeline import compute_metrics

    source = Path(args.ckpt_or_ply)
    if source.is_dir():
        ckpt = load_checkpoint(source)
        cloud = ckpt.model.to_cloud()
        states = ckpt.states
        accept = ckpt.accept_fraction
        seed = ckpt.config.seed
    else:
        cloud = read_ply(source)
        states, accept, seed = None, None, 0
    report = compute_metrics(cloud, args.gt_dir, states=states, accept_fraction=accept, seed=seed)
    with open(args.report_json, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    log.info("metrics written to %s", args.report_json)
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline
    from .splats import write_splat_ply

    cfg = _load_config(args)
    out_dir = ensure_dir(args.out_dir)
    t0 = time.time()
    result = run_pipeline(args.scene_dir, cfg, ablate=args.ablate)
    wall = time.time() - t0

    stage = "align" if not result.refined else "refine"
    save_checkpoint(out_dir / "checkpoint", result.stage1, cfg, stage=stage)
    write_ply(result.stage1.model.to_cloud(), out_dir / "canonical.ply")
    if result.splats is not None:
        write_splat_ply(result.splats, out_dir / "splats.ply")
    if result.inverse is not None:
        (out_dir / "inverse.field").write_bytes(result.inverse.field.to_bytes())

    if result.metrics:
        with open(out_dir / "metrics.json", "w") as fh:
            json.dump(result.metrics, fh, indent=1, sort_keys=True)
    report = {
        "stages": {k: {"wall_time_s": round(v, 3)} for k, v in result.wall_times.items()},
        "metrics": result.metrics,
        "config_hash": cfg.hash(),
        "ablation": args.ablate,
        "wall_time_s": round(wall, 3),
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    log.info("pipeline artifacts written to %s (%.1fs)", out_dir, wall)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftalign",
        description="Align drifting multi-view depth predictions into a canonical point cloud.",
    )
    parser.add_argument("--version", action="version", version=f"driftalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ablate=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
        if ablate:
            p.add_argument(
                "--ablate", choices=["only-rigid", "no-corr", "no-filt", "no-global", "no-inv"],
                help="drop one pipeline component",
            )

    p = sub.add_parser("synth", help="generate a synthetic drift scene")
    p.add_argument("spec", nargs="?", help="scene spec JSON (omit with --default)")
    p.add_argument("out_dir")
    p.add_argument("--default", action="store_true", help="use the built-in reference scene")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("filter", help="ingest + voxel confidence filter")
    p.add_argument("scene_dir")
    p.add_argument("out_ply")
    common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("align", help="stage 1: non-rigid frame-to-model ICP")
    p.add_argument("scene_dir")
    p.add_argument("out_ckpt")
    common(p, ablate=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("refine", help="stage 2: global non-rigid refinement")
    p.add_argument("ckpt")
    p.add_argument("out_ckpt")
    common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("invert", help="stage 3a: train the backward deformation field")
    p.add_argument("ckpt")
    p.add_argument("out_field")
    common(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("export", help="stage 3b: export the Gaussian-splat initialization")
    p.add_argument("ckpt")
    p.add_argument("out_ply")
    common(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("metrics", help="oracle metric report against a generated scene")
    p.add_argument("ckpt_or_ply")
    p.add_argument("gt_dir")
    p.add_argument("report_json")
    common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("pipeline", help="run all stages")
    p.add_argument("scene_dir")
    p.add_argument("out_dir")
    common(p, ablate=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DriftAlignError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
