"""End-to-end pipeline orchestration and ablation switches."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .config import Config
from .errors import SceneError, StageError
from .globalopt import run_global
from .icp import FrameData, Stage1Result, build_frame_data, run_stage1
from .ingest import CorrespondenceSet, FrameBundle, load_scene, unproject, voxel_confidence_filter
from .inverse import (
    InverseTrainingResult,
    inverse_loss_full,
    make_inverse_field,
    sample_pairs,
    train_inverse,
)
from .pointcloud import PointCloud, concat_clouds
from .splats import SplatSet, export_splats
from .synth import (
    cross_frame_nn_rms,
    load_ground_truth,
    metric_chamfer,
    metric_deformation_error,
    metric_thickness,
)

log = logging.getLogger("driftalign")

ABLATIONS = ("only-rigid", "no-corr", "no-filt", "no-global", "no-inv")


def check_ablation(name: str | None) -> str | None:
    if name is not None and name not in ABLATIONS:
        raise StageError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    return name


@dataclass
class IngestResult:
    frames: list  # FrameData
    bundles: list  # FrameBundle
    correspondences: CorrespondenceSet
    unaligned_cloud: PointCloud  # filtered but not aligned, for baselines


def ingest_scene(scene_dir, cfg: Config, skip_filter: bool = False) -> IngestResult:
    """Load, unproject and confidence-filter a scene directory."""
    bundles, corr = load_scene(scene_dir)
    clouds = [unproject(b, stride=cfg.stride) for b in bundles]
    for bundle, cloud in zip(bundles, clouds):
        if len(cloud) == 0:
            raise SceneError(f"frame_{bundle.frame_id:04d}: no valid depth pixels")

    if skip_filter:
        filtered = clouds
    elif cfg.filter_scope == "per-frame":
        filtered = [
            voxel_confidence_filter(c, cfg.filter_s_vox, cfg.theta_loc, cfg.theta_cnt)
            for c in clouds
        ]
    else:
        union = concat_clouds(clouds)
        kept = voxel_confidence_filter(union, cfg.filter_s_vox, cfg.theta_loc, cfg.theta_cnt)
        filtered = [kept.take(kept.frame_ids == b.frame_id) for b in bundles]

    frames = []
    for bundle, cloud in zip(bundles, filtered):
        if len(cloud) < cfg.normals_k + 2:
            raise SceneError(
                f"frame_{bundle.frame_id:04d}: only {len(cloud)} points survive filtering"
            )
        frames.append(build_frame_data(bundle, cloud, cfg.normals_k))
    union = concat_clouds(filtered)
    return IngestResult(
        frames=frames, bundles=bundles, correspondences=corr, unaligned_cloud=union
    )


@dataclass
class PipelineResult:
    stage1: Stage1Result
    refined: bool
    inverse: InverseTrainingResult | None
    splats: SplatSet | None
    metrics: dict = dc_field(default_factory=dict)
    wall_times: dict = dc_field(default_factory=dict)


def align_scene(scene_dir, cfg: Config, ablate: str | None = None) -> Stage1Result:
    check_ablation(ablate)
    ingest = ingest_scene(scene_dir, cfg, skip_filter=ablate == "no-filt")
    return run_stage1(
        ingest.frames,
        ingest.correspondences,
        cfg,
        only_rigid=ablate == "only-rigid",
        lambda_corr=0.0 if ablate == "no-corr" else None,
    )


def invert_deformations(states: dict, per_frame_cam: dict, cfg: Config) -> InverseTrainingResult:
    """Stage 3a: train the view-conditioned backward field."""
    pairs = sample_pairs(states, per_frame_cam, cfg.pairs_per_frame, seed=cfg.seed + 31)
    n_views = max(states) + 1
    field = make_inverse_field(pairs.p_canonical, n_views, cfg, seed=cfg.seed + 32)
    return train_inverse(
        pairs,
        field,
        states,
        iters=cfg.inverse_iters,
        lambda_tv=cfg.lambda_tv,
        s_vox=cfg.s_vox[-1],
        batch=cfg.inverse_batch,
        tv_points=cfg.inverse_tv_points,
        tv_batch=cfg.inverse_tv_batch,
        lr=cfg.lr,
        seed=cfg.seed + 33,
    )


def compute_metrics(cloud: PointCloud, gt_dir, states: dict | None = None,
                    accept_fraction: dict | None = None, seed: int = 0) -> dict:
    """Oracle metric report for a canonical cloud (plus states when available)."""
    gt = load_ground_truth(gt_dir)
    chamfer = metric_chamfer(cloud, gt.surface_samples, seed=seed, prims=gt.prims)
    report = {
        "chamfer": chamfer.to_dict(),
        "thickness": metric_thickness(cloud),
        "cross_frame_nn_rms": cross_frame_nn_rms(cloud),
        "model_points": int(len(cloud)),
    }
    if states is not None:
        report["deformation_error_median"] = metric_deformation_error(states, gt, seed=seed)
    if accept_fraction is not None:
        merged = [v for fid, v in accept_fraction.items() if fid != min(accept_fraction)]
        if merged:
            report["inlier_fraction"] = float(np.mean(merged))
    return report


def run_pipeline(scene_dir, cfg: Config, ablate: str | None = None,
                 with_metrics: bool = True) -> PipelineResult:
    """All stages, honoring the ablation switches."""
    check_ablation(ablate)
    times = {}

    t0 = time.time()
    stage1 = align_scene(scene_dir, cfg, ablate)
    times["align"] = time.time() - t0

    refined = False
    if ablate != "no-global":
        t0 = time.time()
        run_global(stage1.states, stage1.model, cfg, only_rigid=ablate == "only-rigid")
        times["refine"] = time.time() - t0
        refined = True

    inverse = None
    if ablate != "no-inv":
        t0 = time.time()
        per_frame_cam = {f.frame_id: f.p_cam for f in stage1.frames}
        inverse = invert_deformations(stage1.states, per_frame_cam, cfg)
        times["invert"] = time.time() - t0

    t0 = time.time()
    splats = export_splats(
        stage1.model.to_cloud(), cfg.splat_target_count, k=cfg.splat_knn, seed=cfg.seed
    )
    times["export"] = time.time() - t0

    result = PipelineResult(
        stage1=stage1, refined=refined, inverse=inverse, splats=splats, wall_times=times
    )
    from pathlib import Path

    gt_dir = Path(scene_dir)
    if with_metrics and (gt_dir / "gt").exists():
        t0 = time.time()
        result.metrics = compute_metrics(
            stage1.model.to_cloud(),
            scene_dir,
            states=stage1.states,
            accept_fraction=stage1.accept_fraction,
            seed=cfg.seed,
        )
        if inverse is not None:
            result.metrics["inverse_loss"] = inverse.final_loss
        times["metrics"] = time.time() - t0
    return result
