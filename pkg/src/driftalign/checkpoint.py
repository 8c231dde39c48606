"""Stage checkpoints: canonical cloud, per-frame states, merge history.

A checkpoint directory is self-contained: it carries everything stage 2 and
stage 3 need (camera-space originals for every model point and the per-frame
filtered camera clouds), so later commands never re-read the scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .errors import StageError
from .field import DeformationField
from .icp import FrameState, MergeStats, ModelState, Stage1Result
from .ingest import CameraModel
from .pointcloud import ensure_dir, read_ply, write_ply

FORMAT = "driftalign-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    stage: str  # "align" or "refine"
    config: Config
    model: ModelState
    states: dict
    stats: MergeStats
    per_frame_cam: dict  # frame_id -> (N, 3) filtered camera-space points
    unalignable: list
    accept_fraction: dict


def _camera_dict(cam: CameraModel) -> dict:
    return {
        "K": cam.K.reshape(-1).tolist(),
        "R": cam.R.reshape(-1).tolist(),
        "t": cam.t.tolist(),
        "width": cam.width,
        "height": cam.height,
    }


def _camera_from_dict(d: dict) -> CameraModel:
    return CameraModel(
        K=np.asarray(d["K"], dtype=float).reshape(3, 3),
        R=np.asarray(d["R"], dtype=float).reshape(3, 3),
        t=np.asarray(d["t"], dtype=float),
        width=int(d["width"]),
        height=int(d["height"]),
    )


def save_checkpoint(path, result: Stage1Result, cfg: Config, stage: str) -> None:
    path = ensure_dir(path)
    write_ply(result.model.to_cloud(), path / "model.ply")
    np.savez_compressed(
        path / "model_extras.npz",
        cam_positions=result.model.cam_positions,
        pixel_coords=result.model.pixel_coords,
        intensity=result.model.intensity,
    )
    frames_npz = {f"cam_{f.frame_id:04d}": f.p_cam for f in result.frames}
    np.savez_compressed(path / "frames.npz", **frames_npz)

    fields_dir = ensure_dir(path / "fields")
    states_meta = {}
    for fid, state in sorted(result.states.items()):
        (fields_dir / f"frame_{fid:04d}.field").write_bytes(state.field.to_bytes())
        states_meta[str(fid)] = {
            "xi_g": state.xi_g.tolist(),
            "camera": _camera_dict(state.camera),
        }
    with open(path / "states.json", "w") as fh:
        json.dump(states_meta, fh, indent=1)
    with open(path / "merge_stats.json", "w") as fh:
        json.dump(
            {
                "history_data": result.stats.history_data,
                "history_color": result.stats.history_color,
                "sigma_d": result.stats.sigma_d,
                "sigma_c": result.stats.sigma_c,
            },
            fh,
            indent=1,
        )
    with open(path / "meta.json", "w") as fh:
        json.dump(
            {
                "format": FORMAT,
                "version": VERSION,
                "stage": stage,
                "config": cfg.to_dict(),
                "config_hash": cfg.hash(),
                "frames": sorted(int(f.frame_id) for f in result.frames),
                "unalignable": list(result.unalignable),
                "accept_fraction": {str(k): v for k, v in result.accept_fraction.items()},
            },
            fh,
            indent=1,
        )


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise StageError(f"{path} is not a checkpoint directory (missing meta.json)")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise StageError(f"{path}: unsupported checkpoint format")
    cfg = Config.from_dict(meta["config"])

    cloud = read_ply(path / "model.ply")
    extras = np.load(path / "model_extras.npz")
    model = ModelState(
        positions=cloud.positions,
        normals=cloud.normals,
        colors=cloud.colors,
        intensity=extras["intensity"],
        confidences=cloud.confidences,
        frame_ids=cloud.frame_ids,
        pixel_coords=extras["pixel_coords"],
        cam_positions=extras["cam_positions"],
    )

    with open(path / "states.json") as fh:
        states_meta = json.load(fh)
    states = {}
    for fid_str, entry in states_meta.items():
        fid = int(fid_str)
        field = DeformationField.from_bytes(
            (path / "fields" / f"frame_{fid:04d}.field").read_bytes()
        )
        states[fid] = FrameState(
            frame_id=fid,
            camera=_camera_from_dict(entry["camera"]),
            xi_g=np.asarray(entry["xi_g"], dtype=float),
            field=field,
        )

    with open(path / "merge_stats.json") as fh:
        ms = json.load(fh)
    stats = MergeStats(
        history_data=list(ms["history_data"]),
        history_color=list(ms["history_color"]),
        sigma_d=ms["sigma_d"],
        sigma_c=ms["sigma_c"],
    )
    frames_npz = np.load(path / "frames.npz")
    per_frame_cam = {
        int(key.split("_")[1]): frames_npz[key] for key in frames_npz.files
    }
    return Checkpoint(
        stage=meta["stage"],
        config=cfg,
        model=model,
        states=states,
        stats=stats,
        per_frame_cam=per_frame_cam,
        unalignable=list(meta.get("unalignable", [])),
        accept_fraction={int(k): v for k, v in meta.get("accept_fraction", {}).items()},
    )
