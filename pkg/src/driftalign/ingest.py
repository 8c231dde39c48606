"""Scene ingestion: per-frame rasters and cameras from disk, unprojection to
point clouds, and the voxelized confidence filter."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SceneError
from .pointcloud import PointCloud
from .spatial import VoxelGrid

_FRAME_RE = re.compile(r"frame_(\d{4})\.depth\.pfm$")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; (R, t) map camera to world: p_world = R p_cam + t."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = self.K
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise SceneError("camera K must be upper triangular with positive focal lengths")

    @property
    def K_inv(self) -> np.ndarray:
        fx, fy = self.K[0, 0], self.K[1, 1]
        cx, cy = self.K[0, 2], self.K[1, 2]
        skew = self.K[0, 1]
        return np.array(
            [
                [1.0 / fx, -skew / (fx * fy), (skew * cy - cx * fy) / (fx * fy)],
                [0.0, 1.0 / fy, -cy / fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def center(self) -> np.ndarray:
        return self.t

    def cam_to_world(self, p_cam: np.ndarray) -> np.ndarray:
        return np.asarray(p_cam) @ self.R.T + self.t

    def world_to_cam(self, p_world: np.ndarray) -> np.ndarray:
        return (np.asarray(p_world) - self.t) @ self.R

    def project(self, p_world: np.ndarray):
        """World points -> (pixels (N, 2), camera-space depth (N,))."""
        p_cam = self.world_to_cam(np.atleast_2d(p_world))
        z = p_cam[:, 2]
        uvw = p_cam @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = uvw[:, :2] / uvw[:, 2:3]
        return uv, z


@dataclass(frozen=True)
class FrameBundle:
    """One view's rasters plus camera; depth 0 marks invalid pixels."""

    depth: np.ndarray
    confidence: np.ndarray
    image: np.ndarray
    camera: CameraModel
    frame_id: int


@dataclass(frozen=True)
class CorrespondenceSet:
    """Sparse pixel matches between frames with certainty weights in [0, 1].

    Pixels may be fractional (matchers are subpixel); consumers snap them to
    the unprojection grid.
    """

    src_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dst_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    src_pixel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    dst_pixel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.weight)

    def for_destination(self, frame_id: int) -> "CorrespondenceSet":
        m = self.dst_frame == frame_id
        return CorrespondenceSet(
            self.src_frame[m], self.dst_frame[m], self.src_pixel[m], self.dst_pixel[m], self.weight[m]
        )


def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale little-endian PFM; rows stored bottom-up per the format."""
    data = np.asarray(data, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"Pf":
            raise SceneError(f"{path}: expected grayscale PFM header 'Pf'")
        width, height = map(int, fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(width * height * 4), dtype=dt, count=width * height)
    return np.flipud(data.reshape(height, width)).astype(np.float64)


def _load_camera(path, frame_name: str, width: int, height: int) -> CameraModel:
    if not Path(path).exists():
        raise SceneError(f"{frame_name}: missing camera file {path}")
    with open(path) as fh:
        data = json.load(fh)
    if data.get("convention") != "cam2world":
        raise SceneError(f"{frame_name}: camera convention must be 'cam2world'")
    return CameraModel(
        K=np.asarray(data["K"], dtype=float).reshape(3, 3),
        R=np.asarray(data["R"], dtype=float).reshape(3, 3),
        t=np.asarray(data["t"], dtype=float).reshape(3),
        width=width,
        height=height,
    )


def write_camera(path, camera: CameraModel) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "K": camera.K.reshape(-1).tolist(),
                "R": camera.R.reshape(-1).tolist(),
                "t": camera.t.reshape(-1).tolist(),
                "convention": "cam2world",
            },
            fh,
            indent=1,
        )


def read_correspondences(path) -> CorrespondenceSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["src_frame", "dst_frame", "su", "sv", "tu", "tv", "w"]:
            raise SceneError(f"{path}: unexpected correspondences header {header}")
        rows = [row for row in reader if row]
    if not rows:
        return CorrespondenceSet()
    arr = np.asarray(rows, dtype=float)
    w = arr[:, 6]
    if np.any((w < 0) | (w > 1)):
        raise SceneError(f"{path}: certainty weights outside [0, 1]")
    return CorrespondenceSet(
        src_frame=arr[:, 0].astype(np.int64),
        dst_frame=arr[:, 1].astype(np.int64),
        src_pixel=arr[:, 2:4].copy(),
        dst_pixel=arr[:, 4:6].copy(),
        weight=w.copy(),
    )


def write_correspondences(path, corr: CorrespondenceSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src_frame", "dst_frame", "su", "sv", "tu", "tv", "w"])
        for i in range(len(corr)):
            writer.writerow(
                [
                    int(corr.src_frame[i]),
                    int(corr.dst_frame[i]),
                    repr(float(corr.src_pixel[i, 0])),
                    repr(float(corr.src_pixel[i, 1])),
                    repr(float(corr.dst_pixel[i, 0])),
                    repr(float(corr.dst_pixel[i, 1])),
                    repr(float(corr.weight[i])),
                ]
            )


def load_scene(scene_dir) -> tuple[list[FrameBundle], CorrespondenceSet]:
    """Load all frames (sorted by id) plus the optional correspondence file."""
    scene_dir = Path(scene_dir)
    ids = sorted(
        int(m.group(1)) for f in scene_dir.iterdir() if (m := _FRAME_RE.search(f.name))
    )
    if not ids:
        raise SceneError(f"no frame_*.depth.pfm files in {scene_dir}")
    frames = []
    for fid in ids:
        name = f"frame_{fid:04d}"
        depth = read_pfm(scene_dir / f"{name}.depth.pfm")
        conf = read_pfm(scene_dir / f"{name}.conf.pfm")
        img_path = scene_dir / f"{name}.png"
        if not img_path.exists():
            raise SceneError(f"{name}: missing image {img_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        h, w = depth.shape
        if conf.shape != (h, w) or image.shape[:2] != (h, w):
            raise SceneError(
                f"{name}: raster size mismatch (depth {depth.shape}, "
                f"confidence {conf.shape}, image {image.shape[:2]})"
            )
        camera = _load_camera(scene_dir / f"{name}.cam.json", name, width=w, height=h)
        frames.append(
            FrameBundle(depth=depth, confidence=conf, image=image, camera=camera, frame_id=fid)
        )
    corr_path = scene_dir / "correspondences.csv"
    corr = read_correspondences(corr_path) if corr_path.exists() else CorrespondenceSet()
    return frames, corr


def unproject(frame: FrameBundle, stride: int = 1) -> PointCloud:
    """One world-space point per valid depth pixel on the stride grid."""
    h, w = frame.depth.shape
    vs, us = np.mgrid[0:h:stride, 0:w:stride]
    us, vs = us.ravel(), vs.ravel()
    d = frame.depth[vs, us]
    keep = d > 0
    us, vs, d = us[keep], vs[keep], d[keep]
    rays = np.stack([us, vs, np.ones_like(us)], axis=1).astype(float) @ frame.camera.K_inv.T
    p_cam = rays * d[:, None]
    positions = frame.camera.cam_to_world(p_cam)
    return PointCloud(
        positions=positions,
        colors=frame.image[vs, us],
        confidences=frame.confidence[vs, us],
        frame_ids=np.full(len(us), frame.frame_id, dtype=np.int64),
        pixel_coords=np.stack([us, vs], axis=1).astype(np.int64),
    )


def _segment_percentile(sorted_vals: np.ndarray, offsets: np.ndarray, counts: np.ndarray, q: float):
    """Linear-interpolation percentile per contiguous sorted segment."""
    rank = q / 100.0 * (counts - 1)
    lo = np.floor(rank).astype(int)
    hi = np.minimum(lo + 1, counts - 1)
    frac = rank - lo
    return sorted_vals[offsets + lo] * (1.0 - frac) + sorted_vals[offsets + hi] * frac


def voxel_confidence_filter(
    cloud: PointCloud, s_vox: float, theta_loc: float, theta_cnt: float
) -> PointCloud:
    """Keep points whose confidence reaches the per-voxel percentile threshold
    and whose voxel is populous enough.

    Comparisons are inclusive (>=), so theta = 0 is the identity filter and
    ties at the threshold are retained.
    """
    if len(cloud) == 0:
        raise ValueError("voxel_confidence_filter: empty cloud")
    grid = VoxelGrid(cloud.positions, s_vox)
    conf = np.asarray(cloud.confidences, dtype=float)

    order = np.lexsort((conf, grid.point_voxel))
    sorted_conf = conf[order]
    counts = grid.counts
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    tau_loc = _segment_percentile(sorted_conf, offsets, counts, theta_loc)
    tau_cnt = np.percentile(counts, theta_cnt)

    keep = (conf >= tau_loc[grid.point_voxel]) & (counts[grid.point_voxel] >= tau_cnt)
    return cloud.take(keep)
