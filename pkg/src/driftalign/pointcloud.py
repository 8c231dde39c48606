"""Point cloud container and binary PLY serialization.

Clouds are immutable between pipeline stages: operations return new instances
instead of mutating. Colors live in [0, 1] and are quantized to 8 bit on disk;
a zero normal marks "no valid normal estimated".
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import SceneError

_PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
        ("nx", "<f4"),
        ("ny", "<f4"),
        ("nz", "<f4"),
        ("confidence", "<f4"),
        ("frame_id", "<i4"),
    ]
)


@dataclass(frozen=True)
class PointCloud:
    """Positions with per-point color, normal, confidence and source frame.

    pixel_coords (u, v) keep provenance back to the source raster; they are
    optional and not persisted in PLY files.
    """

    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    confidences: np.ndarray | None = None
    frame_ids: np.ndarray | None = None
    pixel_coords: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.positions)
        for name in ("colors", "normals", "confidences", "frame_ids", "pixel_coords"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"PointCloud: {name} has length {len(arr)}, expected {n}")

    def __len__(self) -> int:
        return len(self.positions)

    def with_(self, **kwargs) -> "PointCloud":
        return replace(self, **kwargs)

    def take(self, index) -> "PointCloud":
        """Subset by integer indices or boolean mask, preserving order."""

        def pick(arr):
            return None if arr is None else arr[index]

        return PointCloud(
            positions=self.positions[index],
            colors=pick(self.colors),
            normals=pick(self.normals),
            confidences=pick(self.confidences),
            frame_ids=pick(self.frame_ids),
            pixel_coords=pick(self.pixel_coords),
        )

    def valid_normal_mask(self) -> np.ndarray:
        """True where a normal was estimated (zero rows mark degenerate fits)."""
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return np.einsum("ni,ni->n", self.normals, self.normals) > 0.25


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Concatenate clouds; optional arrays must be consistently present."""

    def cat(name):
        arrs = [getattr(c, name) for c in clouds]
        if all(a is None for a in arrs):
            return None
        if any(a is None for a in arrs):
            raise ValueError(f"concat_clouds: {name} present on some clouds only")
        return np.concatenate(arrs, axis=0)

    return PointCloud(
        positions=np.concatenate([c.positions for c in clouds], axis=0),
        colors=cat("colors"),
        normals=cat("normals"),
        confidences=cat("confidences"),
        frame_ids=cat("frame_ids"),
        pixel_coords=cat("pixel_coords"),
    )


def write_ply(cloud: PointCloud, path) -> None:
    """Write binary little-endian PLY with the package's point layout."""
    n = len(cloud)
    rec = np.empty(n, dtype=_PLY_DTYPE)
    pos = np.asarray(cloud.positions, dtype=np.float32)
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    colors = cloud.colors if cloud.colors is not None else np.zeros((n, 3))
    quant = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = quant[:, 0], quant[:, 1], quant[:, 2]
    normals = cloud.normals if cloud.normals is not None else np.zeros((n, 3))
    normals = np.asarray(normals, dtype=np.float32)
    rec["nx"], rec["ny"], rec["nz"] = normals[:, 0], normals[:, 1], normals[:, 2]
    conf = cloud.confidences if cloud.confidences is not None else np.ones(n)
    rec["confidence"] = np.asarray(conf, dtype=np.float32)
    fids = cloud.frame_ids if cloud.frame_ids is not None else np.zeros(n, dtype=np.int32)
    rec["frame_id"] = np.asarray(fids, dtype=np.int32)

    header = "\n".join(
        [
            "ply",
            "format binary_little_endian 1.0",
            f"element vertex {n}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "property float nx",
            "property float ny",
            "property float nz",
            "property float confidence",
            "property int frame_id",
            "end_header",
            "",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def _parse_ply_header(fh):
    """Return (n_vertices, property list [(type, name)]) from a binary PLY header."""
    magic = fh.readline().strip()
    if magic != b"ply":
        raise SceneError("not a PLY file")
    fmt = fh.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise SceneError(f"unsupported PLY format: {fmt.decode(errors='replace')}")
    n = None
    props = []
    while True:
        line = fh.readline()
        if not line:
            raise SceneError("truncated PLY header")
        line = line.strip()
        if line == b"end_header":
            break
        parts = line.decode("ascii").split()
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise SceneError(f"unexpected PLY element: {parts[1]}")
            n = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
    if n is None:
        raise SceneError("PLY header missing vertex element")
    return n, props


def read_ply(path) -> PointCloud:
    """Read a PLY written by write_ply; validates the property layout."""
    expected = [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
        ("float", "nx"),
        ("float", "ny"),
        ("float", "nz"),
        ("float", "confidence"),
        ("int", "frame_id"),
    ]
    with open(path, "rb") as fh:
        n, props = _parse_ply_header(fh)
        if props != expected:
            raise SceneError(f"unexpected PLY properties in {path}: {props}")
        rec = np.frombuffer(fh.read(n * _PLY_DTYPE.itemsize), dtype=_PLY_DTYPE, count=n)
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) / 255.0
    normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    return PointCloud(
        positions=positions,
        colors=colors,
        normals=normals,
        confidences=rec["confidence"].astype(np.float64),
        frame_ids=rec["frame_id"].astype(np.int64),
    )


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
