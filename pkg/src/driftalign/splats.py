"""Stage 3b: convert the canonical cloud into a 2D Gaussian-splat initialization.

Disks sit in the tangent plane of each point's normal; both scales equal the
mean distance to the 10 nearest neighbors; opacity starts uniform at 0.1 and
colors become degree-0 spherical-harmonics coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SceneError
from .pointcloud import PointCloud
from .spatial import NeighborIndex

# Y_0^0 = 1 / (2 sqrt(pi))
SH_C0 = 0.2820947917738781


def sh0_encode(colors: np.ndarray) -> np.ndarray:
    """Colors in [0, 1] -> degree-0 SH coefficients.

    Picks the coefficient whose decode is closest to the input among the
    plain (c - 0.5) / Y00 and its two ulp-neighbors, so the roundtrip is
    bit-exact whenever the color is attainable as a decode output (decode's
    value grid is coarser than one ulp of the color for colors far from 0.5,
    so arbitrary floats may land one grid step away).
    """
    colors = np.asarray(colors, dtype=np.float64)
    coeff = (colors - 0.5) / SH_C0
    best = coeff.copy()
    best_err = np.abs(sh0_decode(best) - colors)
    for direction in (np.inf, -np.inf):
        cand = np.nextafter(coeff, direction)
        err = np.abs(sh0_decode(cand) - colors)
        better = err < best_err
        best = np.where(better, cand, best)
        best_err = np.where(better, err, best_err)
    return best


def sh0_decode(coeff: np.ndarray) -> np.ndarray:
    return np.asarray(coeff, dtype=np.float64) * SH_C0 + 0.5


def tangent_frames(normals: np.ndarray) -> np.ndarray:
    """Rotation matrices whose third column is the normal (disk plane = first two)."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.tile([0.0, 0.0, 1.0], (len(n), 1))
    helper[np.abs(n[:, 2]) > 0.9] = [1.0, 0.0, 0.0]
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def rotation_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Batched rotation matrices -> unit quaternions (w, x, y, z), w >= 0."""
    rot = np.asarray(rot, dtype=float)
    m00, m11, m22 = rot[:, 0, 0], rot[:, 1, 1], rot[:, 2, 2]
    trace = m00 + m11 + m22
    q = np.empty((len(rot), 4))
    # Branch on the largest diagonal term for stability.
    choice = np.argmax(np.stack([trace, m00, m11, m22], axis=1), axis=1)
    for c in range(4):
        m = choice == c
        if not m.any():
            continue
        r = rot[m]
        if c == 0:
            s = np.sqrt(1.0 + trace[m]) * 2
            q[m] = np.stack(
                [0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s,
                 (r[:, 1, 0] - r[:, 0, 1]) / s], axis=1)
        elif c == 1:
            s = np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]) * 2
            q[m] = np.stack(
                [(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                 (r[:, 0, 2] + r[:, 2, 0]) / s], axis=1)
        elif c == 2:
            s = np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2]) * 2
            q[m] = np.stack(
                [(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s, 0.25 * s,
                 (r[:, 1, 2] + r[:, 2, 1]) / s], axis=1)
        else:
            s = np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1]) * 2
            q[m] = np.stack(
                [(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                 (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], axis=1)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@dataclass(frozen=True)
class SplatSet:
    positions: np.ndarray
    normals: np.ndarray
    quaternions: np.ndarray  # (w, x, y, z) of the tangent frame
    scales: np.ndarray  # (N, 2)
    opacities: np.ndarray
    sh0: np.ndarray  # (N, 3) degree-0 coefficients

    def __len__(self):
        return len(self.positions)


def export_splats(cloud: PointCloud, target_count: int, k: int = 10, seed: int = 0) -> SplatSet:
    """Subsample the canonical cloud and derive 2DGS attributes.

    Positions are copied exactly; points without a valid normal are skipped
    (a disk needs an orientation). Both scales equal the mean distance to the
    k = 10 nearest neighbors within the exported set.
    """
    valid = cloud.valid_normal_mask()
    cloud = cloud.take(valid)
    if len(cloud) == 0:
        raise ValueError("export_splats: no points with valid normals")
    rng = np.random.default_rng(seed)
    if len(cloud) > target_count:
        sel = np.sort(rng.choice(len(cloud), size=target_count, replace=False))
        cloud = cloud.take(sel)

    index = NeighborIndex(cloud.positions)
    kk = min(k + 1, len(cloud))
    dist, _ = index.k_nearest(cloud.positions, kk)
    scale = dist[:, 1:].mean(axis=1)  # drop self
    frames = tangent_frames(cloud.normals)
    return SplatSet(
        positions=cloud.positions.copy(),
        normals=cloud.normals.copy(),
        quaternions=rotation_to_quaternion(frames),
        scales=np.stack([scale, scale], axis=1),
        opacities=np.full(len(cloud), 0.1),
        sh0=sh0_encode(cloud.colors),
    )


_SPLAT_PROPS = [
    "x", "y", "z", "nx", "ny", "nz", "scale_0", "scale_1",
    "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "f_dc_0", "f_dc_1", "f_dc_2",
]
_SPLAT_DTYPE = np.dtype([(p, "<f4") for p in _SPLAT_PROPS])


def write_splat_ply(splats: SplatSet, path) -> None:
    """De-facto splat PLY layout for downstream viewers (all float32)."""
    n = len(splats)
    rec = np.empty(n, dtype=_SPLAT_DTYPE)
    for i, name in enumerate(("x", "y", "z")):
        rec[name] = splats.positions[:, i]
    for i, name in enumerate(("nx", "ny", "nz")):
        rec[name] = splats.normals[:, i]
    rec["scale_0"], rec["scale_1"] = splats.scales[:, 0], splats.scales[:, 1]
    for i in range(4):
        rec[f"rot_{i}"] = splats.quaternions[:, i]
    rec["opacity"] = splats.opacities
    for i in range(3):
        rec[f"f_dc_{i}"] = splats.sh0[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _SPLAT_PROPS]
    header += ["end_header", ""]
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        fh.write(rec.tobytes())


def read_splat_ply(path) -> SplatSet:
    from .pointcloud import _parse_ply_header

    with open(path, "rb") as fh:
        n, props = _parse_ply_header(fh)
        if props != [("float", p) for p in _SPLAT_PROPS]:
            raise SceneError(f"unexpected splat PLY properties in {path}")
        rec = np.frombuffer(fh.read(n * _SPLAT_DTYPE.itemsize), dtype=_SPLAT_DTYPE, count=n)

    def stack(*names):
        return np.stack([rec[nm].astype(np.float64) for nm in names], axis=1)

    return SplatSet(
        positions=stack("x", "y", "z"),
        normals=stack("nx", "ny", "nz"),
        quaternions=stack("rot_0", "rot_1", "rot_2", "rot_3"),
        scales=stack("scale_0", "scale_1"),
        opacities=rec["opacity"].astype(np.float64),
        sh0=stack("f_dc_0", "f_dc_1", "f_dc_2"),
    )
