"""Spatial queries and local surface properties: k-NN, voxel hashing, normals,
tangent-plane color gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud

# scipy query worker count; set_num_threads() adjusts it process-wide.
_WORKERS = -1


def set_num_threads(n: int | None) -> None:
    global _WORKERS
    _WORKERS = -1 if n is None or n <= 0 else int(n)


def luma(colors: np.ndarray) -> np.ndarray:
    """Scalar intensity (Rec. 601 luma) of RGB colors in [0, 1]."""
    colors = np.asarray(colors, dtype=float)
    return colors @ np.array([0.299, 0.587, 0.114])


class NeighborIndex:
    """Exact nearest-neighbor index over a fixed position array (kd-tree backed)."""

    def __init__(self, positions: np.ndarray):
        positions = np.asarray(positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) == 0:
            raise ValueError("NeighborIndex requires a nonempty (N, 3) array")
        self.positions = positions
        self._tree = cKDTree(positions)

    def __len__(self) -> int:
        return len(self.positions)

    def nearest(self, query: np.ndarray):
        """Nearest point for one query or a batch: (distances, indices)."""
        d, i = self._tree.query(np.asarray(query, dtype=float), k=1, workers=_WORKERS)
        return d, i

    def k_nearest(self, query: np.ndarray, k: int):
        """k nearest points, sorted by distance. k is clipped to the index size."""
        k = min(int(k), len(self.positions))
        d, i = self._tree.query(np.asarray(query, dtype=float), k=k, workers=_WORKERS)
        if k == 1:
            d, i = np.expand_dims(d, -1), np.expand_dims(i, -1)
        return d, i

    def within_radius(self, query: np.ndarray, radius: float) -> np.ndarray:
        """Indices within radius of a single query point, sorted by distance."""
        query = np.asarray(query, dtype=float).reshape(3)
        idx = np.asarray(self._tree.query_ball_point(query, r=float(radius)), dtype=int)
        if idx.size == 0:
            return idx
        d = np.linalg.norm(self.positions[idx] - query, axis=1)
        return idx[np.argsort(d, kind="stable")]


def build_index(positions: np.ndarray) -> NeighborIndex:
    return NeighborIndex(positions)


class VoxelGrid:
    """Regular voxelization with key = floor(p / voxel_size) per component."""

    def __init__(self, positions: np.ndarray, voxel_size: float):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        positions = np.asarray(positions, dtype=float)
        self.voxel_size = float(voxel_size)
        self.point_keys = np.floor(positions / voxel_size).astype(np.int64)
        self.keys, self.point_voxel = np.unique(self.point_keys, axis=0, return_inverse=True)
        self.counts = np.bincount(self.point_voxel, minlength=len(self.keys))

    def __len__(self) -> int:
        return len(self.keys)

    def indices_for(self, key) -> np.ndarray:
        """Point indices contained in one voxel key (empty if absent)."""
        key = np.asarray(key, dtype=np.int64)
        match = np.all(self.keys == key, axis=1)
        if not match.any():
            return np.array([], dtype=int)
        return np.flatnonzero(self.point_voxel == np.flatnonzero(match)[0])


def estimate_normals(
    cloud: PointCloud, k: int, camera_centers: dict[int, np.ndarray]
) -> PointCloud:
    """Unit normals from k-NN PCA, oriented toward the originating camera.

    The smallest-eigenvalue eigenvector of the neighborhood covariance is the
    normal; neighborhoods of rank < 2 get a zero normal and are excluded from
    point-to-plane terms downstream.
    """
    n = len(cloud)
    if n < k + 1:
        raise ValueError(f"estimate_normals: need at least k+1={k + 1} points, got {n}")
    index = NeighborIndex(cloud.positions)
    _, nbr = index.k_nearest(cloud.positions, k + 1)  # includes the point itself
    nbrs = cloud.positions[nbr]  # (N, k+1, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    # Rank < 2: the two largest eigenvalues do not span a plane.
    scale = np.maximum(evals[:, 2], 1e-30)
    degenerate = evals[:, 1] <= 1e-10 * scale

    if cloud.frame_ids is None:
        raise ValueError("estimate_normals: cloud has no frame_ids for orientation")
    centers = np.zeros((n, 3))
    for fid, center in camera_centers.items():
        centers[cloud.frame_ids == fid] = np.asarray(center, dtype=float)
    toward = centers - cloud.positions
    flip = np.einsum("ni,ni->n", normals, toward) < 0
    normals = np.where(flip[:, None], -normals, normals)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = 0.0
    return cloud.with_(normals=normals)


@dataclass(frozen=True)
class ColorGradient:
    """Per-point intensity and tangent-plane intensity gradient (d . n = 0)."""

    gradients: np.ndarray
    intensities: np.ndarray


def estimate_color_gradients(
    cloud: PointCloud,
    index: NeighborIndex,
    radius: float,
    max_neighbors: int = 16,
) -> ColorGradient:
    """Least-squares tangent-plane intensity gradients for the colored-ICP term.

    Fits intensity(p) ~ intensity(q) + d_q . (proj_q(p) - q) over neighbors
    within `radius` (capped at max_neighbors for speed); points with fewer than
    3 neighbors get d_q = 0.
    """
    intensity = luma(cloud.colors)
    normals = cloud.normals
    if normals is None:
        raise ValueError("estimate_color_gradients: normals required")
    n = len(cloud)
    k = min(max_neighbors + 1, n)
    dist, nbr = index.k_nearest(cloud.positions, k)
    valid = (dist <= radius) & (dist > 0)  # drop self and out-of-radius

    delta = cloud.positions[nbr] - cloud.positions[:, None, :]  # (N, k, 3)
    # Project neighbors into each point's tangent plane.
    along = np.einsum("nkj,nj->nk", delta, normals)
    delta = delta - along[..., None] * normals[:, None, :]
    di = intensity[nbr] - intensity[:, None]
    delta = np.where(valid[..., None], delta, 0.0)
    di = np.where(valid, di, 0.0)

    gram = np.einsum("nki,nkj->nij", delta, delta)
    rhs = np.einsum("nki,nk->ni", delta, di)
    # The normal direction is in the null space by construction; pin it so the
    # 3x3 solve is well posed, plus a tiny ridge for rank-deficient tangents.
    trace = np.maximum(np.einsum("nii->n", gram), 1e-12)
    gram = gram + trace[:, None, None] * np.einsum("ni,nj->nij", normals, normals)
    gram += (1e-12 * trace)[:, None, None] * np.eye(3)
    grad = np.linalg.solve(gram, rhs[..., None])[..., 0]
    grad -= np.einsum("ni,ni->n", grad, normals)[:, None] * normals

    enough = valid.sum(axis=1) >= 3
    grad[~enough] = 0.0
    grad[~cloud.valid_normal_mask()] = 0.0
    return ColorGradient(gradients=grad, intensities=intensity)
