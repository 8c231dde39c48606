"""Synthetic drift scenes and geometric oracle metrics.

Each frame sees a differently-warped copy of the same primitive world,
emulating the frame-to-frame geometric inconsistency of generated video.
Depth is exact (Newton root along each ray against the warped surfaces), so
every downstream stage can be verified against closed-form ground truth.
Frame 0 is never warped: the canonical space is frame-0 world.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import SceneError
from .ingest import CameraModel, CorrespondenceSet, write_camera, write_correspondences, write_pfm
from .pointcloud import PointCloud, ensure_dir, write_ply
from .se3 import exp_many
from .spatial import NeighborIndex

# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Plane:
    """Finite rectangle: local z = 0, |x| <= hx, |y| <= hy, posed by (R, t)."""

    R: np.ndarray
    t: np.ndarray
    hx: float
    hy: float

    def to_local(self, p):
        return (np.atleast_2d(p) - self.t) @ self.R

    def sdf(self, p):
        return self.to_local(p)[:, 2]

    def surface_distance(self, p):
        loc = self.to_local(p)
        ex = np.maximum(np.abs(loc[:, 0]) - self.hx, 0.0)
        ey = np.maximum(np.abs(loc[:, 1]) - self.hy, 0.0)
        return np.sqrt(loc[:, 2] ** 2 + ex**2 + ey**2)

    def sdf_grad(self, p):
        return np.broadcast_to(self.R[:, 2], (len(np.atleast_2d(p)), 3))

    def on_surface(self, p, tol=1e-7):
        loc = self.to_local(p)
        return (np.abs(loc[:, 0]) <= self.hx + tol) & (np.abs(loc[:, 1]) <= self.hy + tol)

    def raycast(self, origin, dirs):
        loc_o = (origin - self.t) @ self.R
        loc_d = dirs @ self.R
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -loc_o[2] / loc_d[:, 2]
        hit = loc_o[2:3] + t[:, None] * loc_d
        ok = (t > 1e-6) & np.isfinite(t)
        hx = loc_o[0] + t * loc_d[:, 0]
        hy = loc_o[1] + t * loc_d[:, 1]
        ok &= (np.abs(hx) <= self.hx) & (np.abs(hy) <= self.hy)
        return np.where(ok, t, np.inf)

    def area(self):
        return 4.0 * self.hx * self.hy

    def sample(self, n, rng):
        xy = rng.uniform([-self.hx, -self.hy], [self.hx, self.hy], size=(n, 2))
        loc = np.column_stack([xy, np.zeros(n)])
        normals = np.broadcast_to(self.R[:, 2], (n, 3)).copy()
        return loc @ self.R.T + self.t, normals


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def to_local(self, p):
        return np.atleast_2d(p) - self.center

    def sdf(self, p):
        return np.linalg.norm(self.to_local(p), axis=1) - self.radius

    def surface_distance(self, p):
        return np.abs(self.sdf(p))

    def sdf_grad(self, p):
        d = self.to_local(p)
        return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)

    def on_surface(self, p, tol=1e-7):
        return np.abs(self.sdf(p)) <= tol

    def raycast(self, origin, dirs):
        oc = origin - self.center
        a = np.einsum("ni,ni->n", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-6, t0, t1)
        ok &= t > 1e-6
        return np.where(ok, t, np.inf)

    def area(self):
        return 4.0 * np.pi * self.radius**2

    def sample(self, n, rng):
        raw = rng.normal(size=(n, 3))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return self.center + self.radius * raw, raw


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and half extents."""

    center: np.ndarray
    half: np.ndarray

    def to_local(self, p):
        return np.atleast_2d(p) - self.center

    def sdf(self, p):
        q = np.abs(self.to_local(p)) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def surface_distance(self, p):
        return np.abs(self.sdf(p))

    def sdf_grad(self, p):
        loc = self.to_local(p)
        q = np.abs(loc) - self.half
        grad = np.zeros_like(loc)
        out = np.maximum(q, 0.0)
        norm = np.linalg.norm(out, axis=1)
        is_out = norm > 0
        grad[is_out] = out[is_out] / norm[is_out, None] * np.sign(loc[is_out])
        if np.any(~is_out):
            face = np.argmax(q[~is_out], axis=1)
            sub = np.zeros((np.sum(~is_out), 3))
            sub[np.arange(len(sub)), face] = np.sign(loc[~is_out, face])
            grad[~is_out] = sub
        return grad

    def on_surface(self, p, tol=1e-7):
        return np.abs(self.sdf(p)) <= tol

    def raycast(self, origin, dirs):
        loc_o = origin - self.center
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t_lo = (-self.half - loc_o) * inv
        t_hi = (self.half - loc_o) * inv
        t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
        t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
        ok = (t_near <= t_far) & (t_far > 1e-6)
        t = np.where(t_near > 1e-6, t_near, t_far)
        return np.where(ok, t, np.inf)

    def area(self):
        w = 2 * self.half
        return 2.0 * (w[0] * w[1] + w[1] * w[2] + w[0] * w[2])

    def sample(self, n, rng):
        w = 2 * self.half
        areas = np.array([w[1] * w[2], w[1] * w[2], w[0] * w[2], w[0] * w[2], w[0] * w[1], w[0] * w[1]])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-self.half, self.half, size=(n, 3))
        normals = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * self.half[axis]
        normals[np.arange(n), axis] = sign
        return pts + self.center, normals


def _primitive_from_dict(d: dict):
    kind = d["kind"]
    if kind == "plane":
        return Plane(
            R=np.asarray(d["R"], dtype=float).reshape(3, 3),
            t=np.asarray(d["t"], dtype=float),
            hx=float(d["hx"]),
            hy=float(d["hy"]),
        )
    if kind == "sphere":
        return Sphere(center=np.asarray(d["center"], dtype=float), radius=float(d["radius"]))
    if kind == "box":
        return Box(center=np.asarray(d["center"], dtype=float), half=np.asarray(d["half"], dtype=float))
    raise SceneError(f"unknown primitive kind {kind!r}")


# ---------------------------------------------------------------------------
# procedural textures


def _lattice_hash(ix, iy, iz, seed):
    h = (
        ix.astype(np.uint64) * np.uint64(3010349)
        ^ iy.astype(np.uint64) * np.uint64(2654435761)
        ^ iz.astype(np.uint64) * np.uint64(805459861)
        ^ np.uint64(seed * 2246822519 + 1)
    )
    h ^= h >> np.uint64(13)
    h *= np.uint64(1274126177)
    h ^= h >> np.uint64(16)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0xFFFFFF)


def _value_noise(p, seed):
    base = np.floor(p).astype(np.int64)
    frac = p - base
    frac = frac * frac * (3.0 - 2.0 * frac)  # smoothstep
    total = np.zeros(len(p))
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        total += w * _lattice_hash(idx[:, 0], idx[:, 1], idx[:, 2], seed)
    return total


def texture_values(prim, tex: dict, world_pts: np.ndarray) -> np.ndarray:
    """Scalar texture field in [0, 1], evaluated on canonical surface points."""
    loc = prim.to_local(world_pts)
    if tex["kind"] == "checker":
        cells = np.floor(loc / float(tex["period"])).astype(np.int64)
        return (cells.sum(axis=1) % 2).astype(float)
    if tex["kind"] == "noise":
        scale = float(tex.get("scale", 0.25))
        octaves = int(tex.get("octaves", 3))
        seed = int(tex.get("seed", 0))
        total = np.zeros(len(loc))
        amp, norm = 1.0, 0.0
        for o in range(octaves):
            total += amp * _value_noise(loc / scale * (2.0**o), seed + o)
            norm += amp
            amp *= 0.5
        return total / norm
    raise SceneError(f"unknown texture kind {tex['kind']!r}")


def texture_colors(prim, tex: dict, world_pts: np.ndarray) -> np.ndarray:
    v = texture_values(prim, tex, world_pts)[:, None]
    c0 = np.asarray(tex["colors"][0], dtype=float)
    c1 = np.asarray(tex["colors"][1], dtype=float)
    return c0 + v * (c1 - c0)


# ---------------------------------------------------------------------------
# smooth per-frame warps


@dataclass
class WarpField:
    """Sum of radial-basis twist kernels applied as a position displacement."""

    centers: np.ndarray  # (K, 3)
    sigmas: np.ndarray  # (K,), nonpositive means constant weight 1
    twists: np.ndarray  # (K, 6)

    @staticmethod
    def identity() -> "WarpField":
        return WarpField(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 6)))

    def twist_at(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        if len(self.centers) == 0:
            return np.zeros((len(p), 6))
        d2 = ((p[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        with np.errstate(over="ignore"):
            w = np.where(
                self.sigmas[None, :] > 0,
                np.exp(-d2 / np.maximum(2.0 * self.sigmas[None, :] ** 2, 1e-30)),
                1.0,
            )
        return w @ self.twists

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        if len(self.centers) == 0:
            return p.copy()
        rot, trans = exp_many(self.twist_at(p))
        return np.einsum("nij,nj->ni", rot, p) + trans

    def displacement(self, p: np.ndarray) -> np.ndarray:
        return self.apply(p) - np.atleast_2d(p)

    def invert(self, x: np.ndarray, iters: int = 25, tol: float = 1e-13) -> np.ndarray:
        """Solve apply(q) = x by fixed point; the warp is a contraction."""
        x = np.atleast_2d(x)
        q = x.copy()
        if len(self.centers) == 0:
            return q
        for _ in range(iters):
            err = self.apply(q) - x
            q -= err
            if np.max(np.abs(err)) < tol:
                break
        return q

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "sigmas": self.sigmas.tolist(),
            "twists": self.twists.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "WarpField":
        return WarpField(
            centers=np.asarray(d["centers"], dtype=float).reshape(-1, 3),
            sigmas=np.asarray(d["sigmas"], dtype=float).reshape(-1),
            twists=np.asarray(d["twists"], dtype=float).reshape(-1, 6),
        )


def _make_warp(rng, warp_spec: dict, probe_pts: np.ndarray) -> WarpField:
    k = int(warp_spec["kernels"])
    max_mag = float(warp_spec["max_magnitude"])
    if k == 0 or max_mag == 0.0:
        return WarpField.identity()
    lo = np.asarray(warp_spec["center_lo"], dtype=float)
    hi = np.asarray(warp_spec["center_hi"], dtype=float)
    centers = rng.uniform(lo, hi, size=(k, 3))
    sigmas = rng.uniform(warp_spec["bandwidth_lo"], warp_spec["bandwidth_hi"], size=k)
    twists = rng.normal(size=(k, 6))
    twists[:, :3] *= 0.02  # mild rotational component relative to translation
    warp = WarpField(centers, sigmas, twists * 1e-3)
    # Rescale until the max displacement over the probe points hits the cap,
    # then clamp down-only (the displacement is mildly nonlinear in the twists).
    for _ in range(6):
        disp = np.linalg.norm(warp.displacement(probe_pts), axis=1).max()
        if disp < 1e-12:
            break
        warp = WarpField(centers, sigmas, warp.twists * (max_mag / disp))
    for _ in range(8):
        disp = np.linalg.norm(warp.displacement(probe_pts), axis=1).max()
        if disp <= max_mag:
            break
        warp = WarpField(centers, sigmas, warp.twists * (max_mag / disp) * 0.9999)
    return warp


# ---------------------------------------------------------------------------
# scene specification


@dataclass
class SceneSpec:
    """Everything needed to deterministically generate a drift scene."""

    primitives: list
    cameras: list
    width: int
    height: int
    warp: dict
    depth_noise_sigma: float = 0.0
    conf_alpha: float = 0.7
    conf_beta: float = 0.2
    conf_edge_radius: float = 6.0
    conf_edge_threshold: float = 0.05
    corr_per_pair: int = 300
    corr_corruption: float = 0.0
    corr_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        if len(self.primitives) < 1:
            raise SceneError("SceneSpec requires at least one primitive")
        if len(self.cameras) < 2:
            raise SceneError("SceneSpec requires at least two cameras")
        if self.depth_noise_sigma < 0 or self.warp.get("max_magnitude", 0.0) < 0:
            raise SceneError("SceneSpec magnitudes must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "primitives": self.primitives,
            "cameras": [
                {
                    "K": cam.K.reshape(-1).tolist(),
                    "R": cam.R.reshape(-1).tolist(),
                    "t": cam.t.tolist(),
                }
                for cam in self.cameras
            ],
            "width": self.width,
            "height": self.height,
            "warp": self.warp,
            "depth_noise_sigma": self.depth_noise_sigma,
            "conf_alpha": self.conf_alpha,
            "conf_beta": self.conf_beta,
            "conf_edge_radius": self.conf_edge_radius,
            "conf_edge_threshold": self.conf_edge_threshold,
            "corr_per_pair": self.corr_per_pair,
            "corr_corruption": self.corr_corruption,
            "corr_stride": self.corr_stride,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict, width=None, height=None) -> "SceneSpec":
        w = int(d["width"]) if width is None else width
        h = int(d["height"]) if height is None else height
        cameras = [
            CameraModel(
                K=np.asarray(c["K"], dtype=float).reshape(3, 3),
                R=np.asarray(c["R"], dtype=float).reshape(3, 3),
                t=np.asarray(c["t"], dtype=float),
                width=w,
                height=h,
            )
            for c in d["cameras"]
        ]
        keys = {
            k: d[k]
            for k in (
                "depth_noise_sigma",
                "conf_alpha",
                "conf_beta",
                "conf_edge_radius",
                "conf_edge_threshold",
                "corr_per_pair",
                "corr_corruption",
                "corr_stride",
                "seed",
            )
            if k in d
        }
        return SceneSpec(
            primitives=d["primitives"], cameras=cameras, width=w, height=h, warp=d["warp"], **keys
        )


def orbit_cameras(
    n: int,
    radius: float,
    height: float,
    target,
    span_deg: float,
    fx: float,
    width: int,
    img_height: int,
) -> list[CameraModel]:
    """Cameras on a horizontal arc, all looking at `target` (z-up world)."""
    target = np.asarray(target, dtype=float)
    cams = []
    angles = np.deg2rad(np.linspace(-span_deg / 2, span_deg / 2, n))
    for ang in angles:
        eye = np.array([radius * np.sin(ang), -radius * np.cos(ang), height])
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.array([0.0, 0, 1]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.column_stack([right, down, fwd])
        K = np.array([[fx, 0, (width - 1) / 2.0], [0, fx, (img_height - 1) / 2.0], [0, 0, 1.0]])
        cams.append(CameraModel(K=K, R=R, t=eye, width=width, height=img_height))
    return cams


def default_scene_spec(seed: int = 0, frames: int = 12, width: int = 160, height: int = 120) -> SceneSpec:
    """Desk-scale reference scene: ground plane, box and sphere under 3 cm drift."""
    # Smooth textures: colored-ICP gradients stay bounded and informative
    # everywhere (hard checker edges concentrate them pathologically).
    primitives = [
        {
            "kind": "plane",
            "R": np.eye(3).reshape(-1).tolist(),
            "t": [0.0, 0.0, 0.0],
            "hx": 1.9,
            "hy": 1.9,
            "texture": {"kind": "noise", "octaves": 3, "scale": 0.3, "seed": 3, "colors": [[0.85, 0.82, 0.75], [0.25, 0.3, 0.4]]},
        },
        {
            "kind": "box",
            "center": [-0.4, 0.1, 0.22],
            "half": [0.28, 0.2, 0.22],
            "texture": {"kind": "noise", "octaves": 3, "scale": 0.15, "seed": 5, "colors": [[0.75, 0.2, 0.15], [0.9, 0.75, 0.3]]},
        },
        {
            "kind": "sphere",
            "center": [0.45, -0.05, 0.3],
            "radius": 0.3,
            "texture": {"kind": "noise", "octaves": 3, "scale": 0.2, "seed": 7, "colors": [[0.1, 0.35, 0.2], [0.7, 0.9, 0.75]]},
        },
    ]
    cameras = orbit_cameras(
        n=frames, radius=2.3, height=1.5, target=[0.0, 0.2, 0.15], span_deg=80.0,
        fx=170.0, width=width, img_height=height,
    )
    warp = {
        "kernels": 5,
        "center_lo": [-1.2, -1.2, -0.2],
        "center_hi": [1.2, 1.2, 0.8],
        "bandwidth_lo": 0.35,
        "bandwidth_hi": 0.8,
        "max_magnitude": 0.03,
    }
    return SceneSpec(
        primitives=primitives,
        cameras=cameras,
        width=width,
        height=height,
        warp=warp,
        depth_noise_sigma=0.002,
        corr_per_pair=300,
        corr_stride=2,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# exact casting against the warped world


def _cast_rays(origin, dirs, prims, warp: WarpField, newton_iters: int = 18):
    """Depth along each ray against the warped primitives.

    Returns (t, prim_id, canonical) with t = inf and prim_id = -1 for misses.
    The root of sdf(unwarp(o + t d)) is tracked from the unwarped intersection,
    so silhouette-band pixels whose visibility flips under the warp are dropped
    (the warp is small; this loses at most a one-pixel rim).
    """
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_prim = np.full(n, -1, dtype=np.int64)
    best_canon = np.full((n, 3), np.nan)
    for pid, prim in enumerate(prims):
        t0 = prim.raycast(origin, dirs)
        active = np.isfinite(t0)
        if not active.any():
            continue
        idx = np.flatnonzero(active)
        t = t0[idx]
        d = dirs[idx]
        canon = None
        for _ in range(newton_iters):
            p = origin + t[:, None] * d
            canon = warp.invert(p)
            f = prim.sdf(canon)
            if np.max(np.abs(f)) < 1e-12:
                break
            slope = np.einsum("ni,ni->n", prim.sdf_grad(canon), d)
            step = f / np.where(np.abs(slope) < 1e-6, np.sign(slope) * 1e-6 + 1e-12, slope)
            t = t - np.clip(step, -0.05, 0.05)
        p = origin + t[:, None] * d
        canon = warp.invert(p)
        f = prim.sdf(canon)
        ok = (np.abs(f) < 1e-9) & prim.on_surface(canon) & (t > 1e-6)
        better = ok & (t < best_t[idx])
        upd = idx[better]
        best_t[upd] = t[better]
        best_prim[upd] = pid
        best_canon[upd] = canon[better]
    return best_t, best_prim, best_canon


def cast_pixels(camera: CameraModel, pixels: np.ndarray, prims, warp: WarpField):
    """Cast arbitrary (possibly fractional) pixel coordinates of one frame."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    rays_cam = np.column_stack([pixels, np.ones(len(pixels))]) @ camera.K_inv.T
    dirs = rays_cam @ camera.R.T
    return _cast_rays(camera.t, dirs, prims, warp)


@dataclass
class GroundTruth:
    """Exact per-frame geometry plus the canonical surface sampler."""

    spec: SceneSpec
    prims: list
    warps: list[WarpField]
    exact_depth: list  # noise-free depth rasters
    canonical_points: list  # (H, W, 3), NaN where invalid
    prim_ids: list  # (H, W) int, -1 invalid
    surface_samples: PointCloud

    def cameras(self) -> list[CameraModel]:
        return self.spec.cameras

    def warp_magnitude_bound(self) -> float:
        return float(self.spec.warp.get("max_magnitude", 0.0))

    def cast(self, frame_idx: int, pixels: np.ndarray):
        return cast_pixels(self.spec.cameras[frame_idx], pixels, self.prims, self.warps[frame_idx])

    def visible_canonical(self, frame_idx: int, canonical: np.ndarray, tol: float = 1e-6):
        """Project canonical points into a frame; True where seen unoccluded."""
        cam = self.spec.cameras[frame_idx]
        world = self.warps[frame_idx].apply(canonical)
        uv, z = cam.project(world)
        inside = (
            (z > 1e-6)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= cam.width - 1)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= cam.height - 1)
        )
        vis = np.zeros(len(canonical), dtype=bool)
        if inside.any():
            _, _, recast = self.cast(frame_idx, uv[inside])
            err = np.linalg.norm(recast - canonical[inside], axis=1)
            vis[inside] = np.isfinite(err) & (err < tol)
        return vis, uv


def sample_surface(prims, textures, n: int, rng) -> PointCloud:
    areas = np.array([p.area() for p in prims])
    counts = np.maximum(1, np.round(areas / areas.sum() * n).astype(int))
    pts, normals, colors = [], [], []
    for prim, tex, cnt in zip(prims, textures, counts):
        p, nrm = prim.sample(cnt, rng)
        pts.append(p)
        normals.append(nrm)
        colors.append(texture_colors(prim, tex, p))
    return PointCloud(
        positions=np.concatenate(pts),
        colors=np.clip(np.concatenate(colors), 0, 1),
        normals=np.concatenate(normals),
        confidences=np.ones(sum(len(p) for p in pts)),
        frame_ids=np.full(sum(len(p) for p in pts), -1, dtype=np.int64),
    )


def _confidence_map(depth: np.ndarray, spec: SceneSpec, rng) -> np.ndarray:
    valid = depth > 0
    dx = np.abs(np.diff(depth, axis=1, prepend=depth[:, :1]))
    dy = np.abs(np.diff(depth, axis=0, prepend=depth[:1, :]))
    edges = (np.maximum(dx, dy) > spec.conf_edge_threshold) | ~valid
    if edges.any():
        dist = ndimage.distance_transform_edt(~edges)
    else:
        dist = np.full(depth.shape, np.inf)
    proximity = np.clip(1.0 - dist / spec.conf_edge_radius, 0.0, 1.0)
    noise = rng.uniform(0.0, 1.0, size=depth.shape)
    conf = np.clip(1.0 - spec.conf_alpha * proximity - spec.conf_beta * noise, 0.0, 1.0)
    conf[~valid] = 0.0
    return conf


def _generate_correspondences(spec: SceneSpec, gt: GroundTruth, rng) -> CorrespondenceSet:
    """Exact matches: destination pixels on the stride grid, sources fractional.

    Both endpoints see the same canonical surface point, so unprojecting with
    exact depth and inverse-warping both sides coincides to solver tolerance.
    A corr_corruption fraction gets a random wrong destination and certainty
    1 - corr_corruption instead of 1.
    """
    src_f, dst_f, src_px, dst_px, weights = [], [], [], [], []
    n_frames = len(spec.cameras)
    stride = spec.corr_stride
    for k in range(1, n_frames):
        prim_k = gt.prim_ids[k]
        grid_v, grid_u = np.mgrid[0 : spec.height : stride, 0 : spec.width : stride]
        on_grid = prim_k[grid_v, grid_u].ravel() >= 0
        cand_u = grid_u.ravel()[on_grid]
        cand_v = grid_v.ravel()[on_grid]
        for j in range(k):
            if len(cand_u) == 0:
                continue
            take = min(spec.corr_per_pair, len(cand_u))
            sel = rng.choice(len(cand_u), size=take, replace=False)
            u, v = cand_u[sel], cand_v[sel]
            canon = gt.canonical_points[k][v, u]
            vis, uv = gt.visible_canonical(j, canon)
            if not vis.any():
                continue
            u, v, uv = u[vis], v[vis], uv[vis]
            n_pairs = len(u)
            w = np.ones(n_pairs)
            if spec.corr_corruption > 0:
                bad = rng.uniform(size=n_pairs) < spec.corr_corruption
                if bad.any():
                    ru = rng.choice(cand_u, size=bad.sum())
                    rv = rng.choice(cand_v, size=bad.sum())
                    du = np.column_stack([u, v]).astype(float)
                    du[bad] = np.column_stack([ru, rv])
                    w[bad] = 1.0 - spec.corr_corruption
                    dst = du
                else:
                    dst = np.column_stack([u, v]).astype(float)
            else:
                dst = np.column_stack([u, v]).astype(float)
            src_f.append(np.full(n_pairs, j))
            dst_f.append(np.full(n_pairs, k))
            src_px.append(uv)
            dst_px.append(dst)
            weights.append(w)
    if not src_f:
        return CorrespondenceSet()
    return CorrespondenceSet(
        src_frame=np.concatenate(src_f).astype(np.int64),
        dst_frame=np.concatenate(dst_f).astype(np.int64),
        src_pixel=np.concatenate(src_px),
        dst_pixel=np.concatenate(dst_px),
        weight=np.concatenate(weights),
    )


def generate(spec: SceneSpec, out_dir) -> GroundTruth:
    """Render the drift scene to the ingest layout plus a gt/ subdirectory."""
    out_dir = ensure_dir(out_dir)
    rng = np.random.default_rng(spec.seed)
    prims = [_primitive_from_dict(d) for d in spec.primitives]
    textures = [d["texture"] for d in spec.primitives]

    # The persisted surface samples double as the probe set that the warp
    # magnitudes are normalized against, so the cap holds exactly on them.
    samples = sample_surface(prims, textures, 60000, np.random.default_rng(spec.seed + 2))
    warps = [WarpField.identity()]
    warp_rng = np.random.default_rng(int(spec.warp.get("seed", spec.seed)) + 99)
    for _ in range(1, len(spec.cameras)):
        warps.append(_make_warp(warp_rng, spec.warp, samples.positions))

    vs, us = np.mgrid[0 : spec.height, 0 : spec.width]
    pixels = np.column_stack([us.ravel(), vs.ravel()]).astype(float)

    exact_depth, canonical_points, prim_ids = [], [], []
    for idx, cam in enumerate(spec.cameras):
        t, pid, canon = cast_pixels(cam, pixels, prims, warps[idx])
        if not np.isfinite(t).any():
            raise SceneError(f"frame_{idx:04d}: camera sees no geometry")
        depth = np.where(np.isfinite(t), t, 0.0).reshape(spec.height, spec.width)
        exact_depth.append(depth)
        canonical_points.append(canon.reshape(spec.height, spec.width, 3))
        prim_ids.append(pid.reshape(spec.height, spec.width))

        colors = np.zeros((len(pixels), 3))
        for p_i, prim in enumerate(prims):
            m = pid == p_i
            if m.any():
                colors[m] = texture_colors(prim, textures[p_i], canon[m])
        image = np.clip(colors.reshape(spec.height, spec.width, 3), 0, 1)

        noisy = depth.copy()
        if spec.depth_noise_sigma > 0:
            noisy = np.where(
                depth > 0, depth + rng.normal(0, spec.depth_noise_sigma, size=depth.shape), 0.0
            )
            noisy = np.maximum(noisy, 0.0)
        conf = _confidence_map(depth, spec, rng)

        name = f"frame_{idx:04d}"
        write_pfm(out_dir / f"{name}.depth.pfm", noisy)
        write_pfm(out_dir / f"{name}.conf.pfm", conf)
        Image.fromarray(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)).save(
            out_dir / f"{name}.png"
        )
        write_camera(out_dir / f"{name}.cam.json", cam)

    gt = GroundTruth(
        spec=spec,
        prims=prims,
        warps=warps,
        exact_depth=exact_depth,
        canonical_points=canonical_points,
        prim_ids=prim_ids,
        surface_samples=samples,
    )

    corr = _generate_correspondences(spec, gt, rng)
    write_correspondences(out_dir / "correspondences.csv", corr)

    gt_dir = ensure_dir(out_dir / "gt")
    for idx, warp in enumerate(warps):
        with open(gt_dir / f"warp_{idx:04d}.json", "w") as fh:
            json.dump(warp.to_dict(), fh)
    write_ply(samples, gt_dir / "surface_samples.ply")
    with open(gt_dir / "spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)
    return gt


def load_ground_truth(scene_dir) -> GroundTruth:
    """Reload the persisted subset of a generated scene's ground truth.

    Per-pixel rasters are not persisted; they are only needed by generator
    self-tests, which keep the in-memory object.
    """
    scene_dir = Path(scene_dir)
    gt_dir = scene_dir / "gt"
    if not gt_dir.exists():
        raise SceneError(f"{scene_dir} has no gt/ subdirectory")
    with open(gt_dir / "spec.json") as fh:
        spec = SceneSpec.from_dict(json.load(fh))
    prims = [_primitive_from_dict(d) for d in spec.primitives]
    warps = []
    for idx in range(len(spec.cameras)):
        with open(gt_dir / f"warp_{idx:04d}.json") as fh:
            warps.append(WarpField.from_dict(json.load(fh)))
    from .pointcloud import read_ply

    samples = read_ply(gt_dir / "surface_samples.ply")
    return GroundTruth(
        spec=spec,
        prims=prims,
        warps=warps,
        exact_depth=[],
        canonical_points=[],
        prim_ids=[],
        surface_samples=samples,
    )


# ---------------------------------------------------------------------------
# oracle metrics


@dataclass(frozen=True)
class ChamferResult:
    cloud_to_gt_mean: float
    cloud_to_gt_median: float
    gt_to_cloud_mean: float
    gt_to_cloud_median: float

    @property
    def symmetric_mean(self) -> float:
        return 0.5 * (self.cloud_to_gt_mean + self.gt_to_cloud_mean)

    @property
    def symmetric_median(self) -> float:
        return 0.5 * (self.cloud_to_gt_median + self.gt_to_cloud_median)

    def to_dict(self) -> dict:
        return {
            "cloud_to_gt_mean": self.cloud_to_gt_mean,
            "cloud_to_gt_median": self.cloud_to_gt_median,
            "gt_to_cloud_mean": self.gt_to_cloud_mean,
            "gt_to_cloud_median": self.gt_to_cloud_median,
            "symmetric_mean": self.symmetric_mean,
            "symmetric_median": self.symmetric_median,
        }


def _subsample(arr: np.ndarray, n: int, rng) -> np.ndarray:
    if len(arr) <= n:
        return arr
    return arr[rng.choice(len(arr), size=n, replace=False)]


def surface_distances(prims, points: np.ndarray) -> np.ndarray:
    """Exact distance from each point to the nearest primitive surface."""
    return np.stack([p.surface_distance(points) for p in prims]).min(axis=0)


def metric_chamfer(cloud: PointCloud, gt_samples: PointCloud, samples: int = 20000,
                   seed: int = 0, prims=None) -> ChamferResult:
    """Symmetric surface distance between a cloud and the canonical surface.

    The cloud-to-surface direction uses exact primitive distances when the
    primitives are given (sample spacing would otherwise floor it); the
    surface-to-cloud direction probes coverage at the sample positions.
    """
    rng = np.random.default_rng(seed)
    a = _subsample(cloud.positions, samples, rng)
    b = _subsample(gt_samples.positions, samples, rng)
    if prims:
        d_ab = surface_distances(prims, a)
    else:
        d_ab, _ = NeighborIndex(b).nearest(a)
    d_ba, _ = NeighborIndex(a).nearest(b)
    return ChamferResult(
        cloud_to_gt_mean=float(np.mean(d_ab)),
        cloud_to_gt_median=float(np.median(d_ab)),
        gt_to_cloud_mean=float(np.mean(d_ba)),
        gt_to_cloud_median=float(np.median(d_ba)),
    )


def metric_thickness(cloud: PointCloud, k: int = 16) -> float:
    """RMS distance of each point to the best-fit plane of its k nearest neighbors."""
    pos = cloud.positions
    index = NeighborIndex(pos)
    _, nbr = index.k_nearest(pos, k + 1)
    nbrs = pos[nbr[:, 1:]]  # exclude the point itself
    mean = nbrs.mean(axis=1)
    centered = nbrs - mean[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, evecs = np.linalg.eigh(cov)
    normal = evecs[:, :, 0]
    dist = np.abs(np.einsum("ni,ni->n", pos - mean, normal))
    return float(np.sqrt(np.mean(dist**2)))


def cross_frame_nn_rms(cloud: PointCloud) -> float:
    """RMS distance from each point to its nearest neighbor in any other frame."""
    pos = cloud.positions
    fids = cloud.frame_ids
    index = NeighborIndex(pos)
    k = min(64, len(pos))
    d, i = index.k_nearest(pos, k)
    other = fids[i] != fids[:, None]
    first = np.argmax(other, axis=1)
    has = other.any(axis=1)
    nn = np.where(has, d[np.arange(len(pos)), first], np.nan)
    return float(np.sqrt(np.nanmean(nn**2)))


def metric_deformation_error(
    states: dict, gt: GroundTruth, samples: int = 2000, seed: int = 0
) -> float:
    """Median canonical-space displacement error of the recovered deformations.

    For a canonical surface point s visible in frame i, the recovered forward
    deformation applied to the frame-i camera-space observation of warp_i(s)
    should land back on s.
    """
    from .icp import forward_deform_points  # late import to avoid a cycle

    rng = np.random.default_rng(seed)
    canon = _subsample(gt.surface_samples.positions, samples, rng)
    errors = []
    for fid, state in sorted(states.items()):
        if fid == 0 or fid >= len(gt.warps):
            continue
        vis, _ = gt.visible_canonical(fid, canon)
        if not vis.any():
            continue
        s = canon[vis]
        world_i = gt.warps[fid].apply(s)
        p_cam = gt.spec.cameras[fid].world_to_cam(world_i)
        recovered = forward_deform_points(state, p_cam)
        errors.append(np.linalg.norm(recovered - s, axis=1))
    if not errors:
        return float("nan")
    return float(np.median(np.concatenate(errors)))
