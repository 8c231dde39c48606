"""Stage 1: non-rigid iterative frame-to-model ICP.

Each frame k is aligned against the model accumulated from frames 0..k-1 by
optimizing a camera-correction twist and a deformation field over a
coarse-to-fine schedule (rigid-only except on the finest scale), then merged
with MAD-gated outlier rejection. Frame 0 defines the model and is never
deformed; merged points are never moved again within this stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import DeformationField, EvalPlan, compute_bbox
from .ingest import CameraModel, CorrespondenceSet, FrameBundle, unproject
from .optim import Adam
from .pointcloud import PointCloud
from .se3 import exp_many, transform_point_jacobians
from .spatial import ColorGradient, NeighborIndex, estimate_color_gradients, estimate_normals, luma

log = logging.getLogger("driftalign")


@dataclass
class FrameData:
    """One filtered frame ready for alignment: camera-space points plus
    world-space attributes estimated before any deformation."""

    frame_id: int
    camera: CameraModel
    p_cam: np.ndarray
    colors: np.ndarray
    intensity: np.ndarray
    confidences: np.ndarray
    pixel_coords: np.ndarray
    normals_world: np.ndarray

    def __len__(self):
        return len(self.p_cam)


def build_frame_data(frame: FrameBundle, cloud_world: PointCloud, normals_k: int) -> FrameData:
    """Attach camera-space coordinates and frame-local normals to a filtered cloud."""
    with_normals = estimate_normals(
        cloud_world, k=min(normals_k, len(cloud_world) - 1),
        camera_centers={frame.frame_id: frame.camera.center},
    )
    return FrameData(
        frame_id=frame.frame_id,
        camera=frame.camera,
        p_cam=frame.camera.world_to_cam(cloud_world.positions),
        colors=cloud_world.colors,
        intensity=luma(cloud_world.colors),
        confidences=cloud_world.confidences,
        pixel_coords=cloud_world.pixel_coords,
        normals_world=with_normals.normals,
    )


@dataclass
class FrameState:
    """Per-frame camera correction twist plus deformation field.

    The effective camera is exp(xi_g) composed with the ingested camera.
    """

    frame_id: int
    camera: CameraModel
    xi_g: np.ndarray
    field: DeformationField

    @staticmethod
    def fresh(frame_id: int, camera: CameraModel, p_cam: np.ndarray, cfg, n_views: int = 0,
              view_dim: int = 0, seed: int = 0) -> "FrameState":
        field = DeformationField(
            bbox=compute_bbox(p_cam),
            levels=cfg.field_levels,
            features=cfg.field_features,
            table_log2=cfg.field_table_log2,
            hidden=cfg.field_hidden,
            view_dim=view_dim,
            n_views=n_views,
            out_scale=cfg.field_out_scale,
            finest_cell=cfg.s_vox[-1],
            seed=seed,
        )
        return FrameState(frame_id=frame_id, camera=camera, xi_g=np.zeros(6), field=field)

    def effective_rotation_translation(self):
        rg, tg = exp_many(self.xi_g)
        return rg @ self.camera.R, rg @ self.camera.t + tg


@dataclass
class ForwardCache:
    """Deformed world points and the Jacobians needed to push loss gradients
    back to the camera twist and field parameters."""

    world: np.ndarray
    xi: np.ndarray | None
    jac_local: np.ndarray | None  # (N, 3, 6): d p_local / d xi_point
    jac_camera: np.ndarray  # (N, 3, 6): d world / d xi_g
    rot_chain: np.ndarray  # (3, 3): d world / d p_local (row-chain transpose)
    rot_point: np.ndarray | None  # (N, 3, 3) per-point rotations exp(xi).R
    field_cache: dict | None


def forward_deform(state: FrameState, p_cam: np.ndarray, plan: EvalPlan | None = None,
                   rigid_only: bool = False) -> ForwardCache:
    """Apply the per-point twist field then the corrected rigid camera."""
    p_cam = np.atleast_2d(p_cam)
    n = len(p_cam)
    if rigid_only:
        p_loc, xi, jac_local, cache, rot_point = p_cam, None, None, None, None
    else:
        if plan is None:
            plan = state.field.prepare(p_cam)
        xi, cache = state.field.eval_prepared(plan)
        p_loc, jac_local = transform_point_jacobians(xi, p_cam)
        rot_point, _ = exp_many(xi)
    cam = state.camera
    x0 = p_loc @ cam.R.T + cam.t
    world, jac_camera = transform_point_jacobians(np.broadcast_to(state.xi_g, (n, 6)), x0)
    rg, _ = exp_many(state.xi_g)
    return ForwardCache(
        world=world,
        xi=xi,
        jac_local=jac_local,
        jac_camera=jac_camera,
        rot_chain=rg @ cam.R,
        rot_point=rot_point,
        field_cache=cache,
    )


def forward_deform_points(state: FrameState, p_cam: np.ndarray) -> np.ndarray:
    """World positions only (no gradient plumbing)."""
    p_cam = np.atleast_2d(p_cam)
    xi = state.field.eval(p_cam)
    rot, trans = exp_many(xi)
    p_loc = np.einsum("nij,nj->ni", rot, p_cam) + trans
    cam = state.camera
    x0 = p_loc @ cam.R.T + cam.t
    rg, tg = exp_many(state.xi_g)
    return x0 @ rg.T + tg


def backprop_world_gradient(cache: ForwardCache, d_world: np.ndarray):
    """Chain dL/d(world point) to (d xi_g, per-point field upstream)."""
    g_xi = np.einsum("nij,ni->j", cache.jac_camera, d_world)
    if cache.jac_local is None:
        return g_xi, None
    d_local = d_world @ cache.rot_chain
    upstream = np.einsum("nij,ni->nj", cache.jac_local, d_local)
    return g_xi, upstream


@dataclass
class ModelState:
    """The growing canonical model; append-only within stage 1."""

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    intensity: np.ndarray
    confidences: np.ndarray
    frame_ids: np.ndarray
    pixel_coords: np.ndarray
    cam_positions: np.ndarray  # camera-space originals, same order

    @staticmethod
    def from_frame(frame: FrameData) -> "ModelState":
        return ModelState(
            positions=frame.camera.cam_to_world(frame.p_cam),
            normals=frame.normals_world.copy(),
            colors=frame.colors.copy(),
            intensity=frame.intensity.copy(),
            confidences=frame.confidences.copy(),
            frame_ids=np.full(len(frame), frame.frame_id, dtype=np.int64),
            pixel_coords=frame.pixel_coords.copy(),
            cam_positions=frame.p_cam.copy(),
        )

    def __len__(self):
        return len(self.positions)

    def append(self, positions, normals, frame: FrameData, accept: np.ndarray) -> None:
        self.positions = np.concatenate([self.positions, positions[accept]])
        self.normals = np.concatenate([self.normals, normals[accept]])
        self.colors = np.concatenate([self.colors, frame.colors[accept]])
        self.intensity = np.concatenate([self.intensity, frame.intensity[accept]])
        self.confidences = np.concatenate([self.confidences, frame.confidences[accept]])
        self.frame_ids = np.concatenate(
            [self.frame_ids, np.full(int(accept.sum()), frame.frame_id, dtype=np.int64)]
        )
        self.pixel_coords = np.concatenate([self.pixel_coords, frame.pixel_coords[accept]])
        self.cam_positions = np.concatenate([self.cam_positions, frame.p_cam[accept]])

    def normal_valid(self) -> np.ndarray:
        return np.einsum("ni,ni->n", self.normals, self.normals) > 0.25

    def to_cloud(self) -> PointCloud:
        return PointCloud(
            positions=self.positions.copy(),
            colors=self.colors.copy(),
            normals=self.normals.copy(),
            confidences=self.confidences.copy(),
            frame_ids=self.frame_ids.copy(),
            pixel_coords=self.pixel_coords.copy(),
        )


# ---------------------------------------------------------------------------
# loss terms


@dataclass
class DataLoss:
    value: float
    d_world: np.ndarray
    residuals: np.ndarray  # point-to-plane squared (distance squared fallback)
    inliers: np.ndarray
    zero_inliers: bool


def loss_data(world: np.ndarray, model: ModelState, nn_dist: np.ndarray, nn_idx: np.ndarray,
              d_max: float) -> DataLoss:
    """Point-to-plane data term over inliers within d_max of their nearest
    model point; correspondences and normals are constants of the iteration."""
    q = model.positions[nn_idx]
    n = model.normals[nn_idx]
    valid = model.normal_valid()[nn_idx]
    w = (nn_dist**2 < d_max**2) & valid
    r = np.einsum("ni,ni->n", world - q, n)
    denom = int(w.sum())
    residuals = np.where(valid, r**2, nn_dist**2)
    if denom == 0:
        return DataLoss(0.0, np.zeros_like(world), residuals, w, True)
    value = float(np.sum(w * r**2) / denom)
    d_world = (2.0 * w * r / denom)[:, None] * n
    return DataLoss(value, d_world, residuals, w, False)


@dataclass
class ColorLoss:
    value: float
    d_world: np.ndarray
    residuals: np.ndarray


def loss_color(world: np.ndarray, model: ModelState, gradients: ColorGradient,
               point_intensity: np.ndarray, nn_dist: np.ndarray, nn_idx: np.ndarray,
               d_max: float) -> ColorLoss:
    """Colored-ICP term: intensity predicted by the target's tangent-plane
    gradient versus the moving point's own (fixed) intensity."""
    q = model.positions[nn_idx]
    nq = model.normals[nn_idx]
    dq = gradients.gradients[nn_idx]
    iq = gradients.intensities[nn_idx]
    valid = model.normal_valid()[nn_idx]
    w = (nn_dist**2 < d_max**2) & valid

    diff = world - q
    along = np.einsum("ni,ni->n", diff, nq)
    proj = diff - along[:, None] * nq
    pred = iq + np.einsum("ni,ni->n", dq, proj)
    rc = pred - point_intensity
    residuals = rc**2
    denom = int(w.sum())
    if denom == 0:
        return ColorLoss(0.0, np.zeros_like(world), residuals)
    value = float(np.sum(w * rc**2) / denom)
    tangent = dq - np.einsum("ni,ni->n", dq, nq)[:, None] * nq
    d_world = (2.0 * w * rc / denom)[:, None] * tangent
    return ColorLoss(value, d_world, residuals)


@dataclass
class ResolvedCorrespondences:
    """Pixel matches resolved to concrete points: a constant world anchor on
    the merged model versus a moving index into the frame being aligned."""

    dst_index: np.ndarray
    anchors: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)

    @staticmethod
    def empty() -> "ResolvedCorrespondences":
        return ResolvedCorrespondences(
            np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0)
        )


@dataclass
class CorrLoss:
    value: float
    d_world: np.ndarray  # scattered onto the full frame cloud
    empty: bool


def loss_corr(world: np.ndarray, resolved: ResolvedCorrespondences) -> CorrLoss:
    if len(resolved) == 0:
        return CorrLoss(0.0, np.zeros_like(world), True)
    moving = world[resolved.dst_index]
    e = moving - resolved.anchors
    denom = float(resolved.weights.sum())
    value = float(np.sum(resolved.weights * np.einsum("ni,ni->n", e, e)) / denom)
    d_world = np.zeros_like(world)
    np.add.at(d_world, resolved.dst_index, (2.0 * resolved.weights / denom)[:, None] * e)
    return CorrLoss(value, d_world, False)


# ---------------------------------------------------------------------------
# per-frame alignment


@dataclass
class ModelPack:
    """Model-side quantities frozen for one frame's alignment."""

    model: ModelState
    index: NeighborIndex
    gradients: ColorGradient


def build_model_pack(model: ModelState, cfg) -> ModelPack:
    index = NeighborIndex(model.positions)
    cloud = PointCloud(
        positions=model.positions,
        colors=model.colors,
        normals=model.normals,
        frame_ids=model.frame_ids,
    )
    gradients = estimate_color_gradients(
        cloud, index, radius=cfg.color_grad_radius_factor * cfg.s_vox[-1]
    )
    return ModelPack(model=model, index=index, gradients=gradients)


@dataclass
class AlignOutcome:
    state: FrameState
    world: np.ndarray
    residuals_data: np.ndarray
    residuals_color: np.ndarray
    inliers: np.ndarray
    unalignable: bool
    final_energy: float
    iterations: int


def align_frame(pack: ModelPack, state: FrameState, frame: FrameData,
                resolved: ResolvedCorrespondences, cfg, only_rigid: bool = False,
                lambda_corr: float | None = None) -> AlignOutcome:
    """Coarse-to-fine optimization of one frame against the model.

    The field stays frozen at zero except on the finest scale ("only rigid"
    freezes it everywhere). Nearest neighbors are re-associated every
    iteration; the best-energy iterate is returned.
    """
    lam_color = cfg.lambda_color
    lam_corr = cfg.lambda_corr if lambda_corr is None else lambda_corr
    lam_tv = cfg.lambda_tv
    n_scales = len(cfg.s_vox)
    unalignable = False
    total_iters = 0

    for scale in range(n_scales):
        s_vox, d_max, iters = cfg.s_vox[scale], cfg.d_max[scale], cfg.icp_iters[scale]
        non_rigid = (scale == n_scales - 1) and not only_rigid
        plan = state.field.prepare(frame.p_cam) if non_rigid else None
        tv_plans = state.field.prepare_tv_plans(frame.p_cam, s_vox) if non_rigid else None

        opt = Adam()
        opt.add_group("xi_g", state.xi_g, lr=cfg.lr)
        if non_rigid:
            opt.add_group("field", state.field.params, lr=cfg.lr)

        best_energy = np.inf
        best_xi = state.xi_g.copy()
        best_field = state.field.params.copy() if non_rigid else None
        zero_streak = 0

        for _ in range(iters):
            total_iters += 1
            cache = forward_deform(state, frame.p_cam, plan, rigid_only=not non_rigid)
            nn_dist, nn_idx = pack.index.nearest(cache.world)
            data = loss_data(cache.world, pack.model, nn_dist, nn_idx, d_max)
            color = loss_color(
                cache.world, pack.model, pack.gradients, frame.intensity, nn_dist, nn_idx, d_max
            )
            corr = loss_corr(cache.world, resolved)
            energy = data.value + lam_color * color.value + lam_corr * corr.value

            if data.zero_inliers:
                zero_streak += 1
                if zero_streak > 10:
                    unalignable = True
                    break
            else:
                zero_streak = 0

            d_world = data.d_world + lam_color * color.d_world + lam_corr * corr.d_world
            g_xi, upstream = backprop_world_gradient(cache, d_world)
            grads = {"xi_g": g_xi}
            if non_rigid:
                g_field = state.field.zero_grad()
                state.field.backward_prepared(plan, cache.field_cache, upstream, g_field)
                energy += lam_tv * state.field.tv_loss(
                    frame.p_cam, s_vox, grad=g_field, plans=tv_plans, weight=lam_tv
                )
                grads["field"] = g_field
            if energy < best_energy:
                best_energy = energy
                best_xi = state.xi_g.copy()
                if non_rigid:
                    best_field = state.field.params.copy()
            opt.step(grads)

        state.xi_g[:] = best_xi
        if non_rigid and best_field is not None:
            state.field.params[:] = best_field
        if unalignable:
            break

    # Final residuals at the returned state, with fresh associations.
    cache = forward_deform(state, frame.p_cam, None, rigid_only=only_rigid)
    nn_dist, nn_idx = pack.index.nearest(cache.world)
    d_max_fine = cfg.d_max[-1]
    data = loss_data(cache.world, pack.model, nn_dist, nn_idx, d_max_fine)
    color = loss_color(
        cache.world, pack.model, pack.gradients, frame.intensity, nn_dist, nn_idx, d_max_fine
    )
    return AlignOutcome(
        state=state,
        world=cache.world,
        residuals_data=data.residuals,
        residuals_color=color.residuals,
        inliers=nn_dist**2 < d_max_fine**2,
        unalignable=unalignable,
        final_energy=data.value + lam_color * color.value,
        iterations=total_iters,
    )


# ---------------------------------------------------------------------------
# adaptive outlier merge


@dataclass
class MergeStats:
    """Per-frame loss-percentile histories driving the MAD thresholds."""

    history_data: list = dc_field(default_factory=list)
    history_color: list = dc_field(default_factory=list)
    sigma_d: float = 2.5
    sigma_c: float = 1.5

    @staticmethod
    def _threshold(history, sigma):
        if not history:
            return np.inf
        arr = np.asarray(history)
        med = np.median(arr)
        mad = np.median(np.abs(arr - med))
        return float(med + sigma * 1.4826 * mad)

    @property
    def tau_d(self) -> float:
        return self._threshold(self.history_data, self.sigma_d)

    @property
    def tau_c(self) -> float:
        return self._threshold(self.history_color, self.sigma_c)


def merge_frame(model: ModelState, outcome: AlignOutcome, frame: FrameData,
                stats: MergeStats, theta_d: float, theta_c: float,
                merge_ordinal: int) -> np.ndarray:
    """Gate the aligned frame's points against the MAD thresholds and append
    survivors to the model. Returns the acceptance mask.

    The first two merged frames bypass the gate (the MAD of fewer than two
    history entries is degenerate) and accept all d_max inliers; comparisons
    are <= so the zero-MAD bootstrap keeps residuals equal to the median.
    """
    rd, rc = outcome.residuals_data, outcome.residuals_color
    if merge_ordinal <= 2:
        accept = outcome.inliers.copy()
    else:
        accept = (rd <= stats.tau_d) & (rc <= stats.tau_c)
    stats.history_data.append(float(np.percentile(rd, theta_d)))
    stats.history_color.append(float(np.percentile(rc, theta_c)))

    # Transport frame-local normals through the per-point rigid deformation.
    cache = forward_deform(outcome.state, frame.p_cam, None, rigid_only=False)
    rg, _ = exp_many(outcome.state.xi_g)
    chain = rg @ outcome.state.camera.R  # world-from-local
    normals = np.einsum("nij,nj->ni", cache.rot_point, frame.normals_world @ outcome.state.camera.R)
    normals = normals @ chain.T
    invalid = np.einsum("ni,ni->n", frame.normals_world, frame.normals_world) <= 0.25
    normals[invalid] = 0.0

    model.append(outcome.world, normals, frame, accept)
    return accept


# ---------------------------------------------------------------------------
# correspondence resolution


def frustum_overlap_scores(frame: FrameData, candidates: list[FrameData], samples: int = 500):
    """Fraction of the frame's (undeformed) world points visible in each
    candidate's frustum; used to rank correspondence source frames."""
    world = frame.camera.cam_to_world(frame.p_cam)
    if len(world) > samples:
        step = len(world) // samples
        world = world[::step]
    scores = {}
    for cand in candidates:
        uv, z = cand.camera.project(world)
        inside = (
            (z > 0)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= cand.camera.width - 1)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= cand.camera.height - 1)
        )
        scores[cand.frame_id] = float(np.mean(inside)) if len(world) else 0.0
    return scores


def _pixel_lookup(pixel_coords: np.ndarray):
    return NeighborIndex(
        np.column_stack([pixel_coords.astype(float), np.zeros(len(pixel_coords))])
    )


def resolve_correspondences(
    corr: CorrespondenceSet,
    frame: FrameData,
    model: ModelState,
    prior_frames: list[FrameData],
    cfg,
) -> ResolvedCorrespondences:
    """Resolve pixel matches to (merged-model anchor, frame point index) pairs.

    Source frames are the previous frames with the greatest frustum overlap
    (up to max_corr_pairs); fractional pixels snap to the nearest surviving
    point on the unprojection grid and are skipped when filtering removed it.
    Up to max_correspondences matches are kept, highest certainty first.
    """
    subset = corr.for_destination(frame.frame_id)
    merged_ids = set(np.unique(model.frame_ids).tolist())
    sources = [f for f in prior_frames if f.frame_id in merged_ids and f.frame_id != frame.frame_id]
    if len(subset) == 0 or not sources:
        return ResolvedCorrespondences.empty()
    scores = frustum_overlap_scores(frame, sources)
    ranked = sorted(scores, key=lambda fid: (-scores[fid], fid))[: cfg.max_corr_pairs]
    keep_src = np.isin(subset.src_frame, ranked)
    subset = CorrespondenceSet(
        subset.src_frame[keep_src],
        subset.dst_frame[keep_src],
        subset.src_pixel[keep_src],
        subset.dst_pixel[keep_src],
        subset.weight[keep_src],
    )
    if len(subset) == 0:
        return ResolvedCorrespondences.empty()

    snap_tol = 0.75 * cfg.stride
    dst_lookup = _pixel_lookup(frame.pixel_coords)
    q = np.column_stack([subset.dst_pixel, np.zeros(len(subset))])
    dst_dist, dst_idx = dst_lookup.nearest(q)
    ok = dst_dist <= snap_tol

    # Anchors interpolate the merged surface at the fractional source pixel:
    # a local affine world(pixel) fit over the 3 nearest on-grid points kills
    # the up-to-one-pixel snapping error (a pixel footprint is centimeters).
    anchors = np.full((len(subset), 3), np.nan)
    for fid in np.unique(subset.src_frame):
        mask = np.flatnonzero(subset.src_frame == fid)
        rows = np.flatnonzero(model.frame_ids == fid)
        if len(rows) < 3:
            continue
        lut = _pixel_lookup(model.pixel_coords[rows])
        sq = np.column_stack([subset.src_pixel[mask], np.zeros(len(mask))])
        sd, si = lut.k_nearest(sq, 3)
        found = sd[:, 0] <= snap_tol
        px = model.pixel_coords[rows[si]].astype(float)  # (m, 3, 2)
        ws = model.positions[rows[si]]  # (m, 3, 3)
        d_px = px - px[:, :1]
        d_ws = ws - ws[:, :1]
        # Solve the 2x2 pixel-to-world system; fall back to the snapped point
        # when the three pixels are (nearly) collinear or spread too far.
        gram = np.einsum("nki,nkj->nij", d_px, d_px)
        rhs = np.einsum("nki,nkd->nid", d_px, d_ws)
        det = gram[:, 0, 0] * gram[:, 1, 1] - gram[:, 0, 1] * gram[:, 1, 0]
        # The fit is only trustworthy on one smooth surface patch: neighbors
        # straddling a depth edge are centimeters apart in world space, and
        # the snapped point itself is unreliable there, so such pairs are
        # dropped rather than approximated.
        spread = np.linalg.norm(d_ws, axis=2).max(axis=1)
        solvable = (
            found
            & (np.abs(det) > 1e-9)
            & (sd[:, 2] <= 2.5 * cfg.stride)
            & (spread <= 2.0 * cfg.d_max[-1])
        )
        if not solvable.any():
            continue
        inv = np.empty((int(solvable.sum()), 2, 2))
        g = gram[solvable]
        inv[:, 0, 0] = g[:, 1, 1]
        inv[:, 1, 1] = g[:, 0, 0]
        inv[:, 0, 1] = -g[:, 0, 1]
        inv[:, 1, 0] = -g[:, 1, 0]
        inv /= det[solvable][:, None, None]
        jac = np.einsum("nij,njd->nid", inv, rhs[solvable])  # d world / d pixel
        offset = subset.src_pixel[mask][solvable] - px[solvable, 0]
        correction = np.einsum("nid,ni->nd", jac, offset)
        good = np.linalg.norm(correction, axis=1) <= cfg.d_max[-1]
        rows_ok = mask[solvable][good]
        anchors[rows_ok] = ws[solvable, 0][good] + correction[good]
    ok &= np.isfinite(anchors[:, 0])
    if not ok.any():
        return ResolvedCorrespondences.empty()

    dst_index = dst_idx[ok]
    anchors = anchors[ok]
    weights = subset.weight[ok]
    if len(weights) > cfg.max_correspondences:
        order = np.argsort(-weights, kind="stable")[: cfg.max_correspondences]
        dst_index, anchors, weights = dst_index[order], anchors[order], weights[order]
    return ResolvedCorrespondences(dst_index=dst_index, anchors=anchors.copy(), weights=weights)


# ---------------------------------------------------------------------------
# stage driver


@dataclass
class Stage1Result:
    model: ModelState
    states: dict  # frame_id -> FrameState (frame 0 included, untouched)
    stats: MergeStats
    frames: list  # FrameData, aligned order
    unalignable: list
    accept_fraction: dict
    accept_masks: dict


def run_stage1(frames: list[FrameData], corr: CorrespondenceSet, cfg,
               only_rigid: bool = False, lambda_corr: float | None = None) -> Stage1Result:
    """Sequential frame-to-model alignment; frame 0 seeds the model."""
    frames = sorted(frames, key=lambda f: f.frame_id)
    first = frames[0]
    model = ModelState.from_frame(first)
    stats = MergeStats(sigma_d=cfg.sigma_d, sigma_c=cfg.sigma_c)
    states = {
        first.frame_id: FrameState.fresh(
            first.frame_id, first.camera, first.p_cam, cfg, seed=cfg.seed + first.frame_id
        )
    }
    unalignable: list[int] = []
    accept_fraction: dict[int, float] = {first.frame_id: 1.0}
    accept_masks: dict[int, np.ndarray] = {first.frame_id: np.ones(len(first), dtype=bool)}
    camera_centers = {f.frame_id: f.camera.center for f in frames}
    merge_ordinal = 0
    merges_since_refresh = 0

    for frame in frames[1:]:
        pack = build_model_pack(model, cfg)
        resolved = resolve_correspondences(corr, frame, model, frames, cfg)
        state = FrameState.fresh(
            frame.frame_id, frame.camera, frame.p_cam, cfg, seed=cfg.seed + frame.frame_id
        )
        outcome = align_frame(
            pack, state, frame, resolved, cfg, only_rigid=only_rigid, lambda_corr=lambda_corr
        )
        states[frame.frame_id] = state
        if outcome.unalignable:
            log.warning("frame %d unalignable (persistent zero inliers); skipped", frame.frame_id)
            unalignable.append(frame.frame_id)
            accept_fraction[frame.frame_id] = 0.0
            continue
        merge_ordinal += 1
        accept = merge_frame(
            model, outcome, frame, stats, cfg.theta_d, cfg.theta_c, merge_ordinal
        )
        accept_fraction[frame.frame_id] = float(np.mean(accept))
        accept_masks[frame.frame_id] = accept
        log.info(
            "frame %d aligned: energy %.3e, merged %d/%d points",
            frame.frame_id, outcome.final_energy, int(accept.sum()), len(accept),
        )
        merges_since_refresh += 1
        if merges_since_refresh >= cfg.normals_refresh_every:
            refreshed = estimate_normals(
                model.to_cloud(), k=min(cfg.normals_k, len(model) - 1),
                camera_centers=camera_centers,
            )
            model.normals = refreshed.normals
            merges_since_refresh = 0

    return Stage1Result(
        model=model,
        states=states,
        stats=stats,
        frames=frames,
        unalignable=unalignable,
        accept_fraction=accept_fraction,
        accept_masks=accept_masks,
    )
