"""Stage 2: joint refinement of all frames' cameras and deformation fields.

The correspondence search switches to the 5 nearest cross-frame neighbors of
every model point, with gradients flowing to both endpoints, plus an anchor
term tying twists and cameras to their state at stage entry. Frame 0 has no
parameters: its points only serve as targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .icp import FrameState, ModelState, backprop_world_gradient, forward_deform
from .optim import Adam
from .pointcloud import PointCloud
from .spatial import ColorGradient, NeighborIndex, estimate_color_gradients, estimate_normals

log = logging.getLogger("driftalign")


@dataclass
class GlobalSnapshot:
    """Frozen reference state taken at stage-2 entry: anchor points per frame
    with their twists, and the camera twists. Immutable during the stage."""

    anchors: dict  # frame_id -> (M, 3) camera-space points
    xi0_field: dict  # frame_id -> (M, 6)
    xi0_camera: dict  # frame_id -> (6,)


def take_snapshot(states: dict, model: ModelState, anchor_samples: int, seed: int) -> GlobalSnapshot:
    rng = np.random.default_rng(seed)
    anchors, xi0_field, xi0_camera = {}, {}, {}
    for fid in sorted(states):
        if fid == min(states):
            continue  # frame 0 is fixed
        rows = np.flatnonzero(model.frame_ids == fid)
        if len(rows) == 0:
            continue
        take = min(anchor_samples, len(rows))
        sel = rows[rng.choice(len(rows), size=take, replace=False)]
        pts = model.cam_positions[sel].copy()
        anchors[fid] = pts
        xi0_field[fid] = states[fid].field.eval(pts)
        xi0_camera[fid] = states[fid].xi_g.copy()
    return GlobalSnapshot(anchors=anchors, xi0_field=xi0_field, xi0_camera=xi0_camera)


@dataclass
class PairLosses:
    data_value: float
    color_value: float
    d_world: np.ndarray  # combined gradient (color term already weighted)
    pair_count: int
    point_count: int  # points contributing at least one inlier pair


def global_pair_losses(
    world: np.ndarray,
    model: ModelState,
    gradients: ColorGradient,
    lambda_color: float,
    k: int,
    d_max: float,
    overquery: int = 24,
) -> PairLosses:
    """Point-to-plane and color terms over each point's k nearest cross-frame
    neighbors (weighted means over inlier pairs within d_max).

    Points with fewer cross-frame neighbors in the overquery window use
    however many exist; isolated points contribute nothing.
    """
    n = len(world)
    index = NeighborIndex(world)
    kk = min(k + overquery, n)
    dist, idx = index.k_nearest(world, kk)
    cross = model.frame_ids[idx] != model.frame_ids[:, None]
    order = np.argsort(~cross, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = order.ravel()
    valid_pair = cross[rows, cols]
    a = rows[valid_pair]
    b = idx[rows, cols][valid_pair]
    pd = dist[rows, cols][valid_pair]

    nb = model.normals[b]
    valid_n = model.normal_valid()[b]
    w = (pd**2 < d_max**2) & valid_n
    if not w.any():
        return PairLosses(0.0, 0.0, np.zeros_like(world), 0, 0)
    a, b, nb = a[w], b[w], nb[w]
    # Per-point normalization as in the single-frame data term: each point
    # contributes the sum over its (up to k) neighbor residuals.
    denom = len(np.unique(a))

    diff = world[a] - world[b]
    r = np.einsum("ni,ni->n", diff, nb)
    data_value = float(np.sum(r**2) / denom)
    pull = (2.0 * r / denom)[:, None] * nb
    d_world = np.zeros_like(world)
    np.add.at(d_world, a, pull)
    np.add.at(d_world, b, -pull)

    dq = gradients.gradients[b]
    iq = gradients.intensities[b]
    ia = gradients.intensities[a]
    along = np.einsum("ni,ni->n", diff, nb)
    proj = diff - along[:, None] * nb
    rc = iq + np.einsum("ni,ni->n", dq, proj) - ia
    color_value = float(np.sum(rc**2) / denom)
    tangent = dq - np.einsum("ni,ni->n", dq, nb)[:, None] * nb
    cpull = (2.0 * lambda_color * rc / denom)[:, None] * tangent
    np.add.at(d_world, a, cpull)
    np.add.at(d_world, b, -cpull)
    return PairLosses(data_value, color_value, d_world, len(a), denom)


def anchor_loss_value(states: dict, snapshot: GlobalSnapshot, anchor_plans: dict) -> float:
    """Mean squared field-twist and camera-twist deviation from the snapshot."""
    fids = sorted(snapshot.anchors)
    if not fids:
        return 0.0
    total = 0.0
    for fid in fids:
        xi_a, _ = states[fid].field.eval_prepared(anchor_plans[fid])
        diff = xi_a - snapshot.xi0_field[fid]
        total += float(np.mean(np.einsum("ni,ni->n", diff, diff)))
        dcam = states[fid].xi_g - snapshot.xi0_camera[fid]
        total += float(dcam @ dcam)
    return total / len(fids)


@dataclass
class GlobalResult:
    model: ModelState
    states: dict
    energy_history: list
    halted_early: bool


def run_global(
    states: dict,
    model: ModelState,
    cfg,
    iterations: int | None = None,
    lambda_anchor: float | None = None,
    lambda_color: float | None = None,
    only_rigid: bool = False,
) -> GlobalResult:
    """Optimize the global energy and re-deform the model with the result.

    Returns the best-energy iterate; halts early if the energy rises for 20
    consecutive iterations. A zero-iteration run returns the input unchanged.
    """
    iters = cfg.global_iters if iterations is None else iterations
    lam_anchor = cfg.lambda_anchor if lambda_anchor is None else lambda_anchor
    lam_color = cfg.lambda_color if lambda_color is None else lambda_color
    d_max = cfg.d_max[-1]
    first_fid = min(states)

    if iters <= 0:
        return GlobalResult(model=model, states=states, energy_history=[], halted_early=False)

    snapshot = take_snapshot(states, model, cfg.anchor_samples, seed=cfg.seed + 7979)
    active = sorted(snapshot.anchors)
    gradients = estimate_color_gradients(
        PointCloud(
            positions=model.positions, colors=model.colors,
            normals=model.normals, frame_ids=model.frame_ids,
        ),
        NeighborIndex(model.positions),
        radius=cfg.color_grad_radius_factor * cfg.s_vox[-1],
    )
    # intensities of the MOVING points are per-model-point constants
    gradients = ColorGradient(gradients.gradients, model.intensity)

    frame_rows = {fid: np.flatnonzero(model.frame_ids == fid) for fid in active}
    plans = {fid: states[fid].field.prepare(model.cam_positions[frame_rows[fid]]) for fid in active}
    anchor_plans = {fid: states[fid].field.prepare(snapshot.anchors[fid]) for fid in active}

    opt = Adam()
    for fid in active:
        opt.add_group(f"xi_{fid}", states[fid].xi_g, lr=cfg.lr)
        if not only_rigid:
            opt.add_group(f"field_{fid}", states[fid].field.params, lr=cfg.lr)

    world = model.positions.copy()
    best_energy = np.inf
    best_params = None
    history = []
    rises = 0
    halted = False

    for it in range(iters):
        for fid in active:
            rows = frame_rows[fid]
            cache = forward_deform(
                states[fid], model.cam_positions[rows], plans[fid] if not only_rigid else None,
                rigid_only=only_rigid,
            )
            world[rows] = cache.world
        pair = global_pair_losses(world, model, gradients, lam_color, cfg.global_k, d_max)
        anchor_val = anchor_loss_value(states, snapshot, anchor_plans)
        energy = pair.data_value + lam_color * pair.color_value + lam_anchor * anchor_val
        history.append(energy)

        if energy < best_energy:
            best_energy = energy
            best_params = {
                fid: (states[fid].xi_g.copy(), None if only_rigid else states[fid].field.params.copy())
                for fid in active
            }
            rises = 0
        else:
            rises += 1
            if rises >= 20:
                halted = True
                log.warning("global refinement halted after %d iterations (diverging)", it + 1)
                break

        grads = {}
        n_active = len(active)
        for fid in active:
            rows = frame_rows[fid]
            cache = forward_deform(
                states[fid], model.cam_positions[rows], plans[fid] if not only_rigid else None,
                rigid_only=only_rigid,
            )
            g_xi, upstream = backprop_world_gradient(cache, pair.d_world[rows])
            g_xi = g_xi + (2.0 * lam_anchor / n_active) * (
                states[fid].xi_g - snapshot.xi0_camera[fid]
            )
            grads[f"xi_{fid}"] = g_xi
            if not only_rigid:
                g_field = states[fid].field.zero_grad()
                states[fid].field.backward_prepared(plans[fid], cache.field_cache, upstream, g_field)
                xi_a, cache_a = states[fid].field.eval_prepared(anchor_plans[fid])
                up_a = (2.0 * lam_anchor / (n_active * len(xi_a))) * (
                    xi_a - snapshot.xi0_field[fid]
                )
                states[fid].field.backward_prepared(anchor_plans[fid], cache_a, up_a, g_field)
                grads[f"field_{fid}"] = g_field
        opt.step(grads)

    if best_params is not None:
        for fid, (xi, params) in best_params.items():
            states[fid].xi_g[:] = xi
            if params is not None:
                states[fid].field.params[:] = params

    # Re-deform the model with the final states; frame 0 (and any frame
    # without parameters) keeps its stage-1 positions.
    refined = model.positions.copy()
    for fid in active:
        rows = frame_rows[fid]
        cache = forward_deform(states[fid], model.cam_positions[rows], None, rigid_only=only_rigid)
        refined[rows] = cache.world
    model.positions = refined
    camera_centers = {fid: states[fid].camera.center for fid in states}
    model.normals = estimate_normals(
        model.to_cloud(), k=min(16, len(model) - 1), camera_centers=camera_centers
    ).normals
    return GlobalResult(model=model, states=states, energy_history=history, halted_early=halted)
