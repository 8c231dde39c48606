"""Stage 3a: learn the view-conditioned backward deformation.

A single field over canonical space, conditioned on a per-frame embedding,
predicts the twist that carries a rigidly back-projected canonical point to
the original camera-space observation. Trained on pairs generated by the
final forward deformations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .field import DeformationField, compute_bbox
from .icp import FrameState, forward_deform_points
from .optim import Adam
from .se3 import exp_many, transform_point_jacobians

log = logging.getLogger("driftalign")


@dataclass
class TrainingPairSet:
    """(frame, camera-space point, canonical point) triples; the canonical
    side is the forward deformation of the camera side by construction."""

    frame_idx: np.ndarray
    p_cam: np.ndarray
    p_canonical: np.ndarray

    def __len__(self):
        return len(self.frame_idx)

    def verify(self, states: dict, tol: float = 1e-9) -> float:
        """Re-derive the canonical points and return the max deviation."""
        worst = 0.0
        for fid in np.unique(self.frame_idx):
            m = self.frame_idx == fid
            redo = forward_deform_points(states[int(fid)], self.p_cam[m])
            worst = max(worst, float(np.max(np.abs(redo - self.p_canonical[m]))))
        if worst > tol:
            raise ValueError(f"training pairs inconsistent with states: max err {worst:.3e}")
        return worst


def sample_pairs(states: dict, per_frame_cam_points: dict, m_per_frame: int, seed: int) -> TrainingPairSet:
    """Uniformly sample camera-space points per frame and push them forward."""
    rng = np.random.default_rng(seed)
    fids, cams, canon = [], [], []
    for fid in sorted(per_frame_cam_points):
        pts = per_frame_cam_points[fid]
        take = min(m_per_frame, len(pts))
        sel = rng.choice(len(pts), size=take, replace=False)
        p_cam = pts[sel]
        fids.append(np.full(take, fid, dtype=np.int64))
        cams.append(p_cam)
        canon.append(forward_deform_points(states[fid], p_cam))
    return TrainingPairSet(
        frame_idx=np.concatenate(fids),
        p_cam=np.concatenate(cams),
        p_canonical=np.concatenate(canon),
    )


def make_inverse_field(canonical_points: np.ndarray, n_views: int, cfg, seed: int) -> DeformationField:
    return DeformationField(
        bbox=compute_bbox(canonical_points),
        levels=cfg.field_levels,
        features=cfg.field_features,
        table_log2=cfg.field_table_log2,
        hidden=cfg.field_hidden,
        view_dim=cfg.field_view_dim,
        n_views=n_views,
        out_scale=cfg.field_out_scale,
        finest_cell=cfg.s_vox[-1],
        seed=seed,
    )


def apply_inverse(field: DeformationField, states: dict, frame_idx: np.ndarray,
                  p_canonical: np.ndarray) -> np.ndarray:
    """Backward deformation: rigid camera inverse then the learned twist."""
    out = np.empty_like(p_canonical)
    xi = field.eval(p_canonical, view=frame_idx)
    rot, trans = exp_many(xi)
    for fid in np.unique(frame_idx):
        m = frame_idx == fid
        st = states[int(fid)]
        r_eff, t_eff = st.effective_rotation_translation()
        p_inv = (p_canonical[m] - t_eff) @ r_eff
        out[m] = np.einsum("nij,nj->ni", rot[m], p_inv) + trans[m]
    return out


@dataclass
class InverseTrainingResult:
    field: DeformationField
    final_loss: float
    loss_history: list


def inverse_loss_full(field: DeformationField, states: dict, pairs: TrainingPairSet) -> float:
    pred = apply_inverse(field, states, pairs.frame_idx, pairs.p_canonical)
    return float(np.mean(np.sum((pred - pairs.p_cam) ** 2, axis=1)))


def train_inverse(
    pairs: TrainingPairSet,
    field: DeformationField,
    states: dict,
    iters: int,
    lambda_tv: float,
    s_vox: float,
    batch: int = 2048,
    tv_points: int = 4096,
    tv_batch: int = 1024,
    lr: float = 1e-3,
    seed: int = 0,
) -> InverseTrainingResult:
    """Minibatch Adam on the inverse-consistency objective plus twist TV."""
    if len(pairs) == 0:
        raise ValueError("train_inverse: empty pair set")
    rng = np.random.default_rng(seed)
    n = len(pairs)

    # Rigidly back-projected canonical points are constants of the training.
    p_inv = np.empty_like(pairs.p_canonical)
    for fid in np.unique(pairs.frame_idx):
        m = pairs.frame_idx == fid
        r_eff, t_eff = states[int(fid)].effective_rotation_translation()
        p_inv[m] = (pairs.p_canonical[m] - t_eff) @ r_eff

    plan_all = field.prepare(pairs.p_canonical)
    tv_pool = pairs.p_canonical[rng.choice(n, size=min(tv_points, n), replace=False)]
    tv_plans_pool = field.prepare_tv_plans(tv_pool, s_vox)

    opt = Adam()
    opt.add_group("theta_inv", field.params, lr=lr)
    history = []

    for it in range(iters):
        sel = rng.choice(n, size=min(batch, n), replace=False)
        plan = plan_all.subset(sel)
        views = pairs.frame_idx[sel]
        xi, cache = field.eval_prepared(plan, views)
        moved, jac = transform_point_jacobians(xi, p_inv[sel])
        err = moved - pairs.p_cam[sel]
        loss = float(np.mean(np.sum(err * err, axis=1)))
        if not np.isfinite(loss):
            raise RuntimeError(f"train_inverse: non-finite loss at step {it}")
        d_moved = 2.0 * err / len(sel)
        upstream = np.einsum("nij,ni->nj", jac, d_moved)
        grad = field.zero_grad()
        field.backward_prepared(plan, cache, upstream, grad)

        tv_sel = rng.choice(len(tv_pool), size=min(tv_batch, len(tv_pool)), replace=False)
        tv_views = rng.integers(0, field.n_views, size=len(tv_sel))
        tv_plans = [p.subset(tv_sel) for p in tv_plans_pool]
        tv_value = field.tv_loss(
            tv_pool[tv_sel], s_vox, grad=grad, view_ids=tv_views,
            plans=tv_plans, weight=lambda_tv,
        )
        opt.step({"theta_inv": grad})
        history.append(loss + lambda_tv * tv_value)

    final = inverse_loss_full(field, states, pairs)
    log.info("inverse field trained: %d steps, final L_inverse %.3e", iters, final)
    return InverseTrainingResult(field=field, final_loss=final, loss_history=history)
