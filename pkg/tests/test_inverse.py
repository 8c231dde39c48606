"""Backward deformation: pair sampling, training, roundtrip consistency."""

import numpy as np
import pytest

from driftalign.config import Config
from driftalign.icp import FrameState, forward_deform_points
from driftalign.ingest import CameraModel
from driftalign.inverse import (
    apply_inverse,
    inverse_loss_full,
    make_inverse_field,
    sample_pairs,
    train_inverse,
)
from driftalign.se3 import twist_exp

CFG = Config(field_table_log2=10, field_levels=4)


def camera(seed):
    T = twist_exp(np.random.default_rng(seed).normal(scale=0.2, size=6))
    return CameraModel(
        K=np.array([[80.0, 0, 40], [0, 80.0, 30], [0, 0, 1]]),
        R=T.R, t=T.t + [0, 0, 2.5], width=80, height=60,
    )


def make_states(n_frames, rng, translation=None):
    states = {}
    clouds = {}
    for fid in range(n_frames):
        cam = camera(fid)
        pts = rng.normal(scale=0.4, size=(400, 3)) + [0, 0, 2.5]
        p_cam = cam.world_to_cam(pts)
        st = FrameState.fresh(fid, cam, p_cam, CFG, seed=fid)
        if translation is not None and fid > 0:
            b3 = st.field._view(st.field.params, "b3")
            b3[3:] = np.asarray(translation[fid]) / st.field.out_scale
        states[fid] = st
        clouds[fid] = p_cam
    return states, clouds


class TestSamplePairs:
    def test_identity_deformation_pairs(self):
        rng = np.random.default_rng(0)
        states, clouds = make_states(3, rng)
        pairs = sample_pairs(states, clouds, m_per_frame=64, seed=1)
        for fid in range(3):
            m = pairs.frame_idx == fid
            cam = states[fid].camera
            assert np.allclose(pairs.p_canonical[m], cam.cam_to_world(pairs.p_cam[m]), atol=1e-12)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(1)
        states, clouds = make_states(2, rng)
        a = sample_pairs(states, clouds, 32, seed=5)
        b = sample_pairs(states, clouds, 32, seed=5)
        assert np.array_equal(a.p_cam, b.p_cam)
        assert np.array_equal(a.p_canonical, b.p_canonical)

    def test_small_frame_takes_all(self):
        rng = np.random.default_rng(2)
        states, clouds = make_states(2, rng)
        clouds[1] = clouds[1][:10]
        pairs = sample_pairs(states, clouds, 64, seed=2)
        assert int((pairs.frame_idx == 1).sum()) == 10

    def test_verify_accepts_and_rejects(self):
        rng = np.random.default_rng(3)
        states, clouds = make_states(2, rng)
        pairs = sample_pairs(states, clouds, 32, seed=3)
        assert pairs.verify(states) < 1e-9
        pairs.p_canonical[0] += 1e-3
        with pytest.raises(ValueError):
            pairs.verify(states)


class TestTrainInverse:
    def test_identity_forward_keeps_zero_loss(self):
        rng = np.random.default_rng(4)
        states, clouds = make_states(3, rng)
        pairs = sample_pairs(states, clouds, 128, seed=4)
        field = make_inverse_field(pairs.p_canonical, n_views=3, cfg=CFG, seed=4)
        assert inverse_loss_full(field, states, pairs) < 1e-28
        out = train_inverse(
            pairs, field, states, iters=50, lambda_tv=CFG.lambda_tv,
            s_vox=CFG.s_vox[-1], batch=128, tv_points=64, tv_batch=32, seed=4,
        )
        assert out.final_loss < 1e-8

    def test_constant_translation_recovered(self):
        rng = np.random.default_rng(5)
        shifts = {1: np.array([0.02, -0.01, 0.015]), 2: np.array([-0.015, 0.02, 0.01])}
        states, clouds = make_states(3, rng, translation=shifts)
        pairs = sample_pairs(states, clouds, 256, seed=5)
        field = make_inverse_field(pairs.p_canonical, n_views=3, cfg=CFG, seed=5)
        train_inverse(
            pairs, field, states, iters=800, lambda_tv=0.1,
            s_vox=CFG.s_vox[-1], batch=256, tv_points=128, tv_batch=64, lr=5e-3, seed=5,
        )
        # the camera part of the forward map is exact, so the learned twist
        # must undo the constant per-frame camera-space translation
        for fid, shift in shifts.items():
            m = pairs.frame_idx == fid
            pred = apply_inverse(field, states, pairs.frame_idx[m], pairs.p_canonical[m])
            err = np.linalg.norm(pred - pairs.p_cam[m], axis=1)
            assert np.median(err) < 1e-3

    def test_non_finite_loss_aborts(self):
        rng = np.random.default_rng(6)
        states, clouds = make_states(2, rng)
        pairs = sample_pairs(states, clouds, 64, seed=6)
        pairs.p_cam[0] = np.nan
        field = make_inverse_field(pairs.p_canonical, n_views=2, cfg=CFG, seed=6)
        with pytest.raises(RuntimeError):
            train_inverse(
                pairs, field, states, iters=500, lambda_tv=0.0,
                s_vox=CFG.s_vox[-1], batch=64, tv_points=32, tv_batch=16, seed=6,
            )

    def test_smooth_warp_roundtrip_held_out(self):
        # forward states carry a smooth synthetic twist field; the trained
        # inverse must undo it on points never seen in training
        rng = np.random.default_rng(7)
        states, clouds = make_states(3, rng)
        for fid in (1, 2):
            st = states[fid]
            params = st.field.params
            st.field._view(params, "b3")[3:] = [0.1, -0.05, 0.08] if fid == 1 else [-0.06, 0.1, 0.04]
            st.field._view(params, "w3")[:] = rng.normal(scale=0.02, size=(CFG.field_hidden, 6))
        pairs = sample_pairs(states, clouds, 320, seed=7)
        held = sample_pairs(states, clouds, 380, seed=77)
        field = make_inverse_field(pairs.p_canonical, n_views=3, cfg=CFG, seed=7)
        train_inverse(
            pairs, field, states, iters=1200, lambda_tv=0.1,
            s_vox=CFG.s_vox[-1], batch=320, tv_points=256, tv_batch=64, lr=5e-3, seed=7,
        )
        pred = apply_inverse(field, states, held.frame_idx, held.p_canonical)
        err = np.linalg.norm(pred - held.p_cam, axis=1)
        warp_mag = np.linalg.norm(
            held.p_canonical - np.concatenate(
                [states[int(f)].camera.cam_to_world(held.p_cam[i : i + 1])
                 for i, f in enumerate(held.frame_idx)]
            ),
            axis=1,
        )
        moved = warp_mag > 1e-4
        assert np.median(err[moved]) < 0.1 * np.median(warp_mag[moved])
