"""Generator self-checks and oracle metrics."""

import numpy as np
import pytest

from driftalign.errors import SceneError
from driftalign.ingest import CameraModel, load_scene, unproject
from driftalign.pointcloud import PointCloud, concat_clouds
from driftalign.synth import (
    Box,
    ChamferResult,
    Plane,
    SceneSpec,
    Sphere,
    WarpField,
    cross_frame_nn_rms,
    default_scene_spec,
    generate,
    load_ground_truth,
    metric_chamfer,
    metric_deformation_error,
    metric_thickness,
    orbit_cameras,
    surface_distances,
)


def small_spec(seed=0, warp_mag=0.03, noise=0.0, frames=4):
    spec = default_scene_spec(seed=seed, frames=frames, width=96, height=72)
    spec.warp["max_magnitude"] = warp_mag
    spec.depth_noise_sigma = noise
    spec.corr_per_pair = 120
    return spec


@pytest.fixture(scope="module")
def clean_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("clean_scene")
    spec = small_spec(seed=1, warp_mag=0.0, noise=0.0)
    gt = generate(spec, out)
    return out, gt


@pytest.fixture(scope="module")
def drift_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("drift_scene")
    spec = small_spec(seed=2, warp_mag=0.03, noise=0.0)
    gt = generate(spec, out)
    return out, gt


class TestPrimitives:
    def test_plane_raycast_and_distance(self):
        plane = Plane(R=np.eye(3), t=np.zeros(3), hx=1.0, hy=1.0)
        t = plane.raycast(np.array([0.2, 0.1, 2.0]), np.array([[0.0, 0, -1]]))
        assert t[0] == pytest.approx(2.0)
        missing = plane.raycast(np.array([5.0, 0, 2.0]), np.array([[0.0, 0, -1]]))
        assert np.isinf(missing[0])
        d = plane.surface_distance(np.array([[0.0, 0, 0.3], [2.0, 0.0, 0.0]]))
        assert d[0] == pytest.approx(0.3)
        assert d[1] == pytest.approx(1.0)

    def test_sphere_raycast(self):
        sphere = Sphere(center=np.array([0.0, 0, 0]), radius=0.5)
        t = sphere.raycast(np.array([0.0, 0, 2.0]), np.array([[0.0, 0, -1]]))
        assert t[0] == pytest.approx(1.5)

    def test_box_raycast_and_sdf_grad(self):
        box = Box(center=np.zeros(3), half=np.array([0.5, 0.5, 0.5]))
        t = box.raycast(np.array([0.0, 0, 2.0]), np.array([[0.0, 0, -1]]))
        assert t[0] == pytest.approx(1.5)
        g = box.sdf_grad(np.array([[0.0, 0, 0.8], [0.0, 0, 0.4]]))
        assert np.allclose(g[0], [0, 0, 1])
        assert np.allclose(g[1], [0, 0, 1])

    def test_surface_samples_on_surface(self):
        rng = np.random.default_rng(0)
        for prim in (
            Plane(R=np.eye(3), t=np.array([0.0, 0, 0.2]), hx=0.5, hy=0.8),
            Sphere(center=np.array([0.1, 0.2, 0.3]), radius=0.4),
            Box(center=np.zeros(3), half=np.array([0.3, 0.2, 0.1])),
        ):
            pts, normals = prim.sample(500, rng)
            assert np.max(np.abs(prim.sdf(pts))) < 1e-9
            assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)


class TestWarpField:
    def test_identity_warp_is_noop(self):
        w = WarpField.identity()
        pts = np.random.default_rng(1).normal(size=(10, 3))
        assert np.array_equal(w.apply(pts), pts)

    def test_constant_translation_kernel(self):
        w = WarpField(
            centers=np.zeros((1, 3)), sigmas=np.array([-1.0]),
            twists=np.array([[0.0, 0, 0, 0.01, -0.02, 0.03]]),
        )
        pts = np.random.default_rng(2).normal(size=(20, 3))
        assert np.allclose(w.displacement(pts), [0.01, -0.02, 0.03], atol=1e-15)

    def test_inversion_fixed_point(self):
        rng = np.random.default_rng(3)
        w = WarpField(
            centers=rng.normal(size=(4, 3)), sigmas=rng.uniform(0.4, 0.9, 4),
            twists=rng.normal(scale=0.01, size=(4, 6)),
        )
        pts = rng.normal(size=(50, 3))
        warped = w.apply(pts)
        back = w.invert(warped)
        assert np.max(np.abs(back - pts)) < 1e-12

    def test_smoothness_bounded_curvature(self):
        rng = np.random.default_rng(4)
        w = WarpField(
            centers=rng.normal(size=(5, 3)), sigmas=rng.uniform(0.5, 1.0, 5),
            twists=rng.normal(scale=0.005, size=(5, 6)),
        )
        pts = rng.uniform(-1, 1, size=(200, 3))
        h = 1e-3
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            second = (w.displacement(pts + e) - 2 * w.displacement(pts) + w.displacement(pts - e)) / h**2
            # curvature of a Gaussian RBF kernel is bounded by ~|twist|/sigma^2
            assert np.max(np.abs(second)) < 1.0


class TestGenerate:
    def test_zero_warp_unprojections_on_primitives(self, clean_scene):
        scene_dir, gt = clean_scene
        frames, _ = load_scene(scene_dir)
        for frame in frames:
            cloud = unproject(frame)
            d = surface_distances(gt.prims, cloud.positions)
            assert np.max(d) < 1e-6

    def test_drift_visible_in_cross_frame_nn(self, drift_scene):
        scene_dir, _ = drift_scene
        frames, _ = load_scene(scene_dir)
        union = concat_clouds([unproject(f, stride=2) for f in frames])
        assert cross_frame_nn_rms(union) >= 0.01

    def test_warp_magnitude_within_bound(self, drift_scene):
        _, gt = drift_scene
        probe = gt.surface_samples.positions
        for warp in gt.warps:
            disp = np.linalg.norm(warp.displacement(probe), axis=1)
            assert disp.max() <= gt.warp_magnitude_bound() + 1e-9

    def test_frame_zero_never_warped(self, drift_scene):
        _, gt = drift_scene
        assert len(gt.warps[0].centers) == 0

    def test_correspondences_consistent_under_gt(self, drift_scene):
        scene_dir, gt = drift_scene
        _, corr = load_scene(scene_dir)
        assert len(corr) > 0
        rng = np.random.default_rng(5)
        sel = rng.choice(len(corr), size=min(200, len(corr)), replace=False)
        worst = 0.0
        for k in np.unique(corr.dst_frame[sel]):
            m = sel[corr.dst_frame[sel] == k]
            _, _, canon_dst = gt.cast(int(k), corr.dst_pixel[m])
            for j in np.unique(corr.src_frame[m]):
                mm = m[corr.src_frame[m] == j]
                _, _, canon_src = gt.cast(int(j), corr.src_pixel[mm])
                sub = corr.dst_pixel[mm]
                _, _, cd = gt.cast(int(k), sub)
                worst = max(worst, float(np.nanmax(np.linalg.norm(canon_src - cd, axis=1))))
        assert worst < 1e-6

    def test_generator_deterministic(self, tmp_path):
        spec = small_spec(seed=9, frames=2)
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate(spec, a)
        generate(spec, b)
        for f in sorted(p.name for p in a.iterdir() if p.is_file()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_blind_camera_rejected(self, tmp_path):
        spec = small_spec(seed=10, frames=2)
        # cameras looking straight up see nothing
        cams = orbit_cameras(2, 2.0, 1.0, [0, 0, 100.0], 10.0, 120.0, 96, 72)
        spec.cameras = cams
        with pytest.raises(SceneError, match="frame_"):
            generate(spec, tmp_path / "blind")

    def test_ground_truth_reload(self, drift_scene):
        scene_dir, gt = drift_scene
        back = load_ground_truth(scene_dir)
        assert len(back.warps) == len(gt.warps)
        assert np.allclose(back.warps[1].twists, gt.warps[1].twists)
        assert len(back.surface_samples) == len(gt.surface_samples)


class TestMetricChamfer:
    def test_gt_samples_against_themselves_zero(self, drift_scene):
        _, gt = drift_scene
        res = metric_chamfer(
            gt.surface_samples, gt.surface_samples,
            samples=len(gt.surface_samples), prims=gt.prims,
        )
        assert res.symmetric_mean < 1e-9

    def test_offset_plane_closed_form(self):
        rng = np.random.default_rng(6)
        plane = Plane(R=np.eye(3), t=np.zeros(3), hx=1.0, hy=1.0)
        pts, normals = plane.sample(4000, rng)
        base = PointCloud(positions=pts, colors=np.zeros((4000, 3)), normals=normals)
        offset = base.with_(positions=pts + [0.0, 0, 0.01])
        res = metric_chamfer(offset, base, prims=[plane])
        assert res.cloud_to_gt_mean == pytest.approx(0.01, rel=1e-9)

    def test_monotone_under_noise(self, drift_scene):
        _, gt = drift_scene
        rng = np.random.default_rng(7)
        base = gt.surface_samples
        prev = 0.0
        for sigma in (0.001, 0.004, 0.012):
            noisy = base.with_(positions=base.positions + rng.normal(0, sigma, (len(base), 3)))
            val = metric_chamfer(noisy, base, prims=gt.prims).cloud_to_gt_mean
            assert val > prev
            prev = val


class TestMetricThickness:
    def test_single_plane_near_zero(self):
        rng = np.random.default_rng(8)
        pts = np.column_stack([rng.uniform(0, 1, (2000, 2)), np.zeros(2000)])
        cloud = PointCloud(positions=pts, colors=np.zeros((2000, 3)))
        assert metric_thickness(cloud, k=16) < 1e-12

    def test_two_planes_half_gap(self):
        rng = np.random.default_rng(9)
        a = np.column_stack([rng.uniform(0, 1, (1500, 2)), np.zeros(1500)])
        b = np.column_stack([rng.uniform(0, 1, (1500, 2)), np.full(1500, 0.01)])
        cloud = PointCloud(positions=np.concatenate([a, b]), colors=np.zeros((3000, 3)))
        got = metric_thickness(cloud, k=16)
        assert got == pytest.approx(0.005, rel=0.1)

    def test_invariant_under_rigid_motion(self):
        from driftalign.se3 import twist_exp

        rng = np.random.default_rng(10)
        pts = rng.normal(size=(1000, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        cloud = PointCloud(positions=pts, colors=np.zeros((1000, 3)))
        T = twist_exp(np.array([0.4, -0.2, 0.3, 1.0, -2.0, 0.5]))
        moved = cloud.with_(positions=T.apply(pts))
        assert metric_thickness(moved, k=12) == pytest.approx(
            metric_thickness(cloud, k=12), rel=1e-9
        )


class TestMetricDeformationError:
    def test_zero_warp_identity_states_zero(self, clean_scene):
        scene_dir, gt = clean_scene
        from driftalign.config import Config
        from driftalign.icp import FrameState

        cfg = Config(field_table_log2=10, field_levels=4)
        states = {}
        for fid, cam in enumerate(gt.spec.cameras):
            p_ref = np.array([[0.0, 0.0, 2.0]])
            states[fid] = FrameState.fresh(fid, cam, p_ref, cfg, seed=fid)
        err = metric_deformation_error(states, gt, samples=500)
        assert err < 1e-9

    def test_constant_translation_recovered_exactly(self, tmp_path):
        # warp = exact constant translation; states hand-set to the inverse
        from driftalign.config import Config
        from driftalign.icp import FrameState

        spec = small_spec(seed=11, warp_mag=0.0, frames=2)
        gt = generate(spec, tmp_path / "const")
        shift = np.array([0.02, -0.01, 0.015])
        gt.warps[1] = WarpField(
            centers=np.zeros((1, 3)), sigmas=np.array([-1.0]),
            twists=np.array([np.concatenate([np.zeros(3), shift])]),
        )
        cfg = Config(field_table_log2=10, field_levels=4)
        states = {}
        for fid, cam in enumerate(gt.spec.cameras):
            st = FrameState.fresh(fid, cam, np.array([[0.0, 0.0, 2.0]]), cfg, seed=fid)
            if fid == 1:
                # camera-space twist undoing the world-space shift: R^T (-shift)
                st.field._view(st.field.params, "b3")[3:] = (cam.R.T @ -shift) / st.field.out_scale
            states[fid] = st
        err = metric_deformation_error(states, gt, samples=400)
        assert err < 1e-9
