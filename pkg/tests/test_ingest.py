"""Scene loading, unprojection, and the voxel confidence filter."""

import json

import numpy as np
import pytest
from PIL import Image

from driftalign.errors import SceneError
from driftalign.ingest import (
    CameraModel,
    CorrespondenceSet,
    FrameBundle,
    load_scene,
    read_pfm,
    unproject,
    voxel_confidence_filter,
    write_camera,
    write_correspondences,
    read_correspondences,
    write_pfm,
)
from driftalign.pointcloud import PointCloud


def identity_focal_camera(width=4, height=3):
    return CameraModel(
        K=np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]),
        R=np.eye(3),
        t=np.zeros(3),
        width=width,
        height=height,
    )


def write_frame(scene_dir, fid, depth, conf, image, camera):
    name = f"frame_{fid:04d}"
    write_pfm(scene_dir / f"{name}.depth.pfm", depth)
    write_pfm(scene_dir / f"{name}.conf.pfm", conf)
    Image.fromarray((image * 255).astype(np.uint8)).save(scene_dir / f"{name}.png")
    write_camera(scene_dir / f"{name}.cam.json", camera)


def test_pfm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.uniform(0.1, 5.0, size=(7, 11)).astype(np.float32)
    path = tmp_path / "x.pfm"
    write_pfm(path, data)
    assert np.array_equal(read_pfm(path), data.astype(np.float64))


def test_unproject_identity_focal_pixel_origin():
    cam = identity_focal_camera()
    depth = np.zeros((3, 4))
    depth[0, 0] = 2.0
    frame = FrameBundle(
        depth=depth,
        confidence=np.ones((3, 4)),
        image=np.zeros((3, 4, 3)),
        camera=cam,
        frame_id=0,
    )
    cloud = unproject(frame)
    assert len(cloud) == 1
    assert np.allclose(cloud.positions[0], [0, 0, 2.0], atol=0)
    assert np.array_equal(cloud.pixel_coords[0], [0, 0])


def test_unproject_skips_invalid_depth():
    cam = identity_focal_camera()
    depth = np.array([[0.0, 1.0, 0.0, 2.0]] * 3)
    frame = FrameBundle(
        depth=depth,
        confidence=np.ones((3, 4)),
        image=np.zeros((3, 4, 3)),
        camera=cam,
        frame_id=0,
    )
    cloud = unproject(frame)
    assert len(cloud) == 6  # two valid columns x three rows


def test_unproject_stride_and_world_pose():
    rng = np.random.default_rng(1)
    from driftalign.se3 import twist_exp

    T = twist_exp(np.array([0.2, -0.1, 0.3, 0.5, 0.2, -0.4]))
    cam = CameraModel(
        K=np.array([[120.0, 0, 40], [0, 120.0, 30], [0, 0, 1]]),
        R=T.R,
        t=T.t,
        width=80,
        height=60,
    )
    depth = rng.uniform(1.0, 3.0, size=(60, 80))
    frame = FrameBundle(
        depth=depth,
        confidence=np.ones((60, 80)),
        image=rng.uniform(size=(60, 80, 3)),
        camera=cam,
        frame_id=3,
    )
    cloud = unproject(frame, stride=2)
    assert len(cloud) == 30 * 40
    u, v = cloud.pixel_coords[17]
    d = depth[v, u]
    ray = np.linalg.inv(cam.K) @ [u, v, 1.0]
    assert np.allclose(cloud.positions[17], T.apply(ray * d), atol=1e-9)
    # camera-space roundtrip
    assert np.allclose(cam.world_to_cam(cloud.positions[17]), ray * d, atol=1e-9)


class TestVoxelConfidenceFilter:
    def _cloud(self, positions, conf):
        n = len(positions)
        return PointCloud(
            positions=np.asarray(positions, dtype=float),
            colors=np.zeros((n, 3)),
            confidences=np.asarray(conf, dtype=float),
            frame_ids=np.zeros(n, dtype=int),
        )

    def test_equal_confidences_single_voxel_all_kept(self):
        cloud = self._cloud(np.random.default_rng(2).uniform(0, 0.09, (20, 3)), np.full(20, 0.7))
        out = voxel_confidence_filter(cloud, s_vox=0.1, theta_loc=80.0, theta_cnt=0.0)
        assert len(out) == 20

    def test_low_count_voxel_removed(self):
        # voxel A: 10 points, voxel B: 1 point; theta_cnt=50 -> tau = 5.5
        pos = [[0.05, 0.05, 0.05]] * 10 + [[1.05, 0.05, 0.05]]
        cloud = self._cloud(pos, np.ones(11))
        out = voxel_confidence_filter(cloud, s_vox=0.1, theta_loc=0.0, theta_cnt=50.0)
        np.testing.assert_allclose(np.percentile([10, 1], 50.0), 5.5)
        assert len(out) == 10
        assert np.all(out.positions[:, 0] < 1.0)

    def test_zero_thresholds_identity(self):
        rng = np.random.default_rng(3)
        cloud = self._cloud(rng.normal(size=(200, 3)), rng.uniform(0, 1, 200))
        out = voxel_confidence_filter(cloud, s_vox=0.2, theta_loc=0.0, theta_cnt=0.0)
        assert len(out) == 200
        assert np.array_equal(out.positions, cloud.positions)

    def test_percentile_gate_matches_brute_force(self):
        rng = np.random.default_rng(4)
        pos = rng.uniform(0, 1, size=(500, 3))
        conf = rng.uniform(0, 1, size=500)
        cloud = self._cloud(pos, conf)
        s, tl, tc = 0.25, 35.0, 40.0
        out = voxel_confidence_filter(cloud, s_vox=s, theta_loc=tl, theta_cnt=tc)

        keys = np.floor(pos / s).astype(int)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        counts = np.bincount(inv)
        tau_cnt = np.percentile(counts, tc)
        keep = np.zeros(500, dtype=bool)
        for vi in range(len(uniq)):
            members = np.flatnonzero(inv == vi)
            tau = np.percentile(conf[members], tl)
            keep[members] = (conf[members] >= tau) & (counts[vi] >= tau_cnt)
        assert np.array_equal(out.positions, pos[keep])

    def test_monotone_in_both_percentiles(self):
        rng = np.random.default_rng(5)
        pos = rng.uniform(0, 1, size=(400, 3))
        conf = rng.uniform(0, 1, size=400)
        cloud = self._cloud(pos, conf)

        def kept_set(tl, tc):
            out = voxel_confidence_filter(cloud, 0.25, tl, tc)
            return {tuple(p) for p in out.positions}

        prev = kept_set(0.0, 20.0)
        for tl in np.linspace(5, 100, 20):
            cur = kept_set(tl, 20.0)
            assert cur <= prev
            prev = cur
        prev = kept_set(20.0, 0.0)
        for tc in np.linspace(5, 100, 20):
            cur = kept_set(20.0, tc)
            assert cur <= prev
            prev = cur


class TestLoadScene:
    def _write_minimal(self, scene_dir, n=2, h=6, w=8):
        rng = np.random.default_rng(6)
        for fid in range(n):
            cam = CameraModel(
                K=np.array([[10.0, 0, 4], [0, 10.0, 3], [0, 0, 1]]),
                R=np.eye(3),
                t=np.array([0.1 * fid, 0, 0]),
                width=w,
                height=h,
            )
            write_frame(
                scene_dir,
                fid,
                rng.uniform(1, 2, (h, w)),
                rng.uniform(0, 1, (h, w)),
                rng.uniform(0, 1, (h, w, 3)),
                cam,
            )

    def test_frames_sorted_and_loaded(self, tmp_path):
        self._write_minimal(tmp_path, n=3)
        frames, corr = load_scene(tmp_path)
        assert [f.frame_id for f in frames] == [0, 1, 2]
        assert len(corr) == 0

    def test_single_frame_allowed(self, tmp_path):
        self._write_minimal(tmp_path, n=1)
        frames, corr = load_scene(tmp_path)
        assert len(frames) == 1

    def test_size_mismatch_names_frame(self, tmp_path):
        self._write_minimal(tmp_path, n=1)
        write_pfm(tmp_path / "frame_0000.conf.pfm", np.ones((2, 2)))
        with pytest.raises(SceneError, match="frame_0000"):
            load_scene(tmp_path)

    def test_missing_camera_names_frame(self, tmp_path):
        self._write_minimal(tmp_path, n=1)
        (tmp_path / "frame_0000.cam.json").unlink()
        with pytest.raises(SceneError, match="frame_0000"):
            load_scene(tmp_path)

    def test_correspondences_roundtrip(self, tmp_path):
        self._write_minimal(tmp_path, n=2)
        corr = CorrespondenceSet(
            src_frame=np.array([0]),
            dst_frame=np.array([1]),
            src_pixel=np.array([[1.25, 2.5]]),
            dst_pixel=np.array([[3.0, 4.0]]),
            weight=np.array([0.9]),
        )
        write_correspondences(tmp_path / "correspondences.csv", corr)
        _, back = load_scene(tmp_path)
        assert len(back) == 1
        assert np.array_equal(back.src_pixel, corr.src_pixel)
        assert back.weight[0] == 0.9

    def test_bad_weight_rejected(self, tmp_path):
        (tmp_path / "correspondences.csv").write_text(
            "src_frame,dst_frame,su,sv,tu,tv,w\n0,1,1,1,2,2,1.5\n"
        )
        with pytest.raises(SceneError):
            read_correspondences(tmp_path / "correspondences.csv")

    def test_camera_requires_cam2world(self, tmp_path):
        self._write_minimal(tmp_path, n=1)
        path = tmp_path / "frame_0000.cam.json"
        data = json.loads(path.read_text())
        data["convention"] = "world2cam"
        path.write_text(json.dumps(data))
        with pytest.raises(SceneError):
            load_scene(tmp_path)
