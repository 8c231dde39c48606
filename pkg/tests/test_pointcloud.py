"""PLY roundtrips and PointCloud container behavior."""

import numpy as np
import pytest

from driftalign.errors import SceneError
from driftalign.pointcloud import PointCloud, concat_clouds, read_ply, write_ply


def make_cloud(rng, n=50):
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(
        positions=rng.normal(size=(n, 3)),
        colors=rng.integers(0, 256, size=(n, 3)) / 255.0,
        normals=normals,
        confidences=rng.uniform(0, 1, size=n),
        frame_ids=rng.integers(0, 5, size=n),
    )


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        PointCloud(positions=np.zeros((3, 3)), colors=np.zeros((2, 3)))


def test_take_preserves_order_and_fields():
    cloud = make_cloud(np.random.default_rng(0))
    sub = cloud.take(np.array([4, 2, 9]))
    assert np.array_equal(sub.positions, cloud.positions[[4, 2, 9]])
    assert np.array_equal(sub.frame_ids, cloud.frame_ids[[4, 2, 9]])


def test_concat_roundtrip():
    rng = np.random.default_rng(1)
    a, b = make_cloud(rng, 10), make_cloud(rng, 20)
    both = concat_clouds([a, b])
    assert len(both) == 30
    assert np.array_equal(both.positions[:10], a.positions)
    assert np.array_equal(both.colors[10:], b.colors)


def test_ply_roundtrip(tmp_path):
    cloud = make_cloud(np.random.default_rng(2), n=200)
    path = tmp_path / "cloud.ply"
    write_ply(cloud, path)
    back = read_ply(path)
    assert len(back) == 200
    # float32 storage, 8-bit colors
    assert np.max(np.abs(back.positions - cloud.positions)) < 1e-6
    assert np.max(np.abs(back.colors - cloud.colors)) < 1e-12  # colors were /255 grid
    assert np.max(np.abs(back.normals - cloud.normals)) < 1e-6
    assert np.array_equal(back.frame_ids, cloud.frame_ids)
    # normals stay unit within 1e-6 through the roundtrip
    norms = np.linalg.norm(back.normals, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-6


def test_read_rejects_foreign_layout(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(
        b"ply\nformat binary_little_endian 1.0\nelement vertex 0\n"
        b"property float x\nend_header\n"
    )
    with pytest.raises(SceneError):
        read_ply(path)


def test_valid_normal_mask_marks_zero_rows():
    cloud = make_cloud(np.random.default_rng(3), n=4)
    normals = cloud.normals.copy()
    normals[2] = 0.0
    cloud = cloud.with_(normals=normals)
    assert list(cloud.valid_normal_mask()) == [True, True, False, True]
