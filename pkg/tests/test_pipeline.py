"""Pipeline orchestration, checkpoints and the CLI on a tiny scene."""

import json
import subprocess
import sys

import numpy as np
import pytest

from driftalign.checkpoint import load_checkpoint, save_checkpoint
from driftalign.config import Config
from driftalign.errors import StageError
from driftalign.pipeline import align_scene, check_ablation, compute_metrics, ingest_scene
from driftalign.pointcloud import read_ply
from driftalign.synth import default_scene_spec, generate


def tiny_config():
    # Small capacity and short schedules keep these integration tests quick;
    # numeric quality is covered by the acceptance suite.
    return Config(
        stride=2,
        icp_iters=(15, 30),
        global_iters=10,
        inverse_iters=60,
        field_table_log2=12,
        field_levels=4,
        pairs_per_frame=512,
        anchor_samples=256,
        inverse_batch=256,
        inverse_tv_points=128,
        inverse_tv_batch=64,
        splat_target_count=2000,
    )


@pytest.fixture(scope="module")
def tiny_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_scene")
    spec = default_scene_spec(seed=3, frames=3, width=80, height=60)
    spec.warp["max_magnitude"] = 0.015
    spec.depth_noise_sigma = 0.001
    spec.corr_per_pair = 120
    generate(spec, out)
    return out


def test_check_ablation_rejects_unknown():
    with pytest.raises(StageError):
        check_ablation("no-such")
    assert check_ablation(None) is None
    assert check_ablation("only-rigid") == "only-rigid"


def test_ingest_respects_filter_scope(tiny_scene):
    cfg = tiny_config()
    global_scope = ingest_scene(tiny_scene, cfg)
    cfg.filter_scope = "per-frame"
    per_frame = ingest_scene(tiny_scene, cfg)
    assert len(global_scope.frames) == len(per_frame.frames) == 3
    # the two scopes generally keep different subsets
    assert len(global_scope.unaligned_cloud) != 0
    no_filter = ingest_scene(tiny_scene, cfg, skip_filter=True)
    assert len(no_filter.unaligned_cloud) >= len(global_scope.unaligned_cloud)


def test_checkpoint_roundtrip(tiny_scene, tmp_path):
    cfg = tiny_config()
    result = align_scene(tiny_scene, cfg)
    ckpt_dir = tmp_path / "ckpt"
    save_checkpoint(ckpt_dir, result, cfg, stage="align")
    back = load_checkpoint(ckpt_dir)
    assert back.stage == "align"
    assert back.config.hash() == cfg.hash()
    assert len(back.model) == len(result.model)
    assert np.allclose(back.model.cam_positions, result.model.cam_positions)
    assert sorted(back.states) == sorted(result.states)
    fid = max(back.states)
    assert np.allclose(back.states[fid].xi_g, result.states[fid].xi_g)
    # fields serialize through float32; evaluation must agree to that precision
    pts = result.model.cam_positions[:50]
    a = back.states[fid].field.eval(pts)
    b = result.states[fid].field.eval(pts)
    assert np.max(np.abs(a - b)) < 1e-5


def test_load_checkpoint_rejects_non_checkpoint(tmp_path):
    with pytest.raises(StageError):
        load_checkpoint(tmp_path)


def _run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "driftalign.cli", *map(str, args)],
        capture_output=True,
        text=True,
    )


class TestCli:
    def test_stage_order_enforced(self, tiny_scene, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        tiny_config().save(cfg_path)
        out = _run_cli("align", tiny_scene, tmp_path / "ck", "--config", cfg_path)
        assert out.returncode == 0, out.stderr
        # refine twice: second refine must fail the stage check
        out = _run_cli("refine", tmp_path / "ck", tmp_path / "ck2")
        assert out.returncode == 0, out.stderr
        out = _run_cli("refine", tmp_path / "ck2", tmp_path / "ck3")
        assert out.returncode != 0
        err = json.loads(out.stderr.strip().splitlines()[-1])
        assert err["error"] == "StageError"

    def test_refine_before_align_fails(self, tmp_path):
        out = _run_cli("refine", tmp_path / "nonexistent", tmp_path / "out")
        assert out.returncode != 0
        err = json.loads(out.stderr.strip().splitlines()[-1])
        assert "error" in err

    def test_invalid_config_rejected_before_work(self, tiny_scene, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"lambda_corr": -2.0}))
        out = _run_cli("align", tiny_scene, tmp_path / "ck", "--config", bad)
        assert out.returncode != 0
        err = json.loads(out.stderr.strip().splitlines()[-1])
        assert err["error"] == "ConfigError"

    def test_filter_writes_ply(self, tiny_scene, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        tiny_config().save(cfg_path)
        out_ply = tmp_path / "filtered.ply"
        res = _run_cli("filter", tiny_scene, out_ply, "--config", cfg_path)
        assert res.returncode == 0, res.stderr
        cloud = read_ply(out_ply)
        assert len(cloud) > 100

    def test_full_cli_pipeline_artifacts(self, tiny_scene, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        tiny_config().save(cfg_path)
        out_dir = tmp_path / "run"
        res = _run_cli("pipeline", tiny_scene, out_dir, "--config", cfg_path)
        assert res.returncode == 0, res.stderr
        for artifact in ("canonical.ply", "splats.ply", "inverse.field", "metrics.json", "report.json"):
            assert (out_dir / artifact).exists(), artifact
        report = json.loads((out_dir / "report.json").read_text())
        assert report["config_hash"]
        assert "align" in report["stages"]
        metrics = json.loads((out_dir / "metrics.json").read_text())
        assert "chamfer" in metrics and "thickness" in metrics

    def test_synth_default_scene(self, tmp_path):
        res = _run_cli("synth", "--default", tmp_path / "scene", "--seed", "5")
        # positional spec omitted; --default fills in
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "scene" / "frame_0000.depth.pfm").exists()
        assert (tmp_path / "scene" / "gt" / "spec.json").exists()


def test_metrics_from_ply(tiny_scene, tmp_path):
    cfg = tiny_config()
    ing = ingest_scene(tiny_scene, cfg)
    report = compute_metrics(ing.unaligned_cloud, tiny_scene, seed=0)
    assert report["model_points"] == len(ing.unaligned_cloud)
    assert report["thickness"] > 0
