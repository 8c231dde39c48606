"""Pipeline configuration: reference hyperparameters plus implementation knobs.

Loaded from JSON with strict key checking; a defaults_version field guards
against stale config files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

DEFAULTS_VERSION = 1


@dataclass
class Config:
    defaults_version: int = DEFAULTS_VERSION

    # coarse-to-fine ICP schedule
    s_vox: tuple = (0.04, 0.02)
    d_max: tuple = (0.05, 0.03)
    icp_iters: tuple = (50, 150)
    lr: float = 1e-3

    # energy weights
    lambda_color: float = 0.05
    lambda_corr: float = 1.0
    lambda_tv: float = 10.0

    # confidence filter percentiles
    theta_loc: float = 15.0
    theta_cnt: float = 50.0

    # merge gating
    theta_d: float = 75.0
    theta_c: float = 75.0
    sigma_d: float = 2.5
    sigma_c: float = 1.5

    # sparse correspondences
    max_correspondences: int = 5000
    max_corr_pairs: int = 20

    # global refinement
    global_iters: int = 100
    lambda_anchor: float = 50.0
    global_k: int = 5
    anchor_samples: int = 2048

    # implementation knobs
    filter_s_vox: float = 0.04
    filter_scope: str = "global"  # or "per-frame"
    stride: int = 1
    normals_k: int = 16
    normals_refresh_every: int = 5
    color_grad_radius_factor: float = 2.0

    # deformation field capacity
    field_levels: int = 8
    field_features: int = 2
    field_table_log2: int = 16
    field_hidden: int = 64
    field_view_dim: int = 8
    field_out_scale: float = 0.1

    # inverse field training
    pairs_per_frame: int = 4096
    inverse_iters: int = 2000
    inverse_batch: int = 2048
    inverse_tv_points: int = 4096
    inverse_tv_batch: int = 1024

    # splat export
    splat_target_count: int = 200000
    splat_knn: int = 10

    seed: int = 0
    threads: int = 0  # 0 = available parallelism

    def validate(self) -> "Config":
        if self.defaults_version != DEFAULTS_VERSION:
            raise ConfigError(
                f"config defaults_version {self.defaults_version} != {DEFAULTS_VERSION}"
            )
        if not (len(self.s_vox) == len(self.d_max) == len(self.icp_iters)):
            raise ConfigError("s_vox, d_max and icp_iters schedules must have equal length")
        for name in ("lambda_color", "lambda_corr", "lambda_tv", "lambda_anchor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("theta_loc", "theta_cnt", "theta_d", "theta_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ConfigError(f"{name} must be a percentile in [0, 100]")
        if any(s <= 0 for s in self.s_vox) or any(d <= 0 for d in self.d_max):
            raise ConfigError("schedule entries must be positive")
        if self.filter_scope not in ("global", "per-frame"):
            raise ConfigError("filter_scope must be 'global' or 'per-frame'")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("s_vox", "d_max", "icp_iters"):
            d[key] = list(d[key])
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @staticmethod
    def from_dict(data: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(Config)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("s_vox", "d_max", "icp_iters"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return Config(**kwargs).validate()

    @staticmethod
    def load(path) -> "Config":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid config JSON: {exc}") from exc
        return Config.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
