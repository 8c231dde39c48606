"""Learnable deformation field: position -> se(3) twist.

A multiresolution hash grid feeds trilinearly interpolated features (optionally
concatenated with a per-view embedding) into a two-hidden-layer tanh MLP whose
zero-initialized head guarantees an exactly-zero twist at initialization.
Parameter gradients are hand-derived; there is no autodiff graph.

Evaluation positions are often fixed across many optimization steps, so the
hash/interpolation work is cached in an EvalPlan and reused.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)
_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)
_MAGIC = b"DAF1"


def compute_bbox(points: np.ndarray, pad_fraction: float = 0.05, pad_min: float = 0.05):
    """Axis-aligned bounds of a point set with padding; shape (2, 3)."""
    points = np.asarray(points, dtype=float)
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = np.maximum(pad_fraction * (hi - lo), pad_min)
    return np.stack([lo - pad, hi + pad])


@dataclass
class EvalPlan:
    """Cached hash indices and trilinear weights for a fixed point set."""

    points: np.ndarray  # clamped to the bounding box, (N, 3)
    indices: np.ndarray  # (L, N, 8) int64 table rows
    weights: np.ndarray  # (L, N, 8)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, sel) -> "EvalPlan":
        return EvalPlan(self.points[sel], self.indices[:, sel], self.weights[:, sel])


class DeformationField:
    """Hash-grid MLP predicting exponential coordinates, with analytic gradients."""

    def __init__(
        self,
        bbox: np.ndarray,
        levels: int = 8,
        features: int = 2,
        table_log2: int = 16,
        hidden: int = 64,
        view_dim: int = 0,
        n_views: int = 0,
        out_scale: float = 0.1,
        finest_cell: float = 0.02,
        seed: int = 0,
    ):
        self.bbox = np.asarray(bbox, dtype=float).reshape(2, 3)
        self.levels = int(levels)
        self.features = int(features)
        self.table_size = 1 << int(table_log2)
        self.hidden = int(hidden)
        self.view_dim = int(view_dim)
        self.n_views = int(n_views)
        self.out_scale = float(out_scale)
        if self.view_dim > 0 and self.n_views <= 0:
            raise ValueError("view_dim > 0 requires n_views")

        diag = float(np.linalg.norm(self.bbox[1] - self.bbox[0]))
        coarse = max(diag / 8.0, finest_cell)
        fine = min(finest_cell, coarse)
        if self.levels == 1:
            self.cells = np.array([fine])
        else:
            ratio = (fine / coarse) ** (1.0 / (self.levels - 1))
            self.cells = coarse * ratio ** np.arange(self.levels)

        self.in_dim = self.levels * self.features + self.view_dim
        self._build_layout()
        self.params = np.zeros(self.n_params)
        self._init_params(seed)

    # -- parameter layout -------------------------------------------------

    def _build_layout(self):
        sizes = {
            "tables": self.levels * self.table_size * self.features,
            "w1": self.in_dim * self.hidden,
            "b1": self.hidden,
            "w2": self.hidden * self.hidden,
            "b2": self.hidden,
            "w3": self.hidden * 6,
            "b3": 6,
            "emb": self.n_views * self.view_dim,
        }
        self._slices = {}
        offset = 0
        for name, size in sizes.items():
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self.n_params = offset

    def _view(self, params: np.ndarray, name: str) -> np.ndarray:
        shapes = {
            "tables": (self.levels, self.table_size, self.features),
            "w1": (self.in_dim, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.hidden),
            "b2": (self.hidden,),
            "w3": (self.hidden, 6),
            "b3": (6,),
            "emb": (self.n_views, self.view_dim),
        }
        return params[self._slices[name]].reshape(shapes[name])

    def _init_params(self, seed: int):
        rng = np.random.default_rng(seed)
        self._view(self.params, "tables")[:] = rng.uniform(
            -1e-4, 1e-4, size=(self.levels, self.table_size, self.features)
        )
        self._view(self.params, "w1")[:] = rng.normal(
            0.0, 1.0 / np.sqrt(self.in_dim), size=(self.in_dim, self.hidden)
        )
        self._view(self.params, "w2")[:] = rng.normal(
            0.0, 1.0 / np.sqrt(self.hidden), size=(self.hidden, self.hidden)
        )
        if self.n_views:
            self._view(self.params, "emb")[:] = rng.normal(
                0.0, 0.01, size=(self.n_views, self.view_dim)
            )
        # w3 and b3 stay zero: identity deformation at step 0.

    def zero_grad(self) -> np.ndarray:
        return np.zeros(self.n_params)

    # -- evaluation --------------------------------------------------------

    def prepare(self, points: np.ndarray) -> EvalPlan:
        """Hash and interpolation setup for a fixed point set."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        clamped = np.clip(points, self.bbox[0], self.bbox[1])
        n = len(clamped)
        idx = np.empty((self.levels, n, 8), dtype=np.int64)
        wts = np.empty((self.levels, n, 8))
        rel = clamped - self.bbox[0]
        for lvl in range(self.levels):
            scaled = rel / self.cells[lvl]
            base = np.floor(scaled).astype(np.int64)
            frac = scaled - base
            corners = base[:, None, :] + _CORNERS[None, :, :]
            hashed = corners.astype(np.uint64) * _HASH_PRIMES
            idx[lvl] = (hashed[..., 0] ^ hashed[..., 1] ^ hashed[..., 2]).astype(np.int64) & (
                self.table_size - 1
            )
            w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
            wts[lvl] = w[..., 0] * w[..., 1] * w[..., 2]
        return EvalPlan(points=clamped, indices=idx, weights=wts)

    def _features(self, plan: EvalPlan, view_ids) -> np.ndarray:
        tables = self._view(self.params, "tables")
        x = np.empty((len(plan), self.in_dim))
        for lvl in range(self.levels):
            gathered = tables[lvl][plan.indices[lvl]]  # (N, 8, F)
            x[:, lvl * self.features : (lvl + 1) * self.features] = np.einsum(
                "nkf,nk->nf", gathered, plan.weights[lvl]
            )
        if self.view_dim:
            if view_ids is None:
                raise ValueError("field built with view embeddings requires view indices")
            x[:, self.levels * self.features :] = self._view(self.params, "emb")[view_ids]
        elif view_ids is not None:
            raise ValueError("view index given to a field built without embeddings")
        return x

    def eval_prepared(self, plan: EvalPlan, view_ids=None):
        """Twists (N, 6) plus the activation cache needed for backward."""
        x = self._features(plan, view_ids)
        w1, b1 = self._view(self.params, "w1"), self._view(self.params, "b1")
        w2, b2 = self._view(self.params, "w2"), self._view(self.params, "b2")
        w3, b3 = self._view(self.params, "w3"), self._view(self.params, "b3")
        h1 = np.tanh(x @ w1 + b1)
        h2 = np.tanh(h1 @ w2 + b2)
        xi = (h2 @ w3 + b3) * self.out_scale
        return xi, {"x": x, "h1": h1, "h2": h2, "view_ids": view_ids}

    def eval(self, points: np.ndarray, view=None) -> np.ndarray:
        """Twists for arbitrary points; scalar view broadcasts over the batch."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(np.isfinite(points)):
            raise ValueError("field eval: non-finite points")
        view_ids = self._as_view_ids(view, len(points))
        xi, _ = self.eval_prepared(self.prepare(points), view_ids)
        return xi

    def _as_view_ids(self, view, n):
        if view is None:
            return None
        view_ids = np.asarray(view, dtype=np.int64)
        return np.full(n, view_ids, dtype=np.int64) if view_ids.ndim == 0 else view_ids

    def backward_prepared(self, plan: EvalPlan, cache: dict, upstream: np.ndarray, grad: np.ndarray):
        """Accumulate d(sum_n upstream_n . xi_n)/d params into `grad`."""
        if grad.shape != self.params.shape:
            raise ValueError("gradient buffer shape mismatch")
        x, h1, h2 = cache["x"], cache["h1"], cache["h2"]
        w1 = self._view(self.params, "w1")
        w2 = self._view(self.params, "w2")
        w3 = self._view(self.params, "w3")

        g3 = np.asarray(upstream, dtype=float) * self.out_scale
        self._view(grad, "w3")[:] += h2.T @ g3
        self._view(grad, "b3")[:] += g3.sum(axis=0)
        gpre2 = (g3 @ w3.T) * (1.0 - h2 * h2)
        self._view(grad, "w2")[:] += h1.T @ gpre2
        self._view(grad, "b2")[:] += gpre2.sum(axis=0)
        gpre1 = (gpre2 @ w2.T) * (1.0 - h1 * h1)
        self._view(grad, "w1")[:] += x.T @ gpre1
        self._view(grad, "b1")[:] += gpre1.sum(axis=0)
        gx = gpre1 @ w1.T

        gtables = self._view(grad, "tables")
        for lvl in range(self.levels):
            gfeat = gx[:, lvl * self.features : (lvl + 1) * self.features]
            updates = plan.weights[lvl][:, :, None] * gfeat[:, None, :]  # (N, 8, F)
            flat = plan.indices[lvl].ravel()
            upd = updates.reshape(-1, self.features)
            for f in range(self.features):
                gtables[lvl, :, f] += np.bincount(
                    flat, weights=upd[:, f], minlength=self.table_size
                )
        if self.view_dim:
            gemb = self._view(grad, "emb")
            np.add.at(gemb, cache["view_ids"], gx[:, self.levels * self.features :])

    def eval_with_grad(
        self, points: np.ndarray, upstream: np.ndarray, grad: np.ndarray, view=None,
        need_dxi_dp: bool = False,
    ):
        """One-shot eval + parameter-gradient accumulation (spec surface).

        Returns (xi, dxi_dp) where dxi_dp is (N, 6, 3) when requested.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        view_ids = self._as_view_ids(view, len(points))
        plan = self.prepare(points)
        xi, cache = self.eval_prepared(plan, view_ids)
        self.backward_prepared(plan, cache, np.atleast_2d(upstream), grad)
        dxi_dp = self.position_jacobian(plan, cache) if need_dxi_dp else None
        return xi, dxi_dp

    def position_jacobian(self, plan: EvalPlan, cache: dict) -> np.ndarray:
        """d xi / d p, shape (N, 6, 3). Piecewise constant per trilinear cell."""
        tables = self._view(self.params, "tables")
        n = len(plan)
        dx_dp = np.zeros((n, self.in_dim, 3))
        rel = plan.points - self.bbox[0]
        for lvl in range(self.levels):
            scaled = rel / self.cells[lvl]
            frac = scaled - np.floor(scaled)
            w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
            sign = np.where(_CORNERS[None, :, :] == 1, 1.0, -1.0)
            dw = np.empty((n, 8, 3))
            dw[:, :, 0] = sign[..., 0] * w[..., 1] * w[..., 2]
            dw[:, :, 1] = sign[..., 1] * w[..., 0] * w[..., 2]
            dw[:, :, 2] = sign[..., 2] * w[..., 0] * w[..., 1]
            dw /= self.cells[lvl]
            gathered = tables[lvl][plan.indices[lvl]]  # (N, 8, F)
            dx_dp[:, lvl * self.features : (lvl + 1) * self.features, :] = np.einsum(
                "nkf,nkd->nfd", gathered, dw
            )
        w1 = self._view(self.params, "w1")
        w2 = self._view(self.params, "w2")
        w3 = self._view(self.params, "w3")
        h1, h2 = cache["h1"], cache["h2"]
        dpre1 = np.einsum("ndk,dh->nhk", dx_dp, w1)
        dh1 = (1.0 - h1 * h1)[:, :, None] * dpre1
        dpre2 = np.einsum("nhk,hg->ngk", dh1, w2)
        dh2 = (1.0 - h2 * h2)[:, :, None] * dpre2
        return self.out_scale * np.einsum("nhk,ho->nok", dh2, w3)

    # -- twist total variation ---------------------------------------------

    def prepare_tv_plans(self, points: np.ndarray, s_vox: float) -> list[EvalPlan]:
        """Plans for each point and its 6 axis-aligned neighbors at distance s_vox."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        plans = [self.prepare(points)]
        for axis in range(3):
            for sign in (1.0, -1.0):
                offset = np.zeros(3)
                offset[axis] = sign * s_vox
                plans.append(self.prepare(points + offset))
        return plans

    def tv_loss(
        self, points: np.ndarray, s_vox: float, grad: np.ndarray | None = None,
        view_ids=None, plans: list[EvalPlan] | None = None, weight: float = 1.0,
    ) -> float:
        """Mean over points of the summed squared twist differences to the six
        axis-aligned neighbors at distance s_vox.

        Returns the unweighted value; accumulated gradients are scaled by
        `weight` so callers can fold in a loss coefficient without a second
        parameter-sized buffer.
        """
        if plans is None:
            plans = self.prepare_tv_plans(points, s_vox)
        n = len(plans[0])
        if n == 0:
            raise ValueError("tv_loss: empty point set")
        xi_c, cache_c = self.eval_prepared(plans[0], view_ids)
        value = 0.0
        upstream_c = np.zeros_like(xi_c)
        for plan in plans[1:]:
            xi_o, cache_o = self.eval_prepared(plan, view_ids)
            diff = xi_c - xi_o
            value += float(np.einsum("ni,ni->", diff, diff))
            if grad is not None:
                upstream_c += (2.0 * weight / n) * diff
                self.backward_prepared(plan, cache_o, (-2.0 * weight / n) * diff, grad)
        if grad is not None:
            self.backward_prepared(plans[0], cache_c, upstream_c, grad)
        return value / n

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = struct.pack(
            "<4sIIIIIIId",
            _MAGIC,
            1,
            self.levels,
            self.features,
            self.table_size,
            self.hidden,
            self.view_dim,
            self.n_views,
            self.out_scale,
        )
        header += self.bbox.astype("<f8").tobytes()
        header += self.cells.astype("<f8").tobytes()
        body = self.params.astype("<f4").tobytes()
        return header + struct.pack("<Q", len(self.params)) + body

    @staticmethod
    def from_bytes(blob: bytes) -> "DeformationField":
        head_fmt = "<4sIIIIIIId"
        head_size = struct.calcsize(head_fmt)
        magic, version, levels, features, table_size, hidden, view_dim, n_views, out_scale = (
            struct.unpack_from(head_fmt, blob)
        )
        if magic != _MAGIC or version != 1:
            raise ValueError("not a deformation-field checkpoint")
        off = head_size
        bbox = np.frombuffer(blob, dtype="<f8", count=6, offset=off).reshape(2, 3).copy()
        off += 48
        cells = np.frombuffer(blob, dtype="<f8", count=levels, offset=off).copy()
        off += 8 * levels
        (n_params,) = struct.unpack_from("<Q", blob, off)
        off += 8
        field = DeformationField.__new__(DeformationField)
        field.bbox = bbox
        field.levels = levels
        field.features = features
        field.table_size = table_size
        field.hidden = hidden
        field.view_dim = view_dim
        field.n_views = n_views
        field.out_scale = out_scale
        field.cells = cells
        field.in_dim = levels * features + view_dim
        field._build_layout()
        if field.n_params != n_params:
            raise ValueError("deformation-field checkpoint has inconsistent sizes")
        field.params = (
            np.frombuffer(blob, dtype="<f4", count=n_params, offset=off).astype(np.float64)
        )
        return field
