"""SE(3)/se(3) arithmetic: twists, rigid transforms, exp/log maps and point Jacobians.

Twists are 6-vectors xi = (omega, v) with the rotation part first. All maps
are closed form (Rodrigues plus the V-matrix) with series fallbacks below a
small-angle threshold so evaluation stays continuous at ||omega|| -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Switch to series expansions below this rotation angle (radians).
SMALL_ANGLE = 1e-6
# The coefficient-derivative helpers cancel catastrophically much earlier.
_SMALL_ANGLE_DERIV = 0.05
_SMALL_ANGLE_VINV = 0.01


@dataclass(frozen=True)
class Twist:
    """se(3) element in exponential coordinates: rotation omega, translation v."""

    omega: np.ndarray
    v: np.ndarray

    @staticmethod
    def from_vector(xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Twist(omega=xi[:3].copy(), v=xi[3:].copy())

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: rotation matrix R and translation t, acting as p -> Rp + t."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self o other, i.e. the transform applying `other` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def orthonormality_error(self) -> float:
        """Frobenius deviation of R^T R from identity plus |det - 1|."""
        err = np.linalg.norm(self.R.T @ self.R - np.eye(3))
        return float(err + abs(np.linalg.det(self.R) - 1.0))


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices of one or many 3-vectors; shape (..., 3, 3)."""
    omega = np.asarray(omega, dtype=float)
    out = np.zeros(omega.shape[:-1] + (3, 3))
    x, y, z = omega[..., 0], omega[..., 1], omega[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def _coeffs(theta_sq: np.ndarray):
    """Rodrigues/V-matrix coefficients A, B, C as functions of theta^2.

    A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3, with series below
    SMALL_ANGLE to avoid 0/0.
    """
    theta_sq = np.asarray(theta_sq, dtype=float)
    small = theta_sq < SMALL_ANGLE**2
    # Guard the general branch against division by ~0; masked out below.
    safe = np.where(small, 1.0, theta_sq)
    theta = np.sqrt(safe)
    sin_t = np.sin(theta)
    # 1 - cos via the half-angle identity: no cancellation for small theta.
    sin_half = np.sin(0.5 * theta)
    one_minus_cos = 2.0 * sin_half * sin_half
    a = np.where(small, 1.0 - theta_sq / 6.0 + theta_sq**2 / 120.0, sin_t / theta)
    b = np.where(small, 0.5 - theta_sq / 24.0 + theta_sq**2 / 720.0, one_minus_cos / safe)
    c = np.where(
        small,
        1.0 / 6.0 - theta_sq / 120.0 + theta_sq**2 / 5040.0,
        (theta - sin_t) / (safe * theta),
    )
    return a, b, c


def _coeff_derivs(theta_sq: np.ndarray):
    """dA/dtheta / theta and likewise for B, C (smooth functions of theta^2)."""
    theta_sq = np.asarray(theta_sq, dtype=float)
    small = theta_sq < _SMALL_ANGLE_DERIV**2
    safe = np.where(small, 1.0, theta_sq)
    theta = np.sqrt(safe)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    sin_half = np.sin(0.5 * theta)
    one_minus_cos = 2.0 * sin_half * sin_half
    da = np.where(
        small,
        -1.0 / 3.0 + theta_sq / 30.0 - theta_sq**2 / 840.0,
        (theta * cos_t - sin_t) / (safe * theta),
    )
    db = np.where(
        small,
        -1.0 / 12.0 + theta_sq / 180.0 - theta_sq**2 / 6720.0,
        (theta * sin_t - 2.0 * one_minus_cos) / (safe * safe),
    )
    dc = np.where(
        small,
        -1.0 / 60.0 + theta_sq / 1260.0 - theta_sq**2 / 60480.0,
        (theta * one_minus_cos - 3.0 * (theta - sin_t)) / (safe * safe * theta),
    )
    return da, db, dc


def exp_many(xi: np.ndarray):
    """Batched SE(3) exponential: xi (N, 6) -> rotations (N, 3, 3), translations (N, 3)."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist_exp: non-finite twist components")
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    omega, v = xi[:, :3], xi[:, 3:]
    theta_sq = np.einsum("ni,ni->n", omega, omega)
    a, b, c = _coeffs(theta_sq)
    k = hat(omega)
    k2 = k @ k
    eye = np.eye(3)
    rot = eye + a[:, None, None] * k + b[:, None, None] * k2
    vmat = eye + b[:, None, None] * k + c[:, None, None] * k2
    trans = np.einsum("nij,nj->ni", vmat, v)
    if single:
        return rot[0], trans[0]
    return rot, trans


def twist_exp(xi: Twist | np.ndarray) -> RigidTransform:
    """SE(3) exponential map of a single twist."""
    vec = xi.vector if isinstance(xi, Twist) else np.asarray(xi, dtype=float).reshape(6)
    rot, trans = exp_many(vec)
    return RigidTransform(rot, trans)


def log_many(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Batched SE(3) logarithm: (N, 3, 3), (N, 3) -> twists (N, 6).

    Requires rotation angles below pi - 1e-6 (branch ambiguity at pi).
    """
    rot = np.asarray(rot, dtype=float)
    trans = np.asarray(trans, dtype=float)
    single = rot.ndim == 2
    rot = rot.reshape(-1, 3, 3)
    trans = trans.reshape(-1, 3)

    # vee((R - R^T)/2) = sin(theta) * axis
    s_vec = 0.5 * np.stack(
        [
            rot[:, 2, 1] - rot[:, 1, 2],
            rot[:, 0, 2] - rot[:, 2, 0],
            rot[:, 1, 0] - rot[:, 0, 1],
        ],
        axis=1,
    )
    sin_t = np.linalg.norm(s_vec, axis=1)
    cos_t = 0.5 * (np.trace(rot, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if np.any(theta >= np.pi - 1e-6):
        raise ValueError("twist_log: rotation angle at or near pi (branch ambiguity)")

    small = theta < SMALL_ANGLE
    # omega = theta / sin(theta) * s_vec; the ratio -> 1 + theta^2/6 for small theta.
    ratio = np.where(small, 1.0 + theta**2 / 6.0, theta / np.where(small, 1.0, sin_t))
    omega = s_vec * ratio[:, None]

    theta_sq = theta**2
    small_v = theta < _SMALL_ANGLE_VINV
    safe = np.where(small_v, 1.0, theta_sq)
    # 1 - (t/2) cot(t/2), the V-inverse coefficient numerator.
    half = 0.5 * np.sqrt(safe)
    cot_term = 1.0 - half * np.cos(half) / np.where(small_v, 1.0, np.sin(half))
    e = np.where(
        small_v,
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq**2 / 30240.0,
        cot_term / safe,
    )
    k = hat(omega)
    vinv = np.eye(3) - 0.5 * k + e[:, None, None] * (k @ k)
    v = np.einsum("nij,nj->ni", vinv, trans)
    xi = np.concatenate([omega, v], axis=1)
    return xi[0] if single else xi


def twist_log(transform: RigidTransform) -> Twist:
    """SE(3) logarithm of a single rigid transform."""
    return Twist.from_vector(log_many(transform.R, transform.t))


def apply_transform(transform: RigidTransform, p: np.ndarray) -> np.ndarray:
    """Apply R p + t to one point or an (N, 3) array of points."""
    return transform.apply(p)


def _series_action_jacobian(omega, x, c1, c2, d1, d2):
    """d/d omega of [x + c1(t) (omega x x) + c2(t) (omega x (omega x x))].

    c1, c2 are coefficient values per row and d1, d2 their theta-derivatives
    divided by theta. Shapes: omega, x (N, 3); coefficients (N,). Returns (N, 3, 3).
    """
    wx = np.cross(omega, x)
    wwx = np.cross(omega, wx)
    hx = hat(x)
    hwx = hat(wx)
    jac = np.einsum("ni,nj->nij", wx, d1[:, None] * omega)
    jac += np.einsum("ni,nj->nij", wwx, d2[:, None] * omega)
    jac -= c1[:, None, None] * hx
    jac -= c2[:, None, None] * (hwx + hat(omega) @ hx)
    return jac


def transform_point_jacobians(xi: np.ndarray, points: np.ndarray):
    """Batched derivative of exp(xi) acting on points.

    Returns (moved, jac) with moved (N, 3) = exp(xi_i) p_i and jac (N, 3, 6) =
    d moved / d xi_i. Used by every loss differentiating through deformed
    positions.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    omega, v = xi[:, :3], xi[:, 3:]
    theta_sq = np.einsum("ni,ni->n", omega, omega)
    a, b, c = _coeffs(theta_sq)
    da, db, dc = _coeff_derivs(theta_sq)

    wp = np.cross(omega, points)
    wwp = np.cross(omega, wp)
    wv = np.cross(omega, v)
    wwv = np.cross(omega, wv)
    rot_p = points + a[:, None] * wp + b[:, None] * wwp
    v_v = v + b[:, None] * wv + c[:, None] * wwv
    moved = rot_p + v_v

    jac = np.empty((xi.shape[0], 3, 6))
    jac[:, :, :3] = _series_action_jacobian(omega, points, a, b, da, db)
    jac[:, :, :3] += _series_action_jacobian(omega, v, b, c, db, dc)
    # d moved / dv = V(omega)
    k = hat(omega)
    vmat = np.eye(3) + b[:, None, None] * k + c[:, None, None] * (k @ k)
    jac[:, :, 3:] = vmat
    return moved, jac
