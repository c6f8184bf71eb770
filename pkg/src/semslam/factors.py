"""Residual functions, noise models and factor types for the back-end graph.

Every factor exposes ``residual(values)`` plus ``jacobians(values)`` taken
with respect to each connected variable's tangent space.  The optimizer
consumes a residual ``r`` with noise ``Sigma`` as the Mahalanobis cost
``r^T Sigma^-1 r``, optionally re-weighted by a Huber loss on the whitened
norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import EvaluationError, InvalidArgumentError
from .geometry import BBox, Camera, Cuboid, DualQuadric, Plane, Pose

FD_STEP = 1e-6


# ---------------------------------------------------------------------------
# variable manifold dispatch

def tangent_dim(value) -> int:
    if isinstance(value, Pose):
        return 6
    if isinstance(value, DualQuadric):
        return 9
    if isinstance(value, Plane):
        return 3
    return 3  # 3D point


def retract_value(value, delta: np.ndarray):
    if isinstance(value, Pose):
        return geo.pose_retract(value, delta)
    if isinstance(value, DualQuadric):
        return geo.quadric_retract(value, delta)
    if isinstance(value, Plane):
        return value.retract(delta)
    return np.asarray(value, dtype=float) + delta


# ---------------------------------------------------------------------------
# noise models

@dataclass(frozen=True)
class NoiseModel:
    """Residual uncertainty: scalar sigma, per-dimension sigmas or covariance."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.kind in ("scalar-sigma", "diagonal"):
            if np.any(self.values <= 0):
                raise InvalidArgumentError("sigmas must be positive")
        elif self.kind == "full-covariance":
            cov = self.values
            if np.abs(cov - cov.T).max() > 1e-12:
                raise InvalidArgumentError("covariance must be symmetric")
            if np.any(np.linalg.eigvalsh(cov) <= 0):
                raise InvalidArgumentError("covariance must be positive definite")
        else:
            raise InvalidArgumentError(f"unknown noise kind {self.kind!r}")

    @staticmethod
    def sigma(s: float) -> NoiseModel:
        return NoiseModel("scalar-sigma", np.array([float(s)]))

    @staticmethod
    def diagonal(sigmas) -> NoiseModel:
        return NoiseModel("diagonal", np.asarray(sigmas, dtype=float))

    @staticmethod
    def covariance(cov) -> NoiseModel:
        return NoiseModel("full-covariance", np.asarray(cov, dtype=float))

    def whiten(self, r: np.ndarray) -> np.ndarray:
        """L^-1 r for Sigma = L L^T, so that |whiten(r)|^2 = r^T Sigma^-1 r."""
        if self.kind == "scalar-sigma":
            return r / self.values[0]
        if self.kind == "diagonal":
            return r / self.values
        L = np.linalg.cholesky(self.values)
        return np.linalg.solve(L, r)

    def whiten_jacobian(self, J: np.ndarray) -> np.ndarray:
        if self.kind == "scalar-sigma":
            return J / self.values[0]
        if self.kind == "diagonal":
            return J / self.values[:, None]
        L = np.linalg.cholesky(self.values)
        return np.linalg.solve(L, J)


def huber_weight(whitened_norm: float, width: float | None) -> float:
    """Scale on the whitened residual; squared cost grows linearly past width."""
    if width is None or whitened_norm <= width:
        return 1.0
    return width / whitened_norm


# ---------------------------------------------------------------------------
# residual functions

def point_reprojection(x: np.ndarray, camera_pose: Pose, cam: Camera,
                       z: np.ndarray) -> np.ndarray:
    """Pixel residual of a world point against its 2D observation."""
    x_c = camera_pose.inverse().apply(np.asarray(x, dtype=float))
    if x_c[2] <= 0.0:
        raise geo.BehindCameraError(f"point at depth {x_c[2]:.3f} m")
    u = cam.fx * x_c[0] / x_c[2] + cam.cx
    v = cam.fy * x_c[1] / x_c[2] + cam.cy
    return np.array([u, v]) - np.asarray(z, dtype=float)


def point_plane(x: np.ndarray, pi: Plane) -> float:
    """Signed orthogonal distance of a point from a plane."""
    x = np.asarray(x, dtype=float)
    return float(pi.normal @ x + pi.d)


def plane_parallel(pi1: Plane, pi2: Plane) -> float:
    """|n1 . n2| - 1; zero iff the normals are (anti-)parallel."""
    return abs(float(pi1.normal @ pi2.normal)) - 1.0


def plane_perpendicular(pi1: Plane, pi2: Plane) -> float:
    """n1 . n2; zero iff the normals are orthogonal."""
    return float(pi1.normal @ pi2.normal)


def tangency(pi: Plane, Q: DualQuadric) -> float:
    """pi^T Q_hat pi with the dual matrix normalized by its Frobenius norm."""
    Qd = geo.quadric_dual_matrix(Q)
    Qh = Qd / np.linalg.norm(Qd)
    return float(pi.coeffs @ Qh @ pi.coeffs)


def plane_observation(pi_r: Plane, T_w_r: Pose, T_w_c: Pose,
                      pi_obs: Plane) -> np.ndarray:
    """Tangent-space difference between the predicted and observed plane.

    The landmark plane lives in its reference keyframe; the prediction maps
    it into the observing camera frame and the residual is the sphere
    log-map in the predicted plane's chart (antipodal signs disambiguated).
    """
    T_r_c = T_w_c.inverse().compose(T_w_r)
    predicted = geo.transform_plane(pi_r, T_r_c)
    return predicted.local(pi_obs)


def quadric_observation(Q_r: DualQuadric, T_w_r: Pose, T_w_c: Pose,
                        cam: Camera, obs: BBox) -> float:
    """1 - IoU between the projected quadric's box and a detected box."""
    world_frame = T_w_r.compose(Q_r.frame)
    Q_w = DualQuadric(world_frame, Q_r.log_semi_axes)
    conic = geo.project_quadric(Q_w, cam, T_w_c)
    predicted = geo.conic_to_bbox(conic)
    return 1.0 - geo.bbox_iou(predicted, obs)


def shape_prior(Q: DualQuadric, model_cuboid: Cuboid) -> float:
    """1 - volume IoU of the normalized enclosing cuboids (axis ratios only)."""
    he_q = geo.quadric_cuboid(Q).half_extents
    he_m = model_cuboid.half_extents / model_cuboid.half_extents.max()
    a = Cuboid(np.zeros(3), np.eye(3), he_q)
    b = Cuboid(np.zeros(3), np.eye(3), he_m)
    return 1.0 - geo.cuboid_iou(a, b)


def between_pose(T_i: Pose, T_j: Pose, measured: Pose) -> np.ndarray:
    """SE(3) log of the discrepancy between a measured and predicted relative pose."""
    return geo.pose_log(measured.inverse().compose(T_i.inverse()).compose(T_j))


# ---------------------------------------------------------------------------
# factor types

class Factor:
    """Base: connected variable ids, a noise model and an optional Huber width."""

    variable_kinds: tuple[str, ...] = ()
    dim: int = 1

    def __init__(self, variable_ids, noise: NoiseModel, robust: float | None = None):
        self.variable_ids = tuple(variable_ids)
        if len(self.variable_ids) != len(self.variable_kinds):
            raise InvalidArgumentError(
                f"{type(self).__name__} expects {len(self.variable_kinds)} variables")
        self.noise = noise
        self.robust = robust

    def residual(self, values) -> np.ndarray:
        raise NotImplementedError

    def is_active(self, residual: np.ndarray) -> bool:
        """Factors on an information plateau can opt out for one iteration."""
        return True

    def jacobians(self, values) -> list[np.ndarray]:
        return numeric_jacobian(self, values)


def numeric_jacobian(factor: Factor, values, step: float = FD_STEP) -> list[np.ndarray]:
    """Central finite differences in each connected variable's tangent space."""
    values = list(values)
    base = np.atleast_1d(factor.residual(values))
    if not np.all(np.isfinite(base)):
        raise EvaluationError("residual is non-finite at the evaluation point")
    out = []
    for i, v in enumerate(values):
        d = tangent_dim(v)
        J = np.empty((base.size, d))
        delta = np.zeros(d)
        for j in range(d):
            delta[j] = step
            plus = np.atleast_1d(factor.residual(values[:i] + [retract_value(v, delta)] + values[i + 1:]))
            delta[j] = -step
            minus = np.atleast_1d(factor.residual(values[:i] + [retract_value(v, delta)] + values[i + 1:]))
            delta[j] = 0.0
            col = (plus - minus) / (2.0 * step)
            if not np.all(np.isfinite(col)):
                raise EvaluationError("residual is non-finite at a perturbed point")
            J[:, j] = col
        out.append(J)
    return out


def _plane_coeffs_jacobian(pi: Plane) -> np.ndarray:
    """d(stored coefficients)/d(chart delta), a 4x3 matrix."""
    B = pi.tangent_basis()
    s0 = 1.0 / math.sqrt(1.0 + pi.d ** 2)
    return B / s0 - np.outer(pi.coeffs, pi.normal @ B[:3, :])


class PointReprojectionFactor(Factor):
    """Observation of a 3D point as a pixel in a keyframe."""

    variable_kinds = ("point", "pose")
    dim = 2

    def __init__(self, point_id, pose_id, cam: Camera, pixel, noise, robust=None):
        super().__init__((point_id, pose_id), noise, robust)
        self.cam = cam
        self.pixel = np.asarray(pixel, dtype=float)

    def residual(self, values):
        x, T = values
        return point_reprojection(x, T, self.cam, self.pixel)

    def jacobians(self, values):
        x, T = values
        x_c = T.inverse().apply(np.asarray(x, dtype=float))
        if x_c[2] <= 0.0:
            raise geo.BehindCameraError(f"point at depth {x_c[2]:.3f} m")
        fx, fy = self.cam.fx, self.cam.fy
        z = x_c[2]
        J_proj = np.array([
            [fx / z, 0.0, -fx * x_c[0] / z ** 2],
            [0.0, fy / z, -fy * x_c[1] / z ** 2],
        ])
        J_point = J_proj @ T.rotation.T
        J_pose = J_proj @ np.hstack([geo.skew(x_c), -np.eye(3)])
        return [J_point, J_pose]


class PointPlaneFactor(Factor):
    """A mapped point lies on its associated plane."""

    variable_kinds = ("point", "plane")
    dim = 1

    def __init__(self, point_id, plane_id, noise, robust=None):
        super().__init__((point_id, plane_id), noise, robust)

    def residual(self, values):
        x, pi = values
        return np.array([point_plane(x, pi)])

    def jacobians(self, values):
        x, pi = values
        x_h = np.append(np.asarray(x, dtype=float), 1.0)
        return [pi.normal[None, :], (x_h @ _plane_coeffs_jacobian(pi))[None, :]]


class PlaneParallelFactor(Factor):
    """Manhattan constraint: two plane normals are (anti-)parallel."""

    variable_kinds = ("plane", "plane")
    dim = 1

    def __init__(self, plane_a, plane_b, noise, robust=None):
        super().__init__((plane_a, plane_b), noise, robust)

    def residual(self, values):
        return np.array([plane_parallel(values[0], values[1])])

    def jacobians(self, values):
        p1, p2 = values
        s = 1.0 if p1.normal @ p2.normal >= 0 else -1.0
        J1 = s * p2.normal @ _plane_coeffs_jacobian(p1)[:3, :]
        J2 = s * p1.normal @ _plane_coeffs_jacobian(p2)[:3, :]
        return [J1[None, :], J2[None, :]]


class PlanePerpendicularFactor(Factor):
    """Manhattan constraint: two plane normals are orthogonal."""

    variable_kinds = ("plane", "plane")
    dim = 1

    def __init__(self, plane_a, plane_b, noise, robust=None):
        super().__init__((plane_a, plane_b), noise, robust)

    def residual(self, values):
        return np.array([plane_perpendicular(values[0], values[1])])

    def jacobians(self, values):
        p1, p2 = values
        J1 = p2.normal @ _plane_coeffs_jacobian(p1)[:3, :]
        J2 = p1.normal @ _plane_coeffs_jacobian(p2)[:3, :]
        return [J1[None, :], J2[None, :]]


_SE3_GENERATORS = []
for _k in range(6):
    _G = np.zeros((4, 4))
    if _k < 3:
        _w = np.zeros(3)
        _w[_k] = 1.0
        _G[:3, :3] = geo.skew(_w)
    else:
        _G[_k - 3, 3] = 1.0
    _SE3_GENERATORS.append(_G)


class TangencyFactor(Factor):
    """Supporting-surface constraint between a plane and a quadric."""

    variable_kinds = ("plane", "quadric")
    dim = 1

    def __init__(self, plane_id, quadric_id, noise, robust=None):
        super().__init__((plane_id, quadric_id), noise, robust)

    def residual(self, values):
        return np.array([tangency(values[0], values[1])])

    def jacobians(self, values):
        pi, Q = values
        Qd = geo.quadric_dual_matrix(Q)
        nrm = np.linalg.norm(Qd)
        Qh = Qd / nrm
        p = pi.coeffs
        J_plane = 2.0 * (Qh @ p) @ _plane_coeffs_jacobian(pi)

        H = Q.frame.matrix()
        D = np.diag(np.concatenate([Q.semi_axes ** 2, [-1.0]]))
        J_q = np.empty(9)
        for k in range(6):
            G = _SE3_GENERATORS[k]
            dQd = H @ (G @ D + D @ G.T) @ H.T
            dQh = dQd / nrm - Qd * (np.sum(Qd * dQd) / nrm ** 3)
            J_q[k] = p @ dQh @ p
        for k in range(3):
            dD = np.zeros((4, 4))
            dD[k, k] = 2.0 * Q.semi_axes[k] ** 2
            dQd = H @ dD @ H.T
            dQh = dQd / nrm - Qd * (np.sum(Qd * dQd) / nrm ** 3)
            J_q[6 + k] = p @ dQh @ p
        return [J_plane[None, :], J_q[None, :]]


class PlaneObservationFactor(Factor):
    """Multi-edge plane observation: (plane, reference keyframe, observer)."""

    variable_kinds = ("plane", "pose", "pose")
    dim = 3

    def __init__(self, plane_id, ref_pose_id, obs_pose_id, observed: Plane, noise, robust=None):
        super().__init__((plane_id, ref_pose_id, obs_pose_id), noise, robust)
        self.observed = observed

    def residual(self, values):
        pi_r, T_w_r, T_w_c = values
        return plane_observation(pi_r, T_w_r, T_w_c, self.observed)


class QuadricObservationFactor(Factor):
    """Multi-edge bounding-box observation of a quadric (IoU error, score weight).

    The detector confidence ``s`` enters as information: sigma = s^-1/2, so
    the squared Mahalanobis term is ``s * (1 - IoU)^2``.  At IoU = 0 the
    residual carries no gradient and the factor reports itself inactive.
    """

    variable_kinds = ("quadric", "pose", "pose")
    dim = 1

    def __init__(self, quadric_id, ref_pose_id, obs_pose_id, cam: Camera,
                 observed: BBox, robust=None):
        noise = NoiseModel.sigma(observed.score ** -0.5)
        super().__init__((quadric_id, ref_pose_id, obs_pose_id), noise, robust)
        self.cam = cam
        self.observed = observed

    def residual(self, values):
        Q_r, T_w_r, T_w_c = values
        return np.array([quadric_observation(Q_r, T_w_r, T_w_c, self.cam, self.observed)])

    def is_active(self, residual):
        return residual[0] < 1.0


class ShapePriorFactor(Factor):
    """Unary prior tying the quadric's semi-axis ratios to a registered model."""

    variable_kinds = ("quadric",)
    dim = 1

    def __init__(self, quadric_id, model_cuboid: Cuboid, noise, robust=None):
        super().__init__((quadric_id,), noise, robust)
        self.model_cuboid = model_cuboid

    def residual(self, values):
        return np.array([shape_prior(values[0], self.model_cuboid)])


class BetweenPoseFactor(Factor):
    """Relative-pose (odometry) constraint between consecutive keyframes."""

    variable_kinds = ("pose", "pose")
    dim = 6

    def __init__(self, pose_i, pose_j, measured: Pose, noise, robust=None):
        super().__init__((pose_i, pose_j), noise, robust)
        self.measured = measured

    def residual(self, values):
        return between_pose(values[0], values[1], self.measured)
