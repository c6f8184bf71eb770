"""Manifold geometry: SE(3) poses, planes on the unit sphere, bounded dual
quadrics, conic projection, bounding volumes, IoU and point-cloud registration.

Conventions used throughout the package:
  * A ``Pose`` maps local-frame points into parent-frame points,
    ``x_parent = R @ x_local + t``.  A camera pose therefore maps
    camera-frame points to world-frame points; world-to-camera is its
    inverse.
  * Pose tangent vectors are ordered ``(rotation, translation)``:
    ``delta[:3]`` is the so(3) part, ``delta[3:]`` the translation part.
  * Planes are homogeneous 4-vectors ``(a, b, c, d)`` with ``ax+by+cz+d=0``
    and a unit normal ``(a, b, c)``.
  * Dual quadrics are bounded ellipsoids stored as a rigid frame plus the
    natural log of the semi-axis lengths; the additive update on the log
    keeps the dual-matrix eigen-signature at (3, 1) for every finite step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateInputError,
    DegenerateProjectionError,
    InvalidArgumentError,
)

_EPS = 1e-12


def skew(w: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, with a Taylor fallback for small angles."""
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < 1e-16:
        return np.eye(3) + W + 0.5 * (W @ W)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of an orthonormal matrix.

    At angle pi the axis sign is not unique; the branch with non-negative
    largest component is returned.
    """
    cos_theta = max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        # first-order: log(R) ~ vee(R - R^T)/2
        return vee
    if math.pi - theta < 1e-6:
        # near pi, R + I ~ 2*(axis axis^T); take the dominant column
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], _EPS))
        axis /= np.linalg.norm(axis)
        # recover the axis sign from the skew part where it is still informative
        if vee @ axis < 0:
            axis = -axis
        return theta * axis
    return (theta / math.sin(theta)) * vee


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < 1e-16:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    theta = math.sqrt(theta2)
    b = (1.0 - math.cos(theta)) / theta2
    c = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * W + c * (W @ W)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < 1e-16:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    theta = math.sqrt(theta2)
    half = 0.5 * theta
    cot = half / math.tan(half)
    coeff = (1.0 - cot) / theta2
    return np.eye(3) - 0.5 * W + coeff * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3): ``x_parent = rotation @ x_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> Pose:
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def exp(delta: np.ndarray) -> Pose:
        """SE(3) exponential of a 6-vector ``(rotation, translation)``."""
        delta = np.asarray(delta, dtype=float).reshape(6)
        w, v = delta[:3], delta[3:]
        return Pose(so3_exp(w), _so3_left_jacobian(w) @ v)

    @staticmethod
    def from_matrix(M: np.ndarray) -> Pose:
        return Pose(M[:3, :3], M[:3, 3])

    def log(self) -> np.ndarray:
        """Inverse of :meth:`exp`; 6-vector ``(rotation, translation)``."""
        w = so3_log(self.rotation)
        v = _so3_left_jacobian_inv(w) @ self.translation
        return np.concatenate([w, v])

    def compose(self, other: Pose) -> Pose:
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def validate(self, tol: float = 1e-9) -> None:
        R = self.rotation
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))):
            raise InvalidArgumentError("pose has non-finite entries")
        if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise InvalidArgumentError("rotation is not orthonormal with det +1")


def pose_retract(P: Pose, delta: np.ndarray) -> Pose:
    """Right retraction ``P * exp(delta)``."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise InvalidArgumentError("non-finite pose update")
    return P.compose(Pose.exp(delta))


def pose_log(P: Pose) -> np.ndarray:
    """6-vector such that ``pose_retract(identity, pose_log(P)) == P``."""
    return P.log()


def _orthonormal_complement(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing a unit 3-vector to a right-handed basis."""
    k = int(np.argmin(np.abs(n)))
    e = np.zeros(3)
    e[k] = 1.0
    m1 = np.cross(e, n)
    m1 /= np.linalg.norm(m1)
    m2 = np.cross(n, m1)
    return m1, m2


@dataclass(frozen=True)
class Plane:
    """Infinite plane as homogeneous coefficients with a unit normal part."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).reshape(4)
        nn = np.linalg.norm(c[:3])
        if not np.all(np.isfinite(c)) or nn < _EPS:
            raise InvalidArgumentError("plane normal is zero or non-finite")
        object.__setattr__(self, "coeffs", c / nn)

    @property
    def normal(self) -> np.ndarray:
        return self.coeffs[:3]

    @property
    def d(self) -> float:
        return float(self.coeffs[3])

    def unit4(self) -> np.ndarray:
        """The plane as a point on the unit 3-sphere."""
        return self.coeffs / np.linalg.norm(self.coeffs)

    def tangent_basis(self) -> np.ndarray:
        """4x3 orthonormal basis of the tangent space at :meth:`unit4`.

        Columns 0 and 1 tilt the normal, column 2 changes the distance, so a
        diagonal noise model on the chart maps onto (angle, angle, distance).
        """
        n, d = self.normal, self.d
        m1, m2 = _orthonormal_complement(n)
        s = math.sqrt(1.0 + d * d)
        B = np.zeros((4, 3))
        B[:3, 0] = m1
        B[:3, 1] = m2
        B[:3, 2] = -d * n / s
        B[3, 2] = 1.0 / s
        return B

    def retract(self, delta: np.ndarray) -> Plane:
        """Move along the unit sphere in this plane's chart."""
        delta = np.asarray(delta, dtype=float).reshape(3)
        if not np.all(np.isfinite(delta)):
            raise InvalidArgumentError("non-finite plane update")
        u = self.unit4()
        theta = np.linalg.norm(delta)
        if theta < _EPS:
            return Plane(u)
        w = self.tangent_basis() @ (delta / theta)
        return Plane(math.cos(theta) * u + math.sin(theta) * w)

    def local(self, other: Plane) -> np.ndarray:
        """Chart coordinates of ``other`` at this plane (sign-disambiguated).

        Inverse of :meth:`retract` for geodesic distances below pi/2.
        """
        u = self.unit4()
        q = other.unit4()
        if u @ q < 0.0:
            q = -q
        c = max(-1.0, min(1.0, float(u @ q)))
        theta = math.acos(c)
        resid = q - c * u
        if theta < 1e-9:
            return self.tangent_basis().T @ resid
        return self.tangent_basis().T @ resid * (theta / math.sin(theta))


def transform_plane(pi: Plane, T: Pose) -> Plane:
    """Image of a plane under the point map ``x -> T x`` (inverse-transpose action)."""
    return Plane(T.inverse().matrix().T @ pi.coeffs)


@dataclass(frozen=True)
class DualQuadric:
    """Bounded ellipsoid: rigid frame plus log semi-axis lengths."""

    frame: Pose
    log_semi_axes: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.log_semi_axes, dtype=float).reshape(3)
        if not np.all(np.isfinite(L)):
            raise InvalidArgumentError("non-finite quadric semi-axes")
        object.__setattr__(self, "log_semi_axes", L)

    @staticmethod
    def from_axes(frame: Pose, semi_axes: np.ndarray) -> DualQuadric:
        semi_axes = np.asarray(semi_axes, dtype=float)
        if np.any(semi_axes <= 0):
            raise InvalidArgumentError("semi-axes must be strictly positive")
        return DualQuadric(frame, np.log(semi_axes))

    @property
    def semi_axes(self) -> np.ndarray:
        return np.exp(self.log_semi_axes)

    @property
    def center(self) -> np.ndarray:
        return self.frame.translation


def quadric_retract(Q: DualQuadric, delta: np.ndarray) -> DualQuadric:
    """Update rule ``(T, L) -> (T * exp(d_se3), L + d_axes)``.

    ``delta[:6]`` moves the frame on SE(3), ``delta[6:]`` is additive on the
    log semi-axes, so boundedness holds for every finite step.
    """
    delta = np.asarray(delta, dtype=float).reshape(9)
    if not np.all(np.isfinite(delta)):
        raise InvalidArgumentError("non-finite quadric update")
    return DualQuadric(pose_retract(Q.frame, delta[:6]), Q.log_semi_axes + delta[6:])


def quadric_dual_matrix(Q: DualQuadric) -> np.ndarray:
    """4x4 symmetric dual form ``T diag(a^2, b^2, c^2, -1) T^T``."""
    H = Q.frame.matrix()
    D = np.diag(np.concatenate([Q.semi_axes ** 2, [-1.0]]))
    M = H @ D @ H.T
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise InvalidArgumentError("principal point outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class BBox:
    """Axis-aligned image box with detector confidence."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0
    class_id: int = -1

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidArgumentError("degenerate bounding box")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidArgumentError("score outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)])

    def contains(self, u: float, v: float) -> bool:
        return self.x_min <= u <= self.x_max and self.y_min <= v <= self.y_max


def bbox_iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Cuboid:
    """Oriented box: center, rotation and strictly positive half extents."""

    center: np.ndarray
    rotation: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if np.any(he <= 0):
            raise InvalidArgumentError("half extents must be strictly positive")
        object.__setattr__(self, "half_extents", he)

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))


def cuboid_iou(a: Cuboid, b: Cuboid) -> float:
    """Volume IoU of two cuboids evaluated as axis-aligned boxes in ``a``'s frame.

    ``b`` is assumed co-oriented with ``a`` (the shape-prior pipeline
    constructs both in the quadric frame); only its center is re-expressed.
    """
    cb = a.rotation.T @ (b.center - a.center)
    lo = np.maximum(-a.half_extents, cb - b.half_extents)
    hi = np.minimum(a.half_extents, cb + b.half_extents)
    edges = np.maximum(0.0, hi - lo)
    inter = float(np.prod(edges))
    return inter / (a.volume + b.volume - inter)


def quadric_cuboid(Q: DualQuadric) -> Cuboid:
    """Normalized enclosing cuboid: semi-axes scaled so the largest is 1."""
    axes = Q.semi_axes
    return Cuboid(Q.frame.translation, Q.frame.rotation, axes / axes.max())


def project_quadric(Q: DualQuadric, cam: Camera, camera_pose: Pose) -> np.ndarray:
    """Dual conic of a quadric seen by a camera, ``C = P Q P^T``.

    ``camera_pose`` maps camera-frame points to world-frame points.  The
    result is scaled so its (3,3) entry equals -1.
    """
    w2c = camera_pose.inverse()
    depth = float(w2c.apply(Q.center)[2])
    if depth <= 0.0:
        raise BehindCameraError(f"quadric center at depth {depth:.3f} m")
    P = cam.K @ w2c.matrix()[:3, :]
    C = P @ quadric_dual_matrix(Q) @ P.T
    C = 0.5 * (C + C.T)
    scale = np.linalg.norm(C)
    if abs(C[2, 2]) <= 1e-12 * scale:
        raise DegenerateProjectionError("conic has no bounded-ellipse normalization")
    C = C * (-1.0 / C[2, 2])
    _require_real_ellipse(C)
    return C


def _require_real_ellipse(C: np.ndarray) -> None:
    """Reject hyperbolic, parabolic and imaginary dual conics."""
    A = _adjugate3(C)
    two = A[:2, :2]
    det2 = two[0, 0] * two[1, 1] - two[0, 1] * two[1, 0]
    if det2 <= 1e-12 * max(np.linalg.norm(A) ** 2, _EPS):
        raise DegenerateProjectionError("projected conic is not elliptic")
    eig = np.linalg.eigvalsh(A)
    if eig[0] > 0.0 or eig[-1] < 0.0:
        raise DegenerateProjectionError("projected conic is imaginary")


def _adjugate3(M: np.ndarray) -> np.ndarray:
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            minor = np.delete(np.delete(M, i, axis=0), j, axis=1)
            out[j, i] = ((-1) ** (i + j)) * (minor[0, 0] * minor[1, 1] - minor[0, 1] * minor[1, 0])
    return out


def conic_to_bbox(C: np.ndarray) -> BBox:
    """Tight axis-aligned box of an ellipse given as a dual conic.

    The extreme vertical/horizontal tangent lines ``l`` satisfy
    ``l^T C l = 0``, which gives the box edges in closed form.
    """
    C = np.asarray(C, dtype=float)
    scale = np.linalg.norm(C)
    if abs(C[2, 2]) <= 1e-12 * scale:
        raise DegenerateProjectionError("conic has no bounded-ellipse normalization")
    C = C * (-1.0 / C[2, 2])
    _require_real_ellipse(C)
    disc_x = C[0, 2] ** 2 + C[0, 0]
    disc_y = C[1, 2] ** 2 + C[1, 1]
    if disc_x <= 0.0 or disc_y <= 0.0:
        raise DegenerateProjectionError("conic has no real axis-aligned tangents")
    rx, ry = math.sqrt(disc_x), math.sqrt(disc_y)
    return BBox(-C[0, 2] - rx, -C[1, 2] - ry, -C[0, 2] + rx, -C[1, 2] + ry)


@dataclass(frozen=True)
class Ellipsoid3:
    """Solid ellipsoid ``(x - center)^T shape (x - center) <= 1``."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        S = np.asarray(self.shape, dtype=float)
        object.__setattr__(self, "shape", 0.5 * (S + S.T))

    def principal_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """(radii, rotation): radii sorted descending, matching columns, det +1."""
        w, U = np.linalg.eigh(self.shape)
        if w[0] <= 0:
            raise DegenerateInputError("ellipsoid shape matrix is not positive definite")
        radii = 1.0 / np.sqrt(w)
        if np.linalg.det(U) < 0:
            U = U * np.array([1.0, 1.0, -1.0])
        return radii, U

    def contains(self, points: np.ndarray, slack: float = 1e-6) -> bool:
        diff = np.atleast_2d(points) - self.center
        vals = np.einsum("ni,ij,nj->n", diff, self.shape, diff)
        return bool(np.all(vals <= 1.0 + slack))

    @property
    def volume(self) -> float:
        radii, _ = self.principal_axes()
        return float(4.0 / 3.0 * math.pi * np.prod(radii))


def min_enclosing_ellipsoid(points: np.ndarray, tol: float = 1e-6,
                            max_iterations: int = 10_000) -> Ellipsoid3:
    """Minimum-volume enclosing ellipsoid via Khachiyan's barycentric iteration.

    Stops when the barycentric step norm drops below ``tol``; the final shape
    matrix is rescaled so every input satisfies the ellipsoid inequality
    exactly (containment slack <= 0).
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = P.shape
    if n < 4 or d != 3:
        raise DegenerateInputError("need at least 4 points in 3D")
    sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    if sv[2] <= 1e-10 * max(sv[0], _EPS):
        raise DegenerateInputError("points are coplanar or collinear")

    Q = np.vstack([P.T, np.ones(n)])
    u = np.full(n, 1.0 / n)
    for _ in range(max_iterations):
        V = (Q * u) @ Q.T
        M = np.einsum("ij,ij->j", Q, np.linalg.solve(V, Q))
        j = int(np.argmax(M))
        maximum = M[j]
        step = (maximum - d - 1.0) / ((d + 1.0) * (maximum - 1.0))
        new_u = (1.0 - step) * u
        new_u[j] += step
        err = np.linalg.norm(new_u - u)
        u = new_u
        if err < tol:
            break

    center = P.T @ u
    A = np.linalg.inv((P.T * u) @ P - np.outer(center, center)) / d
    A = 0.5 * (A + A.T)
    diff = P - center
    worst = float(np.max(np.einsum("ni,ij,nj->n", diff, A, diff)))
    if worst > 1.0:
        A = A / worst
    return Ellipsoid3(center, A)


def _tie_groups(lengths_a: np.ndarray, lengths_b: np.ndarray, rel_tol: float = 0.01) -> list[list[int]]:
    """Index groups where both sorted length sequences tie within rel_tol."""
    groups = [[0]]
    for i in range(1, 3):
        tied_a = abs(lengths_a[i - 1] - lengths_a[i]) <= rel_tol * max(lengths_a[i - 1], _EPS)
        tied_b = abs(lengths_b[i - 1] - lengths_b[i]) <= rel_tol * max(lengths_b[i - 1], _EPS)
        if tied_a and tied_b:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def _closest_block_rotation(G: np.ndarray, groups: list[list[int]]) -> np.ndarray:
    """Block-diagonal orthogonal O with det +1 maximizing trace(O @ G).

    Blocks follow the tie groups; within a block the optimum is a polar
    factor, across sign choices the determinant constraint is enforced by
    enumeration.
    """
    candidates = [np.eye(3)]
    for g in groups:
        new = []
        for base in candidates:
            idx = np.ix_(g, g)
            sub = G[np.ix_(g, g)]
            if len(g) == 3:
                U, _, Vt = np.linalg.svd(sub.T)
                for s in (1.0, -1.0):
                    O = base.copy()
                    O[idx] = U @ np.diag([1.0, 1.0, s]) @ Vt
                    new.append(O)
            elif len(g) == 2:
                U, _, Vt = np.linalg.svd(sub.T)
                for s in (1.0, -1.0):
                    O = base.copy()
                    O[idx] = U @ np.diag([1.0, s]) @ Vt
                    new.append(O)
            else:
                for s in (1.0, -1.0):
                    O = base.copy()
                    O[idx] = np.array([[s]])
                    new.append(O)
        candidates = new
    best, best_trace = None, -np.inf
    for O in candidates:
        if np.linalg.det(O) < 0:
            continue
        tr = float(np.trace(O @ G))
        if tr > best_trace:
            best, best_trace = O, tr
    return best


def register_pointcloud(cloud: np.ndarray, Q: DualQuadric) -> tuple[float, Pose, np.ndarray]:
    """Seven-parameter similarity aligning a canonical cloud to a quadric.

    The cloud's minimum enclosing ellipsoid is matched to the quadric's
    ellipsoid: axes correspond by descending length, the scale maps mean
    radius to mean semi-axis, and length ties (within 1%) leave a rotation
    freedom resolved toward the identity.

    Returns ``(scale, pose, transformed_cloud)`` with
    ``transformed = scale * R @ x + t``.
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    mee = min_enclosing_ellipsoid(cloud)
    radii, Rm = mee.principal_axes()

    axes = Q.semi_axes
    order = np.argsort(-axes, kind="stable")
    q_lengths = axes[order]
    Rq = Q.frame.rotation[:, order]
    if np.linalg.det(Rq) < 0:
        Rq = Rq * np.array([1.0, 1.0, -1.0])

    groups = _tie_groups(radii, q_lengths)
    O = _closest_block_rotation(Rm.T @ Rq, groups)
    R = Rq @ O @ Rm.T

    scale = float(np.mean(q_lengths) / np.mean(radii))
    t = Q.center - scale * R @ mee.center
    pose = Pose(R, t)
    return scale, pose, scale * cloud @ R.T + t
