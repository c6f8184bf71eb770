"""Shared random-model helpers for the test suite."""

from __future__ import annotations

import numpy as np

from semslam.geometry import Camera, DualQuadric, Plane, Pose


def random_rotation(rng: np.random.Generator, max_angle: float = 2.0) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    from semslam.geometry import so3_exp
    return so3_exp(angle * axis)


def random_pose(rng: np.random.Generator, max_angle: float = 2.0,
                translation_scale: float = 2.0) -> Pose:
    return Pose(random_rotation(rng, max_angle),
                rng.uniform(-translation_scale, translation_scale, size=3))


def random_plane(rng: np.random.Generator, d_scale: float = 3.0) -> Plane:
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    return Plane(np.append(n, rng.uniform(-d_scale, d_scale)))


def random_quadric(rng: np.random.Generator, axis_range=(0.2, 2.0)) -> DualQuadric:
    return DualQuadric(random_pose(rng), np.log(rng.uniform(*axis_range, size=3)))


def default_camera() -> Camera:
    return Camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
