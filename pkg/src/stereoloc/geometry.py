"""Rigid-body transforms, pinhole projection and stereo depth arithmetic.

Rotations are stored as unit quaternions (w, x, y, z) and renormalized after
every composition. Quaternions are kept in a canonical sign (w >= 0) so that
serialization of equal rotations is byte-stable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonPositiveDepth(ValueError):
    """Raised when a projection or backprojection is asked for z <= 0."""


class NonPositiveDisparity(ValueError):
    """Raised when stereo depth is requested for disparity <= 0."""


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4).copy()
    n = float(np.linalg.norm(q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    # Only touch the bits when the norm has actually drifted.
    if abs(n - 1.0) > 1e-12:
        q /= n
    nz = np.nonzero(q)[0]
    if q[nz[0]] < 0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return _canonical_quat(q)


def rotvec_to_matrix(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a rotation vector (axis * angle)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    if theta < 1e-12:
        K = skew(phi)
        return np.eye(3) + K + 0.5 * (K @ K)
    axis = phi / theta
    K = skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: x_out = R(q) @ x_in + t."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _canonical_quat(self.q))
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        object.__setattr__(self, "t", t)
        self.q.flags.writeable = False
        self.t.flags.writeable = False

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(matrix_to_quat(R), t)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one 3-vector or an (N, 3) array of points."""
        R = self.rotation_matrix()
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return R @ pts + self.t
        return pts @ R.T + self.t

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return 2.0 * float(np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0])))

    def center(self) -> np.ndarray:
        """Origin of the source frame expressed in the target frame inverse.

        For a world->camera pose this is the camera center in world
        coordinates.
        """
        R = self.rotation_matrix()
        return -(R.T @ self.t)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform equivalent to applying b first, then a: (a*b)(x) = a(b(x))."""
    q = quat_mul(a.q, b.q)
    t = a.rotation_matrix() @ b.t + a.t
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    qc = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    R = p.rotation_matrix()
    return Pose(qc, -(R.T @ p.t))


def relative(a: Pose, b: Pose) -> Pose:
    """inverse(a) composed with b."""
    return compose(inverse(a), b)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair sharing one set of intrinsics."""

    intrinsics: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")

    @property
    def fb(self) -> float:
        return self.intrinsics.fx * self.baseline


def project(point: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame 3D point to pixel coordinates."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= 0:
        raise NonPositiveDepth(f"z={z}")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def project_many(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels (N,2), valid mask for z > 0)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    uv = np.stack([k.fx * pts[:, 0] / zs + k.cx, k.fy * pts[:, 1] / zs + k.cy], axis=1)
    return uv, valid


def backproject(pixel: np.ndarray, depth: float, k: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel at the given depth back into the camera frame."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth={depth}")
    u, v = np.asarray(pixel, dtype=np.float64)
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


def stereo_depth(disparity: float, rig: StereoRig) -> float:
    if disparity <= 0:
        raise NonPositiveDisparity(f"disparity={disparity}")
    return rig.fb / disparity
