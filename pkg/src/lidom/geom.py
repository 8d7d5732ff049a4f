"""Quaternion and rigid-pose algebra, in plain-number and tensor form.

Quaternions are Hamilton, scalar first (w, x, y, z).  A Pose is a unit
quaternion in canonical form (w >= 0) plus a translation; applying it maps a
point p to rotate(q, p) + t.  The *_t functions mirror the value-mode ops on
autodiff tensors so the network can warp points and compose pose residuals
with gradients flowing through every term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

__all__ = [
    "GeomError", "Quaternion", "Pose", "Transform4",
    "quat_mul", "quat_conjugate", "quat_inverse", "quat_normalize",
    "quat_canonicalize", "quat_angle", "rotate_point",
    "pose_compose", "pose_inverse", "pose_to_matrix", "matrix_to_pose",
    "euler_to_quat", "quat_to_rotmat",
    "quat_mul_t", "quat_normalize_t", "rotate_points_t", "pose_compose_t",
]

_ZERO_NORM = 1e-12


class GeomError(ValueError):
    """Degenerate input: zero quaternion, non-rigid matrix, bad shape."""


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Quaternion":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (4,):
            raise GeomError(f"quaternion needs shape (4,), got {a.shape}")
        return Quaternion(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    def norm(self) -> float:
        return math.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)


def quat_mul(a: Quaternion, b: Quaternion) -> Quaternion:
    return Quaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def quat_conjugate(q: Quaternion) -> Quaternion:
    return Quaternion(q.w, -q.x, -q.y, -q.z)


def quat_inverse(q: Quaternion) -> Quaternion:
    n2 = q.w ** 2 + q.x ** 2 + q.y ** 2 + q.z ** 2
    if n2 < _ZERO_NORM ** 2:
        raise GeomError("cannot invert a zero-norm quaternion")
    c = quat_conjugate(q)
    return Quaternion(c.w / n2, c.x / n2, c.y / n2, c.z / n2)


def quat_normalize(q: Quaternion) -> Quaternion:
    n = q.norm()
    if n < _ZERO_NORM:
        raise GeomError("cannot normalize a zero-norm quaternion")
    return Quaternion(q.w / n, q.x / n, q.y / n, q.z / n)


def quat_canonicalize(q: Quaternion) -> Quaternion:
    """Fix the double cover: q and -q map to the same output (w >= 0)."""
    if q.w < 0.0:
        return Quaternion(-q.w, -q.x, -q.y, -q.z)
    return q


def quat_angle(a: Quaternion, b: Quaternion) -> float:
    """Rotation angle in radians between the two unit quaternions."""
    dot = abs(a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z)
    return 2.0 * math.acos(min(1.0, dot))


def quat_to_rotmat(q: Quaternion) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ], dtype=np.float64)


def euler_to_quat(yaw: float, pitch: float, roll: float) -> Quaternion:
    """Intrinsic Z-Y-X: yaw about z, then pitch about the new y, then roll
    about the new x.  Angles in radians."""
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    qz = Quaternion(cy, 0.0, 0.0, sy)
    qy = Quaternion(cp, 0.0, sp, 0.0)
    qx = Quaternion(cr, sr, 0.0, 0.0)
    return quat_canonicalize(quat_mul(quat_mul(qz, qy), qx))


@dataclass(frozen=True)
class Pose:
    """Unit canonical quaternion + translation; maps p to rotate(q, p) + t."""

    q: Quaternion
    t: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape != (3,):
            raise GeomError(f"translation needs shape (3,), got {t.shape}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q",
                           quat_canonicalize(quat_normalize(self.q)))

    @staticmethod
    def identity() -> "Pose":
        return Pose(Quaternion.identity(), np.zeros(3))


def rotate_point(q: Quaternion, t: np.ndarray | None, p: np.ndarray) -> np.ndarray:
    """q [0, p] q^-1 + t for one point (3,) or a stack (n, 3)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(1, 3) if single else p
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeomError(f"points need shape (3,) or (n, 3), got {p.shape}")
    out = pts @ quat_to_rotmat(q).T
    if t is not None:
        out = out + np.asarray(t, dtype=np.float64)
    return out[0] if single else out


def pose_apply(pose: Pose, p: np.ndarray) -> np.ndarray:
    return rotate_point(pose.q, pose.t, p)


def pose_compose(delta: Pose, coarse: Pose) -> Pose:
    """Refinement: q = dq * q_c, t = dq [0, t_c] dq^-1 + dt."""
    q = quat_mul(delta.q, coarse.q)
    t = rotate_point(delta.q, delta.t, coarse.t)
    return Pose(q, t)


def pose_inverse(pose: Pose) -> Pose:
    qi = quat_conjugate(pose.q)
    return Pose(qi, -rotate_point(qi, None, pose.t))


def pose_to_matrix(pose: Pose) -> "Transform4":
    m = np.eye(4)
    m[:3, :3] = quat_to_rotmat(pose.q)
    m[:3, 3] = pose.t
    return Transform4(m)


def matrix_to_pose(tf: "Transform4") -> Pose:
    """Shepperd extraction with the max-branch rule, so 180-degree rotations
    (trace near -1) stay well conditioned."""
    r = tf.m[:3, :3]
    rtr = r.T @ r
    if np.abs(rtr - np.eye(3)).max() > 1e-6:
        raise GeomError("rotation block is not orthonormal within 1e-6")
    if np.linalg.det(r) < 0.0:
        raise GeomError("rotation block is a reflection")
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > max(r[0, 0], r[1, 1], r[2, 2]):
        s = 2.0 * math.sqrt(1.0 + tr)
        q = Quaternion(0.25 * s, (r[2, 1] - r[1, 2]) / s,
                       (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = Quaternion((r[2, 1] - r[1, 2]) / s, 0.25 * s,
                       (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
    elif r[1, 1] >= r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = Quaternion((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                       0.25 * s, (r[1, 2] + r[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = Quaternion((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                       (r[1, 2] + r[2, 1]) / s, 0.25 * s)
    return Pose(q, tf.m[:3, 3].copy())


class Transform4:
    """Homogeneous rigid transform; last row pinned to [0, 0, 0, 1]."""

    __slots__ = ("m",)

    def __init__(self, m, rot_tol: float = 1e-9) -> None:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeomError(f"transform needs shape (4, 4), got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-12:
            raise GeomError("transform last row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > rot_tol:
            raise GeomError(
                f"rotation block not orthonormal within {rot_tol:g}")
        self.m = m

    @staticmethod
    def identity() -> "Transform4":
        return Transform4(np.eye(4))

    def compose(self, other: "Transform4") -> "Transform4":
        return Transform4(self.m @ other.m, rot_tol=1e-6)

    def inverse(self) -> "Transform4":
        r, t = self.m[:3, :3], self.m[:3, 3]
        out = np.eye(4)
        out[:3, :3] = r.T
        out[:3, 3] = -r.T @ t
        return Transform4(out, rot_tol=1e-6)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        pts = points.reshape(1, 3) if single else points
        out = pts @ self.m[:3, :3].T + self.m[:3, 3]
        return out[0] if single else out

    def __repr__(self) -> str:
        return f"Transform4({self.m[:3].round(6).tolist()})"


# --- differentiable mirrors ---

def _qc(q: T.Tensor, i: int) -> T.Tensor:
    return T.gather_rows(q, np.array([i]))


def quat_mul_t(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    aw, ax, ay, az = (_qc(a, i) for i in range(4))
    bw, bx, by, bz = (_qc(b, i) for i in range(4))
    return T.concat([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=0)


def quat_normalize_t(q: T.Tensor, eps: float = 1e-18) -> T.Tensor:
    """Two stabilized passes: unit to machine precision for any sensible
    input magnitude, finite gradient even at the origin."""
    for _ in range(2):
        n2 = T.reduce_sum(T.mul(q, q))
        q = T.div(q, T.sqrt(T.add(n2, T.const(eps))))
    return q


def _rotmat_scalars(q: T.Tensor) -> list[T.Tensor]:
    w, x, y, z = (_qc(q, i) for i in range(4))
    two = T.const(np.array([2.0]))
    one = T.const(np.array([1.0]))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return [
        one - two * (yy + zz), two * (xy - wz), two * (xz + wy),
        two * (xy + wz), one - two * (xx + zz), two * (yz - wx),
        two * (xz - wy), two * (yz + wx), one - two * (xx + yy),
    ]


def rotate_points_t(q: T.Tensor, t: T.Tensor | None, pts: T.Tensor,
                    normalize: bool = True) -> T.Tensor:
    """Differentiable rotate(q, pts) + t for pts of shape (n, 3)."""
    if normalize:
        q = quat_normalize_t(q)
    e = _rotmat_scalars(q)
    # rows of R^T, so the product pts @ rt applies R on the left
    rt = T.reshape(T.concat([e[0], e[3], e[6],
                             e[1], e[4], e[7],
                             e[2], e[5], e[8]], axis=0), (3, 3))
    out = T.matmul(pts, rt)
    if t is not None:
        out = T.add(out, t)
    return out


def pose_compose_t(dq: T.Tensor, dt: T.Tensor, q: T.Tensor,
                   t: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """Tensor-mode refinement step; both inputs assumed unit quaternions."""
    q_out = quat_normalize_t(quat_mul_t(dq, q))
    t_rot = rotate_points_t(dq, None, T.reshape(t, (1, 3)), normalize=True)
    t_out = T.add(T.reshape(t_rot, (3,)), dt)
    return q_out, t_out
