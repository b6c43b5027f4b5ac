"""Rigid-transform and quaternion helpers.

Quaternions are stored as (x, y, z, w) with the scalar part last, in every
array and every file format this package reads or writes.  All functions
broadcast over leading batch dimensions, so a single pose and a stack of
poses go through the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def _require_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite components")


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Raises on zero-norm input."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < _EPS):
        raise ValueError("cannot normalize zero-norm quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b in (x, y, z, w) storage."""
    a = np.asarray(a)
    b = np.asarray(b)
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    out = q.copy()
    out[..., :3] = -out[..., :3]
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by unit quaternions q."""
    q = np.asarray(q)
    v = np.asarray(v)
    qv = q[..., :3]
    qw = q[..., 3:4]
    t = 2.0 * np.cross(qv, v)
    return v + qw * t + np.cross(qv, t)


def quat_from_axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n < _EPS):
        raise ValueError("rotation axis must be nonzero")
    axis = axis / n
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    xyz = axis * np.sin(half)[..., None]
    return np.concatenate([xyz, np.cos(half)[..., None]], axis=-1)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    rv = np.asarray(rv, dtype=np.float64)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    small = angle[..., 0] < 1e-9
    safe = np.where(angle < 1e-9, 1.0, angle)
    axis = rv / safe
    half = 0.5 * angle[..., 0]
    xyz = axis * np.sin(half)[..., None]
    q = np.concatenate([xyz, np.cos(half)[..., None]], axis=-1)
    # first-order limit keeps the map smooth through zero
    q_small = np.concatenate([0.5 * rv, np.ones_like(angle)], axis=-1)
    q = np.where(small[..., None], q_small, q)
    return quat_normalize(q)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Log map: quaternion to rotation vector with angle in [0, pi]."""
    q = np.asarray(q, dtype=np.float64)
    # flip to the w >= 0 hemisphere so the extracted angle is minimal
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    sin_half = np.linalg.norm(q[..., :3], axis=-1)
    cos_half = q[..., 3]
    angle = 2.0 * np.arctan2(sin_half, cos_half)
    scale = np.where(sin_half < 1e-9, 2.0, angle / np.where(sin_half < 1e-9, 1.0, sin_half))
    return q[..., :3] * scale[..., None]


def quat_from_euler_xyz(e: np.ndarray) -> np.ndarray:
    """Quaternion from intrinsic rotations about x, then y, then z."""
    e = np.asarray(e, dtype=np.float64)
    hx, hy, hz = 0.5 * e[..., 0], 0.5 * e[..., 1], 0.5 * e[..., 2]
    cx, sx = np.cos(hx), np.sin(hx)
    cy, sy = np.cos(hy), np.sin(hy)
    cz, sz = np.cos(hz), np.sin(hz)
    # qx * qy * qz expanded
    return np.stack(
        [
            sx * cy * cz + cx * sy * sz,
            cx * sy * cz - sx * cy * sz,
            cx * cy * sz + sx * sy * cz,
            cx * cy * cz - sx * sy * sz,
        ],
        axis=-1,
    )


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to 3x3 rotation matrix (batched)."""
    q = np.asarray(q)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion, stable for all sign patterns."""
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    q = np.empty(batch + (4,), dtype=np.float64)
    t = np.einsum("...ii->...", m)
    # four Shepperd branches, chosen per element by the largest pivot
    cand = np.stack([t, m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]], axis=-1)
    case = np.argmax(cand, axis=-1)

    def _branch0(mm):
        r = np.sqrt(1.0 + mm[..., 0, 0] + mm[..., 1, 1] + mm[..., 2, 2])
        s = 0.5 / r
        return np.stack(
            [
                (mm[..., 2, 1] - mm[..., 1, 2]) * s,
                (mm[..., 0, 2] - mm[..., 2, 0]) * s,
                (mm[..., 1, 0] - mm[..., 0, 1]) * s,
                0.5 * r,
            ],
            axis=-1,
        )

    def _branch(mm, i):
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + mm[..., i, i] - mm[..., j, j] - mm[..., k, k])
        s = 0.5 / r
        out = np.empty(mm.shape[:-2] + (4,), dtype=np.float64)
        out[..., i] = 0.5 * r
        out[..., j] = (mm[..., j, i] + mm[..., i, j]) * s
        out[..., k] = (mm[..., k, i] + mm[..., i, k]) * s
        out[..., 3] = (mm[..., k, j] - mm[..., j, k]) * s
        return out

    flat_m = m.reshape((-1, 3, 3))
    flat_case = case.reshape(-1)
    flat_q = np.empty((flat_m.shape[0], 4), dtype=np.float64)
    for c in range(4):
        idx = np.nonzero(flat_case == c)[0]
        if idx.size == 0:
            continue
        sub = flat_m[idx]
        flat_q[idx] = _branch0(sub) if c == 0 else _branch(sub, c - 1)
    q = flat_q.reshape(batch + (4,))
    return quat_normalize(q)


def angular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Geodesic angle between two rotations, folded to [0, pi].

    Computed as 2*arccos(|w|) of the relative quaternion; the absolute
    value folds the double cover so q and -q measure as identical.
    The arccos argument is clamped to [-1, 1] against roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _require_finite("quaternion", a)
    _require_finite("quaternion", b)
    rel_w = np.abs(np.sum(a * b, axis=-1))
    norm = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    if np.any(norm < _EPS):
        raise ValueError("angular_distance requires nonzero quaternions")
    return 2.0 * np.arccos(np.clip(rel_w / norm, -1.0, 1.0))


def quat_about_z(yaw) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    half = 0.5 * yaw
    zeros = np.zeros_like(half)
    return np.stack([zeros, zeros, np.sin(half), np.cos(half)], axis=-1)


def yaw_twist(q: np.ndarray) -> np.ndarray:
    """Rotation about the world z axis contained in q (swing-twist split)."""
    q = np.asarray(q)
    return np.asarray(2.0 * np.arctan2(q[..., 2], q[..., 3]))


def quat_uniform(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniformly random unit quaternions."""
    shape = (4,) if size is None else (size, 4)
    v = rng.standard_normal(shape)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    # a zero draw has probability zero but would poison the whole rollout
    n = np.where(n < _EPS, 1.0, n)
    return v / n


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation followed by translation.

    Immutable after construction; the constructor copies, validates and
    normalizes.  `position` is meters, `rotation` is an (x, y, z, w) unit
    quaternion.
    """

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        _require_finite("position", p)
        _require_finite("rotation", q)
        q = quat_normalize(q)
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "rotation", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        """Transform composition: first apply `other`, then self."""
        return Pose(
            self.position + quat_rotate(self.rotation, other.position),
            quat_multiply(self.rotation, other.rotation),
        )

    def inverse(self) -> "Pose":
        inv_q = quat_conjugate(self.rotation)
        return Pose(-quat_rotate(inv_q, self.position), inv_q)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        """Map points from this pose's local frame to the parent frame."""
        return quat_rotate(self.rotation, np.asarray(p, dtype=np.float64)) + self.position

    def inverse_transform_point(self, p: np.ndarray) -> np.ndarray:
        """Map points from the parent frame into this pose's local frame."""
        q = quat_conjugate(self.rotation)
        return quat_rotate(q, np.asarray(p, dtype=np.float64) - self.position)

    def to_frame(self, frame: "Pose") -> "Pose":
        """Express this world pose relative to `frame`."""
        return frame.inverse().compose(self)

    def from_frame(self, frame: "Pose") -> "Pose":
        """Interpret this pose as local to `frame` and return the world pose."""
        return frame.compose(self)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_mat(self.rotation)
        m[:3, 3] = self.position
        return m

    def angular_to(self, other: "Pose") -> float:
        return float(angular_distance(self.rotation, other.rotation))
