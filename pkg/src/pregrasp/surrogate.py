"""Quasi-static stand-in for contact physics.

Everything here is an explicit surrogate: objects rest on the table in
one of a few stable orientations, hand contact nudges them with a
push rule, a sustained hold score rigidly attaches the object to the
hand, and released objects instantly settle to the nearest stable pose.
The rules are deterministic and cheap; their thresholds and gains are
config values, not physics.

The push rule: when any finger probe penetrates the object surface
(negative SDF value), the object translates along the horizontal hand
motion by the deepest penetration, and yaws by

    gain * sum_i depth_i * (r_hat_i x d_hat)_z

where r_hat_i is the horizontal unit offset from the object center to
the penetrating probe and d_hat the horizontal push direction, so
off-center pushes spin the object the way a real shove would.

Module-level functions operate on batched arrays; ObjectState wraps the
same rules for a single object.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .geom import (
    Pose,
    quat_about_z,
    quat_multiply,
    quat_normalize,
    quat_to_mat,
    yaw_twist,
)

_EPS = 1e-9


@dataclass(frozen=True)
class SurrogateConfig:
    attach_threshold: float = 0.5
    detach_threshold: float = 0.2
    attach_streak: int = 5
    push_yaw_gain: float = 1.0        # rad per meter of depth-weighted lever
    min_support_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.detach_threshold < self.attach_threshold <= 1.0:
            raise DataError("surrogate: need 0 <= detach < attach <= 1")
        if self.attach_streak < 1:
            raise DataError("surrogate: attach streak must be at least 1")
        if self.push_yaw_gain < 0:
            raise DataError("surrogate: push yaw gain must be non-negative")
        if not 0.0 < self.min_support_fraction < 1.0:
            raise DataError("surrogate: support fraction must be in (0, 1)")


def push_response(sdf_values, probe_points, obj_pos, hand_motion, yaw_gain: float):
    """Translation and yaw deltas from penetrating probes.

    sdf_values (B, P), probe_points (B, P, 3), obj_pos (B, 3),
    hand_motion (B, 3).  Returns (delta_pos (B, 3), delta_yaw (B,));
    rows without penetration or without horizontal motion get zeros.
    """
    depth = np.maximum(0.0, -np.asarray(sdf_values, dtype=np.float64))
    max_depth = depth.max(axis=1)
    motion_h = np.asarray(hand_motion, dtype=np.float64).copy()
    motion_h[:, 2] = 0.0
    speed = np.linalg.norm(motion_h, axis=1)
    active = (max_depth > 0.0) & (speed > _EPS)
    d_hat = np.where(active[:, None], motion_h / np.maximum(speed, _EPS)[:, None], 0.0)

    delta_pos = d_hat * (max_depth * active)[:, None]

    r = np.asarray(probe_points, dtype=np.float64) - np.asarray(obj_pos)[:, None, :]
    r[:, :, 2] = 0.0
    r_len = np.linalg.norm(r, axis=2)
    r_hat = r / np.maximum(r_len, _EPS)[:, :, None]
    r_hat[r_len < _EPS] = 0.0
    lever = r_hat[:, :, 0] * d_hat[:, None, 1] - r_hat[:, :, 1] * d_hat[:, None, 0]
    delta_yaw = yaw_gain * np.sum(depth * lever, axis=1) * active
    return delta_pos, delta_yaw


def support_fraction(aabb_lo, aabb_hi, table_lo, table_hi):
    """Fraction of the object's xy footprint lying over the table rectangle."""
    lo = np.asarray(aabb_lo, dtype=np.float64)[..., :2]
    hi = np.asarray(aabb_hi, dtype=np.float64)[..., :2]
    t_lo = np.asarray(table_lo, dtype=np.float64)
    t_hi = np.asarray(table_hi, dtype=np.float64)
    side = np.clip(hi - lo, _EPS, None)
    overlap = np.clip(np.minimum(hi, t_hi) - np.maximum(lo, t_lo), 0.0, None)
    return np.prod(overlap, axis=-1) / np.prod(side, axis=-1)


def attachment_step(attached, streak, hold_score, cfg: SurrogateConfig):
    """Hysteretic attach/detach update.

    Returns (attached, streak, just_attached, just_detached); a row can
    never attach and detach in the same step.
    """
    attached = np.asarray(attached, dtype=bool)
    streak = np.asarray(streak, dtype=np.int64)
    hold = np.asarray(hold_score, dtype=np.float64)

    new_streak = np.where(~attached & (hold >= cfg.attach_threshold), streak + 1, 0)
    just_attached = ~attached & (new_streak >= cfg.attach_streak)
    just_detached = attached & (hold < cfg.detach_threshold)
    new_attached = (attached | just_attached) & ~just_detached
    new_streak = np.where(new_attached, 0, new_streak)
    return new_attached, new_streak, just_attached, just_detached


def corner_offsets(bbox_lo, bbox_hi) -> np.ndarray:
    """The 8 object-frame corners of a box, shape (..., 8, 3)."""
    lo = np.asarray(bbox_lo, dtype=np.float64)
    hi = np.asarray(bbox_hi, dtype=np.float64)
    picks = np.array([[(i >> a) & 1 for a in range(3)] for i in range(8)], dtype=np.float64)
    return lo[..., None, :] + picks * (hi - lo)[..., None, :]


def world_aabb(pos, quat, bbox_lo, bbox_hi):
    """World axis-aligned bounds of a posed box: (lo (..., 3), hi (..., 3))."""
    corners = corner_offsets(bbox_lo, bbox_hi)
    mat = quat_to_mat(np.asarray(quat, dtype=np.float64))
    world = np.einsum("...ij,...cj->...ci", mat, corners) + np.asarray(pos)[..., None, :]
    return world.min(axis=-2), world.max(axis=-2)


def rest_height(quat, bbox_lo, bbox_hi, table_height: float):
    """Object z that puts the rotated bounding box bottom on the table."""
    corners = corner_offsets(bbox_lo, bbox_hi)
    mat = quat_to_mat(np.asarray(quat, dtype=np.float64))
    world_z = np.einsum("...ij,...cj->...ci", mat, corners)[..., 2]
    return table_height - world_z.min(axis=-1)


def snap_to_stable(quat, stable_rotations):
    """Nearest stable orientation, keeping the free yaw about world z.

    quat (..., 4), stable_rotations (S, 4).  For each candidate stable
    rotation s the best yaw is the z twist of q * s^-1 and the residual
    misalignment is 2*arccos(sqrt(r_w^2 + r_z^2)); the smallest residual
    wins.  Returns (snapped (..., 4), residual (...,), choice (...,)).
    """
    q = np.asarray(quat, dtype=np.float64)
    stable = np.asarray(stable_rotations, dtype=np.float64)
    if stable.ndim != 2 or stable.shape[1] != 4 or len(stable) == 0:
        raise DataError("stable rotations must be a non-empty (S, 4) array")
    s_inv = stable * np.array([-1.0, -1.0, -1.0, 1.0])
    rel = quat_multiply(q[..., None, :], s_inv)            # (..., S, 4)
    twist_mag = np.sqrt(rel[..., 2] ** 2 + rel[..., 3] ** 2)
    residual = 2.0 * np.arccos(np.clip(twist_mag, -1.0, 1.0))
    choice = np.argmin(residual, axis=-1)
    idx = np.expand_dims(choice, axis=-1)
    best_rel = np.take_along_axis(rel, idx[..., None], axis=-2).squeeze(-2)
    best_s = stable[choice]
    yaw = yaw_twist(best_rel)
    snapped = quat_normalize(quat_multiply(quat_about_z(yaw), best_s))
    best_res = np.take_along_axis(residual, idx, axis=-1).squeeze(-1)
    return snapped, best_res, choice


@dataclass(frozen=True)
class ObjectState:
    pose: Pose
    mass: float
    category: int
    stable_rotations: np.ndarray      # (S, 4) object-to-world base orientations
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    attached: bool = False
    hold_streak: int = 0
    falling: bool = False
    grasp_offset: Pose | None = None  # object pose in the hand frame while attached

    def __post_init__(self):
        if self.mass <= 0:
            raise DataError("object mass must be positive")
        lo = np.asarray(self.bbox_lo, dtype=np.float64)
        hi = np.asarray(self.bbox_hi, dtype=np.float64)
        if np.any(lo >= hi):
            raise DataError("object bounding box is empty")

    def world_bounds(self):
        return world_aabb(self.pose.position, self.pose.rotation, self.bbox_lo, self.bbox_hi)


def resolve_push(obj: ObjectState, sdf_values, probe_points, hand_motion,
                 table_lo, table_hi, cfg: SurrogateConfig) -> ObjectState:
    """Apply one step of the push rule to a table-resting object."""
    if obj.attached or obj.falling:
        return obj
    sdf_values = np.asarray(sdf_values, dtype=np.float64)
    probe_points = np.asarray(probe_points, dtype=np.float64)
    if sdf_values.shape[0] != probe_points.shape[0]:
        raise DataError("probe values and points disagree in length")
    delta_pos, delta_yaw = push_response(
        sdf_values[None], probe_points[None], obj.pose.position[None],
        np.asarray(hand_motion, dtype=np.float64)[None], cfg.push_yaw_gain,
    )
    if not np.any(delta_pos) and not np.any(delta_yaw):
        return obj
    new_rot = quat_multiply(quat_about_z(delta_yaw[0]), obj.pose.rotation)
    new_pos = obj.pose.position + delta_pos[0]
    pose = Pose(new_pos, new_rot)
    lo, hi = world_aabb(pose.position, pose.rotation, obj.bbox_lo, obj.bbox_hi)
    frac = support_fraction(lo, hi, table_lo, table_hi)
    falling = bool(frac < cfg.min_support_fraction)
    return replace(obj, pose=pose, falling=falling)


def update_attachment(obj: ObjectState, hold_score: float, hand_pose: Pose,
                      cfg: SurrogateConfig) -> ObjectState:
    """Advance the attach/detach hysteresis for one step."""
    attached, streak, just_att, just_det = attachment_step(
        np.array([obj.attached]), np.array([obj.hold_streak]),
        np.array([hold_score]), cfg,
    )
    out = replace(obj, attached=bool(attached[0]), hold_streak=int(streak[0]))
    if just_att[0]:
        out = replace(out, grasp_offset=obj.pose.to_frame(hand_pose))
    if just_det[0]:
        out = replace(out, grasp_offset=None)
    return out


def settle(obj: ObjectState, table_height: float, table_lo, table_hi,
           cfg: SurrogateConfig) -> ObjectState:
    """Drop a detached object into its nearest stable rest pose."""
    snapped, _, _ = snap_to_stable(obj.pose.rotation, obj.stable_rotations)
    z = rest_height(snapped, obj.bbox_lo, obj.bbox_hi, table_height)
    pos = np.array([obj.pose.position[0], obj.pose.position[1], float(z)])
    pose = Pose(pos, snapped)
    lo, hi = world_aabb(pose.position, pose.rotation, obj.bbox_lo, obj.bbox_hi)
    frac = support_fraction(lo, hi, table_lo, table_hi)
    falling = bool(frac < cfg.min_support_fraction)
    return replace(obj, pose=pose, falling=falling, attached=False,
                   hold_streak=0, grasp_offset=None)
