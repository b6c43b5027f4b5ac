"""Dense multi-component reward for pre-grasp manipulation.

Terms fall into three groups:

  * grasp progress: differential distance terms for hand position,
    rotation, and finger controls, the last gated by proximity so the
    fingers only earn reward once the hand is close to the grasp pose;
  * manipulation: reach (hold points approach the object surface), hold
    (hold points sit inside a shell around the surface), orient (object
    turns toward its nominal upright rotation);
  * penalties and bonuses: a singularity penalty from the arm Jacobian
    determinant and a large sparse bonus when the grasp pose is reached.

Every unscaled term lies in [-1, 1]; reach, hold, and orient are
clamped positive.  All functions broadcast over leading axes so a
vectorized environment can evaluate whole batches at once; the point
arrays (reach, hold) reduce over their last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import DataError


@dataclass
class RewardConfig:
    dt: float = 1.0 / 30.0
    max_pos_speed: float = 1.0       # m/s, normalizes hand position progress
    max_rot_speed: float = math.pi   # rad/s
    max_joint_speed: float = math.pi
    pos_prox: float = 0.18           # gate ramp width, meters (hand length)
    rot_prox: float = 1.0            # gate ramp width, radians
    target_pos_tol: float = 0.01
    target_rot_tol: float = 0.15
    target_joint_tol: float = 0.1
    manip_det_max: float | None = None  # saturation point for the Jacobian
                                        # determinant; None = take the arm's
                                        # calibrated value at env build time
    hold_radius: float = 0.01        # shell radius around the surface, meters
    hold_range: float = 0.09         # per-point distance normalizer, meters
    target_scale: float = 5000.0
    orient_scale: float = 500.0
    hold_scale: float = 25.0
    base_scale: float = 1.0
    legacy_hold_form: bool = False   # hold grows with distance instead of closeness
    enable_pos: bool = True
    enable_rot: bool = True
    enable_joint: bool = True
    enable_reach: bool = True
    enable_hold: bool = True
    enable_orient: bool = True
    enable_singularity: bool = True
    enable_target: bool = True
    enable_manipulation: bool = True  # master switch for reach/hold/orient

    def __post_init__(self):
        for name in ("dt", "max_pos_speed", "max_rot_speed", "max_joint_speed",
                     "pos_prox", "rot_prox", "target_pos_tol", "target_rot_tol",
                     "target_joint_tol", "hold_radius", "hold_range"):
            if getattr(self, name) <= 0:
                raise DataError(f"reward config: {name} must be strictly positive")
        if self.manip_det_max is not None and self.manip_det_max <= 0:
            raise DataError("reward config: manip_det_max must be strictly positive")
        for name in ("target_scale", "orient_scale", "hold_scale", "base_scale"):
            if getattr(self, name) < 0:
                raise DataError(f"reward config: {name} must be non-negative")

    @property
    def pos_step(self) -> float:
        return self.max_pos_speed * self.dt

    @property
    def rot_step(self) -> float:
        return self.max_rot_speed * self.dt

    @property
    def joint_step(self) -> float:
        return self.max_joint_speed * self.dt

    def without(self, term: str) -> "RewardConfig":
        """Copy with one named term disabled; 'manipulation' kills the group."""
        flag = f"enable_{term}"
        if flag not in {f.name for f in fields(self)}:
            raise DataError(f"unknown reward term {term!r}")
        return replace(self, **{flag: False})


@dataclass
class RewardBreakdown:
    """Per-term values for one step (or a batch of steps)."""

    pos_progress: np.ndarray
    rot_progress: np.ndarray
    joint_progress: np.ndarray
    gate: np.ndarray
    grasp: np.ndarray
    reach: np.ndarray
    hold: np.ndarray
    orient: np.ndarray
    manipulation: np.ndarray
    singularity: np.ndarray
    reached: np.ndarray
    total: np.ndarray

    TERM_NAMES = ("pos_progress", "rot_progress", "joint_progress", "gate",
                  "grasp", "reach", "hold", "orient", "manipulation",
                  "singularity", "reached", "total")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.TERM_NAMES}


def _progress(prev, now, step: float):
    return np.clip((np.asarray(prev) - np.asarray(now)) / step, -1.0, 1.0)


def hand_position_progress(prev, now, cfg: RewardConfig):
    """Differential hand-position distance, normalized by the per-step budget."""
    return _progress(prev, now, cfg.pos_step)


def hand_rotation_progress(prev, now, cfg: RewardConfig):
    return _progress(prev, now, cfg.rot_step)


def hand_joint_progress(prev, now, cfg: RewardConfig):
    """Differential mean per-control distance to the grasp controls."""
    return _progress(prev, now, cfg.joint_step)


def joint_importance(pos_dist, rot_dist, cfg: RewardConfig):
    """Proximity gate in [0, 1]: rises to 1 as the hand nears the grasp pose."""
    p = 1.0 - np.minimum(cfg.pos_prox, np.asarray(pos_dist)) / cfg.pos_prox
    r = 1.0 - np.minimum(cfg.rot_prox, np.asarray(rot_dist)) / cfg.rot_prox
    return p * r


def reach_progress(sdf_prev, sdf_now, cfg: RewardConfig):
    """Summed approach of the hold points toward the object surface.

    Reduces the last axis (the K hold points); clamped to [0, 1] so only
    net approach is rewarded.
    """
    prev = np.asarray(sdf_prev)
    now = np.asarray(sdf_now)
    if prev.shape != now.shape:
        raise DataError(f"reach arrays disagree: {prev.shape} vs {now.shape}")
    return np.clip(np.sum(prev - now, axis=-1) / cfg.pos_step, 0.0, 1.0)


def hold_closure(sdf_now, cfg: RewardConfig):
    """Mean shell occupancy of the hold points, in [0, 1].

    A point scores once it comes within ``hold_radius`` of the surface
    and saturates ``hold_range`` deeper.  The legacy form keeps the
    opposite sign (rewarding distance) for comparison runs.
    """
    d = np.asarray(sdf_now)
    if cfg.legacy_hold_form:
        per_point = (d - cfg.hold_radius) / cfg.hold_range
    else:
        per_point = (cfg.hold_radius - d) / cfg.hold_range
    return np.mean(np.clip(per_point, 0.0, 1.0), axis=-1)


def orient_progress(prev, now):
    """Differential object-orientation distance over a half turn, in [0, 1]."""
    return np.clip((np.asarray(prev) - np.asarray(now)) / math.pi, 0.0, 1.0)


def singularity_penalty(det, cfg: RewardConfig):
    """Penalty in [-1, 0] that bites as the arm nears a singular pose."""
    if cfg.manip_det_max is None:
        raise DataError("manip_det_max unresolved; set it or build the env first")
    x = np.minimum(np.abs(det), cfg.manip_det_max) / cfg.manip_det_max
    return 1.0 - 2.0 / (1.0 + x ** 3)


def target_reached(pos_dist, rot_dist, joint_dist, cfg: RewardConfig):
    """1.0 where all three grasp tolerances are strictly met, else 0.0."""
    hit = (
        (np.asarray(pos_dist) < cfg.target_pos_tol)
        & (np.asarray(rot_dist) < cfg.target_rot_tol)
        & (np.asarray(joint_dist) < cfg.target_joint_tol)
    )
    return hit.astype(np.float64)


def combine(
    pos_prev, pos_now,
    rot_prev, rot_now,
    joint_prev, joint_now,
    reach_sdf_prev, reach_sdf_now,
    hold_sdf_now,
    orient_prev, orient_now,
    jacobian_det,
    cfg: RewardConfig,
    manipulation_mask=None,
) -> RewardBreakdown:
    """Evaluate every term for one step and assemble the scaled total.

    Disabled terms are zeroed in the breakdown itself so the recorded
    values always match what the total was built from.  An optional
    per-row boolean mask further gates the manipulation group, for
    batches mixing curriculum stages.
    """
    zeros = np.zeros(np.shape(np.asarray(pos_now)))

    def on(flag, value):
        return value if flag else zeros

    pos = on(cfg.enable_pos, hand_position_progress(pos_prev, pos_now, cfg))
    rot = on(cfg.enable_rot, hand_rotation_progress(rot_prev, rot_now, cfg))
    joint = on(cfg.enable_joint, hand_joint_progress(joint_prev, joint_now, cfg))
    gate = joint_importance(pos_now, rot_now, cfg)
    grasp = pos + rot + gate * joint

    man_on = cfg.enable_manipulation
    reach = on(man_on and cfg.enable_reach, reach_progress(reach_sdf_prev, reach_sdf_now, cfg))
    hold = on(man_on and cfg.enable_hold, hold_closure(hold_sdf_now, cfg))
    orient = on(man_on and cfg.enable_orient, orient_progress(orient_prev, orient_now))
    if manipulation_mask is not None:
        mask = np.asarray(manipulation_mask, dtype=np.float64)
        reach = reach * mask
        hold = hold * mask
        orient = orient * mask
    manipulation = reach + hold + orient

    singular = on(cfg.enable_singularity, singularity_penalty(jacobian_det, cfg))
    reached = on(cfg.enable_target, target_reached(pos_now, rot_now, joint_now, cfg))

    total = (
        cfg.target_scale * reached
        + cfg.orient_scale * orient
        + cfg.hold_scale * hold
        + cfg.base_scale * (pos + rot + gate * joint + reach + singular)
    )
    return RewardBreakdown(
        pos_progress=pos, rot_progress=rot, joint_progress=joint, gate=gate,
        grasp=grasp, reach=reach, hold=hold, orient=orient,
        manipulation=manipulation, singularity=singular, reached=reached,
        total=total,
    )
