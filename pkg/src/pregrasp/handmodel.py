"""Five-finger hand model: coupled joints, probe points, hold points.

The hand-v1 schema describes a palm frame with five planar-flex fingers.
Conventions, fixed by the schema rather than configurable:

  * palm frame: +x along the fingers, +z out of the inner (grasping)
    side of the palm;
  * each finger is a chain of revolute joints that all rotate about the
    finger frame's -y axis, so positive angles curl toward the palm
    normal; joint i sits at the end of segment i-1;
  * the control vector has one entry per finger; a coupling matrix
    expands the 5 controls into the 11 joint angles.

Probe points are the 5 fingertips followed by the 5 finger middles, in
finger order (thumb, index, middle, ring, pinky).  Hold points are
interior points at fractions 1/4, 1/2, 3/4 of two segments: thumb tip
to middle fingertip and thumb tip to middle-finger middle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geom import Pose, quat_rotate, quat_to_mat

FINGER_ORDER = ("thumb", "index", "middle", "ring", "pinky")
HOLD_FRACTIONS = (0.25, 0.5, 0.75)
PALM_NORMAL = np.array([0.0, 0.0, 1.0])
PALM_FORWARD = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class FingerSpec:
    name: str
    base: Pose
    segments: np.ndarray  # (k,) lengths; joint i at the start of segment i
    middle_joint: int
    middle_length: float

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=np.float64)
        if seg.ndim != 1 or len(seg) == 0 or np.any(seg <= 0):
            raise DataError(f"finger {self.name!r}: segments must be positive lengths")
        seg.flags.writeable = False
        object.__setattr__(self, "segments", seg)
        if not (0 <= self.middle_joint < len(seg)):
            raise DataError(f"finger {self.name!r}: middle joint index out of range")
        if not (0.0 < self.middle_length <= float(np.sum(seg))):
            raise DataError(f"finger {self.name!r}: middle site length out of range")

    @property
    def dof(self) -> int:
        return len(self.segments)


class HandSpec:
    """Immutable hand description with precomputed per-finger constants."""

    def __init__(self, fingers, coupling, control_lower, control_upper,
                 joint_lower, joint_upper, hand_length: float):
        if tuple(f.name for f in fingers) != FINGER_ORDER:
            raise DataError(f"hand needs fingers named {FINGER_ORDER} in order")
        self.fingers = tuple(fingers)
        self.dof = int(sum(f.dof for f in fingers))
        self.n_controls = len(self.fingers)
        self.coupling = np.asarray(coupling, dtype=np.float64)
        if self.coupling.shape != (self.dof, self.n_controls):
            raise DataError(
                f"coupling matrix must be ({self.dof}, {self.n_controls}), "
                f"got {self.coupling.shape}"
            )
        self.control_lower = np.asarray(control_lower, dtype=np.float64).reshape(self.n_controls)
        self.control_upper = np.asarray(control_upper, dtype=np.float64).reshape(self.n_controls)
        self.joint_lower = np.asarray(joint_lower, dtype=np.float64).reshape(self.dof)
        self.joint_upper = np.asarray(joint_upper, dtype=np.float64).reshape(self.dof)
        if np.any(self.control_lower >= self.control_upper):
            raise DataError("control lower bounds must lie below upper bounds")
        if np.any(self.joint_lower > self.joint_upper):
            raise DataError("joint lower bounds must not exceed upper bounds")
        self.hand_length = float(hand_length)
        if self.hand_length <= 0:
            raise DataError("hand length must be positive")

        # any in-range control vector must map inside the joint limits
        pos = np.maximum(self.coupling, 0.0)
        neg = np.minimum(self.coupling, 0.0)
        hi = pos @ self.control_upper + neg @ self.control_lower
        lo = pos @ self.control_lower + neg @ self.control_upper
        if np.any(hi > self.joint_upper + 1e-9) or np.any(lo < self.joint_lower - 1e-9):
            raise DataError("coupling can push joints outside their limits")

        # per-finger constants for the batched site computation
        self._slices = []
        self._base_rot = []
        self._base_pos = []
        start = 0
        for f in self.fingers:
            self._slices.append(slice(start, start + f.dof))
            self._base_rot.append(quat_to_mat(f.base.rotation))
            self._base_pos.append(f.base.position)
            start += f.dof

    def clamp_controls(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.control_lower, self.control_upper)

    def expand_controls(self, u: np.ndarray) -> np.ndarray:
        """Map control vectors (..., 5) to joint angles (..., 11)."""
        u = np.asarray(u, dtype=np.float64)
        joints = u @ self.coupling.T
        return np.clip(joints, self.joint_lower, self.joint_upper)

    def _finger_sites_local(self, joints: np.ndarray):
        """Tip and middle site of every finger in the palm frame.

        joints has shape (B, dof); returns tips (B, 5, 3), mids (B, 5, 3).
        """
        b = joints.shape[0]
        tips = np.empty((b, 5, 3))
        mids = np.empty((b, 5, 3))
        for fi, f in enumerate(self.fingers):
            q = joints[:, self._slices[fi]]
            theta = np.cumsum(q, axis=1)
            c = np.cos(theta)
            s = np.sin(theta)
            seg = f.segments
            steps_x = seg * c
            steps_z = seg * s
            tip_local = np.stack(
                [steps_x.sum(axis=1), np.zeros(b), steps_z.sum(axis=1)], axis=1
            )
            m = f.middle_joint
            # joint m sits after segments 0..m-1; the site continues along
            # the direction set by joint m's cumulative angle
            mx = steps_x[:, :m].sum(axis=1) + f.middle_length * c[:, m]
            mz = steps_z[:, :m].sum(axis=1) + f.middle_length * s[:, m]
            mid_local = np.stack([mx, np.zeros(b), mz], axis=1)
            rot = self._base_rot[fi]
            base = self._base_pos[fi]
            tips[:, fi] = tip_local @ rot.T + base
            mids[:, fi] = mid_local @ rot.T + base
        return tips, mids

    def site_points_batch(self, hand_pos, hand_rot_mat, joints):
        """World probe points (B, 10, 3) and hold points (B, 6, 3) in one pass.

        hand_pos (B, 3), hand_rot_mat (B, 3, 3), joints (B, 11).  Probes
        are the 5 fingertips then the 5 finger middles; hold points sit
        at fractions 1/4, 1/2, 3/4 of the thumb-tip to middle-fingertip
        segment, then of the thumb-tip to middle-finger-middle segment.
        """
        tips, mids = self._finger_sites_local(np.asarray(joints, dtype=np.float64))
        thumb = tips[:, 0]
        targets = np.stack([tips[:, 2], mids[:, 2]], axis=1)  # (B, 2, 3)
        fr = np.asarray(HOLD_FRACTIONS)
        # (B, 2, 3, 3): segment, fraction, coordinate
        pts = thumb[:, None, None, :] + fr[None, None, :, None] * (
            targets[:, :, None, :] - thumb[:, None, None, :]
        )
        holds = pts.reshape(-1, 6, 3)
        local = np.concatenate([tips, mids, holds], axis=1)
        world = np.einsum("bij,bpj->bpi", hand_rot_mat, local) + hand_pos[:, None, :]
        return world[:, :10], world[:, 10:]

    def probe_points_batch(self, hand_pos, hand_rot_mat, joints) -> np.ndarray:
        """World positions of the 10 probe points (5 tips then 5 middles)."""
        return self.site_points_batch(hand_pos, hand_rot_mat, joints)[0]

    def hold_points_batch(self, hand_pos, hand_rot_mat, joints) -> np.ndarray:
        """World positions of the 6 hold points."""
        return self.site_points_batch(hand_pos, hand_rot_mat, joints)[1]

    def probe_points(self, palm: Pose, controls: np.ndarray) -> np.ndarray:
        joints = self.expand_controls(np.asarray(controls, dtype=np.float64))
        rot = quat_to_mat(palm.rotation)[None]
        return self.probe_points_batch(palm.position[None], rot, joints[None])[0]

    def hold_points(self, palm: Pose, controls: np.ndarray) -> np.ndarray:
        joints = self.expand_controls(np.asarray(controls, dtype=np.float64))
        rot = quat_to_mat(palm.rotation)[None]
        return self.hold_points_batch(palm.position[None], rot, joints[None])[0]

    @property
    def probe_names(self):
        return tuple(f"{n}_tip" for n in FINGER_ORDER) + tuple(f"{n}_mid" for n in FINGER_ORDER)

    def probe_index(self, name: str) -> int:
        try:
            return self.probe_names.index(name)
        except ValueError as exc:
            raise DataError(f"unknown probe point {name!r}") from exc

    def inner_normal_world(self, palm: Pose) -> np.ndarray:
        return quat_rotate(palm.rotation, PALM_NORMAL)


def hand_from_dict(data: dict) -> HandSpec:
    if data.get("schema") != "hand-v1":
        raise DataError(f"expected hand-v1 schema, got {data.get('schema')!r}")
    try:
        fingers = [
            FingerSpec(
                name=fd["name"],
                base=Pose(fd["base"]["position"], fd["base"]["rotation_xyzw"]),
                segments=np.asarray(fd["segments"], dtype=np.float64),
                middle_joint=int(fd["middle_site"]["joint"]),
                middle_length=float(fd["middle_site"]["length"]),
            )
            for fd in data["fingers"]
        ]
        return HandSpec(
            fingers=fingers,
            coupling=np.asarray(data["coupling"], dtype=np.float64),
            control_lower=np.asarray(data["control_limits"]["lower"], dtype=np.float64),
            control_upper=np.asarray(data["control_limits"]["upper"], dtype=np.float64),
            joint_lower=np.asarray(data["joint_limits"]["lower"], dtype=np.float64),
            joint_upper=np.asarray(data["joint_limits"]["upper"], dtype=np.float64),
            hand_length=float(data["hand_length"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed hand record: {exc}") from exc


def hand_to_dict(hand: HandSpec) -> dict:
    return {
        "schema": "hand-v1",
        "hand_length": hand.hand_length,
        "fingers": [
            {
                "name": f.name,
                "base": {
                    "position": list(map(float, f.base.position)),
                    "rotation_xyzw": list(map(float, f.base.rotation)),
                },
                "segments": list(map(float, f.segments)),
                "middle_site": {"joint": f.middle_joint, "length": f.middle_length},
            }
            for f in hand.fingers
        ],
        "coupling": [[float(x) for x in row] for row in hand.coupling],
        "control_limits": {
            "lower": list(map(float, hand.control_lower)),
            "upper": list(map(float, hand.control_upper)),
        },
        "joint_limits": {
            "lower": list(map(float, hand.joint_lower)),
            "upper": list(map(float, hand.joint_upper)),
        },
    }


def load_hand(path) -> HandSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return hand_from_dict(data)


def save_hand(hand: HandSpec, path) -> None:
    Path(path).write_text(json.dumps(hand_to_dict(hand), indent=2) + "\n")
