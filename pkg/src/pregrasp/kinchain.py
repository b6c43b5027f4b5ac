"""Serial kinematic chains: forward kinematics, Jacobians, damped IK.

Chains are described by the chain-v1 JSON schema: an ordered list of
joints, each with a fixed origin transform, a unit axis in the local
frame, position limits and a velocity limit, plus a fixed tool transform
after the last joint.  All heavy operations have batched variants that
the environment steps many configurations through at once; the scalar
entry points are thin wrappers over the same code path, so a batch of
one is bit-identical to a scalar call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geom import Pose, mat_to_quat, quat_to_mat

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

DEFAULT_DLS_DAMPING = 0.05


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str
    origin: Pose
    axis: np.ndarray
    lower: float
    upper: float
    velocity_limit: float

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise DataError(f"joint {self.name!r}: unknown type {self.kind!r}")
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(axis)
        if not np.isfinite(n) or n < 1e-9:
            raise DataError(f"joint {self.name!r}: axis must be a nonzero vector")
        axis = axis / n
        axis.flags.writeable = False
        object.__setattr__(self, "axis", axis)
        if not (self.lower < self.upper):
            raise DataError(f"joint {self.name!r}: lower limit must be below upper")
        if not (self.velocity_limit > 0.0):
            raise DataError(f"joint {self.name!r}: velocity limit must be positive")


class ChainSpec:
    """Immutable chain description with precomputed per-joint constants."""

    def __init__(self, name: str, joints: list[JointSpec], tool: Pose,
                 jacobian_det_max: float | None = None):
        if not joints:
            raise DataError("chain needs at least one joint")
        self.name = name
        self.joints = tuple(joints)
        self.tool = tool
        self.jacobian_det_max = jacobian_det_max
        self.dof = len(joints)
        self.lower = np.array([j.lower for j in joints])
        self.upper = np.array([j.upper for j in joints])
        self.velocity_limit = np.array([j.velocity_limit for j in joints])
        self._axes = np.stack([j.axis for j in joints])
        self._revolute = np.array([j.kind == REVOLUTE for j in joints])
        self._origin_mats = np.stack([j.origin.as_matrix() for j in joints])
        self._tool_mat = tool.as_matrix()

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.lower, self.upper)


def chain_from_dict(data: dict) -> ChainSpec:
    if data.get("schema") != "chain-v1":
        raise DataError(f"expected chain-v1 schema, got {data.get('schema')!r}")
    joints = []
    for jd in data.get("joints", []):
        try:
            origin = Pose(jd["origin"]["position"], jd["origin"]["rotation_xyzw"])
            joints.append(
                JointSpec(
                    name=jd["name"],
                    kind=jd["type"],
                    origin=origin,
                    axis=np.asarray(jd["axis"], dtype=np.float64),
                    lower=float(jd["limits"]["lower"]),
                    upper=float(jd["limits"]["upper"]),
                    velocity_limit=float(jd["limits"]["velocity"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed joint record: {exc}") from exc
    tool_d = data.get("tool", {})
    tool = Pose(tool_d.get("position", [0, 0, 0]), tool_d.get("rotation_xyzw", [0, 0, 0, 1]))
    det_max = data.get("jacobian_det_max")
    return ChainSpec(data.get("name", "chain"), joints, tool,
                     None if det_max is None else float(det_max))


def chain_to_dict(chain: ChainSpec) -> dict:
    data = {
        "schema": "chain-v1",
        "name": chain.name,
        "joints": [
            {
                "name": j.name,
                "type": j.kind,
                "origin": {
                    "position": list(map(float, j.origin.position)),
                    "rotation_xyzw": list(map(float, j.origin.rotation)),
                },
                "axis": list(map(float, j.axis)),
                "limits": {
                    "lower": j.lower,
                    "upper": j.upper,
                    "velocity": j.velocity_limit,
                },
            }
            for j in chain.joints
        ],
        "tool": {
            "position": list(map(float, chain.tool.position)),
            "rotation_xyzw": list(map(float, chain.tool.rotation)),
        },
    }
    if chain.jacobian_det_max is not None:
        data["jacobian_det_max"] = chain.jacobian_det_max
    return data


def load_chain(path) -> ChainSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return chain_from_dict(data)


def save_chain(chain: ChainSpec, path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(chain), indent=2) + "\n")


def _axis_rotation_mats(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation about a fixed unit axis for a batch of angles."""
    c = np.cos(angle)
    s = np.sin(angle)
    ax, ay, az = axis
    k = np.array([[0.0, -az, ay], [az, 0.0, -ax], [-ay, ax, 0.0]])
    kk = np.outer(axis, axis)
    eye = np.eye(3)
    return c[:, None, None] * eye + s[:, None, None] * k + (1.0 - c)[:, None, None] * kk


def fk_batch(chain: ChainSpec, q: np.ndarray):
    """World transforms for a batch of configs.

    Returns (ee_mats (B,4,4), joint_pos (B,N,3), joint_axes (B,N,3)):
    the end-effector transform after the tool mount, plus each joint's
    world position and world axis direction for Jacobian assembly.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != chain.dof:
        raise ValueError(f"expected config batch of shape (B, {chain.dof})")
    b = q.shape[0]
    t = np.broadcast_to(np.eye(4), (b, 4, 4)).copy()
    joint_pos = np.empty((b, chain.dof, 3))
    joint_axes = np.empty((b, chain.dof, 3))
    for i in range(chain.dof):
        t = t @ chain._origin_mats[i]
        axis = chain._axes[i]
        world_axis = t[:, :3, :3] @ axis
        joint_axes[:, i] = world_axis
        joint_pos[:, i] = t[:, :3, 3]
        if chain._revolute[i]:
            rot = _axis_rotation_mats(axis, q[:, i])
            t = t.copy()
            t[:, :3, :3] = t[:, :3, :3] @ rot
        else:
            t = t.copy()
            t[:, :3, 3] = t[:, :3, 3] + world_axis * q[:, i : i + 1]
    ee = t @ chain._tool_mat
    return ee, joint_pos, joint_axes


def fk(chain: ChainSpec, q: np.ndarray) -> Pose:
    """End-effector pose for one configuration."""
    ee, _, _ = fk_batch(chain, np.asarray(q, dtype=np.float64)[None, :])
    return Pose(ee[0, :3, 3], mat_to_quat(ee[0, :3, :3]))


def jacobian_batch(chain: ChainSpec, q: np.ndarray) -> np.ndarray:
    """Geometric Jacobians (B, 6, N): linear rows on top, angular below,
    both expressed in the world frame at the end-effector point."""
    ee, joint_pos, joint_axes = fk_batch(chain, q)
    ee_pos = ee[:, :3, 3]
    b = q.shape[0]
    jac = np.empty((b, 6, chain.dof))
    lever = ee_pos[:, None, :] - joint_pos
    lin_rev = np.cross(joint_axes, lever)
    rev = chain._revolute
    jac[:, :3, :] = np.where(rev[None, None, :], np.transpose(lin_rev, (0, 2, 1)),
                             np.transpose(joint_axes, (0, 2, 1)))
    jac[:, 3:, :] = np.where(rev[None, None, :], np.transpose(joint_axes, (0, 2, 1)), 0.0)
    return jac


def jacobian(chain: ChainSpec, q: np.ndarray) -> np.ndarray:
    return jacobian_batch(chain, np.asarray(q, dtype=np.float64)[None, :])[0]


def manipulability_batch(chain: ChainSpec, q: np.ndarray) -> np.ndarray:
    jac = jacobian_batch(chain, q)
    if chain.dof == 6:
        return np.abs(np.linalg.det(jac))
    gram = jac @ np.transpose(jac, (0, 2, 1))
    return np.sqrt(np.maximum(np.linalg.det(gram), 0.0))


def manipulability(chain: ChainSpec, q: np.ndarray) -> float:
    return float(manipulability_batch(chain, np.asarray(q, dtype=np.float64)[None, :])[0])


def ik_step_batch(
    chain: ChainSpec,
    q: np.ndarray,
    target_pos: np.ndarray,
    target_quat: np.ndarray,
    dt: float,
    damping: float = DEFAULT_DLS_DAMPING,
    return_pose: bool = False,
):
    """One damped-least-squares step toward target poses.

    The update is clamped per joint to velocity_limit * dt and then to
    the position limits, so the result is always a valid configuration.
    With return_pose the resulting end-effector position and quaternion
    come back too, reusing the forward pass already done internally.
    """
    from .geom import quat_conjugate, quat_multiply, quat_to_rotvec

    q = np.asarray(q, dtype=np.float64)
    ee, joint_pos, joint_axes = fk_batch(chain, q)
    ee_pos = ee[:, :3, 3]
    ee_quat = mat_to_quat(ee[:, :3, :3])

    b = q.shape[0]
    jac = np.empty((b, 6, chain.dof))
    lever = ee_pos[:, None, :] - joint_pos
    lin_rev = np.cross(joint_axes, lever)
    rev = chain._revolute
    jac[:, :3, :] = np.where(rev[None, None, :], np.transpose(lin_rev, (0, 2, 1)),
                             np.transpose(joint_axes, (0, 2, 1)))
    jac[:, 3:, :] = np.where(rev[None, None, :], np.transpose(joint_axes, (0, 2, 1)), 0.0)

    err = np.empty((b, 6))
    err[:, :3] = np.asarray(target_pos, dtype=np.float64) - ee_pos
    rel = quat_multiply(np.asarray(target_quat, dtype=np.float64), quat_conjugate(ee_quat))
    err[:, 3:] = quat_to_rotvec(rel)

    gram = jac @ np.transpose(jac, (0, 2, 1))
    gram[:, np.arange(6), np.arange(6)] += damping * damping
    y = np.linalg.solve(gram, err[..., None])
    dq = (np.transpose(jac, (0, 2, 1)) @ y)[..., 0]

    step_cap = chain.velocity_limit * dt
    dq = np.clip(dq, -step_cap, step_cap)
    q_new = np.clip(q + dq, chain.lower, chain.upper)

    # near limits or singularities a damped step can overshoot; keep the
    # old config wherever the step would not reduce the task error
    ee2, _, _ = fk_batch(chain, q_new)
    ee2_pos = ee2[:, :3, 3]
    ee2_quat = mat_to_quat(ee2[:, :3, :3])
    err2 = np.empty((b, 6))
    err2[:, :3] = np.asarray(target_pos, dtype=np.float64) - ee2_pos
    rel2 = quat_multiply(np.asarray(target_quat, dtype=np.float64),
                         quat_conjugate(ee2_quat))
    err2[:, 3:] = quat_to_rotvec(rel2)
    worse = np.linalg.norm(err2, axis=1) > np.linalg.norm(err, axis=1) + 1e-12
    q_out = np.where(worse[:, None], q, q_new)
    if not return_pose:
        return q_out
    out_pos = np.where(worse[:, None], ee_pos, ee2_pos)
    out_quat = np.where(worse[:, None], ee_quat, ee2_quat)
    return q_out, out_pos, out_quat


def ik_step(chain: ChainSpec, q: np.ndarray, target: Pose, dt: float,
            damping: float = DEFAULT_DLS_DAMPING) -> np.ndarray:
    return ik_step_batch(
        chain,
        np.asarray(q, dtype=np.float64)[None, :],
        target.position[None, :],
        target.rotation[None, :],
        dt,
        damping,
    )[0]


def sample_configs(chain: ChainSpec, rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(chain.lower, chain.upper, size=(count, chain.dof))


def calibrate_jacobian_max(chain: ChainSpec, samples: int = 100_000,
                           seed: int = 0, fraction: float = 0.15) -> float:
    """Reference Jacobian scale: `fraction` of the largest manipulability
    seen over uniformly sampled in-limit configurations."""
    rng = np.random.default_rng(seed)
    best = 0.0
    chunk = 20_000
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        vals = manipulability_batch(chain, sample_configs(chain, rng, n))
        best = max(best, float(vals.max()))
        remaining -= n
    return fraction * best


def neutral_pose(chain: ChainSpec, seed: int = 0, candidates: int = 1000,
                 position_box: np.ndarray | None = None,
                 limit_margin: float = 0.0) -> np.ndarray:
    """Highest-manipulability config among sampled candidates.

    With `position_box` ((2, 3) lo/hi), candidates whose end effector
    lands inside the box are preferred.  With `limit_margin` > 0,
    candidates keeping every joint that fraction of its range away from
    both stops are preferred too; a config resting against a stop cannot
    track targets on its far side.  Each preference is dropped if no
    sample satisfies it, the box counting double when both apply.
    """
    rng = np.random.default_rng(seed)
    q = sample_configs(chain, rng, candidates)
    scores = manipulability_batch(chain, q)
    pref = np.zeros(len(q))
    if position_box is not None:
        ee, _, _ = fk_batch(chain, q)
        pos = ee[:, :3, 3]
        box = np.asarray(position_box, dtype=np.float64)
        pref += 2.0 * np.all((pos >= box[0]) & (pos <= box[1]), axis=1)
    if limit_margin > 0.0:
        margin = limit_margin * (chain.upper - chain.lower)
        pref += np.all((q >= chain.lower + margin) & (q <= chain.upper - margin), axis=1)
    scores = np.where(pref == pref.max(), scores, -1.0)
    return q[int(np.argmax(scores))]
