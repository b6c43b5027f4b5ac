"""Batched pre-grasp environment.

A fixed-size batch of independent episodes, stored structure-of-arrays.
Each episode is an arm+hand reaching for one tabletop object under the
quasi-static contact surrogate; stepping the batch advances every row by
one control tick, computes the reward breakdown, and (by default)
respawns finished rows in place.

Everything downstream of the per-row seed stream is deterministic:
spawning draws from a per-row ``numpy`` Generator in a frozen order, and
observation noise consumes exactly ``NOISE_DRAWS`` normals per row per
observation (none when noise is off), so trajectories replay bit-exact
from a saved :class:`EpisodeState`.
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from pathlib import Path
from typing import Optional

import numpy as np

from .assets import data_path
from .config import CurriculumConfig, EnvConfig, RunConfig
from .errors import DataError, StateError
from .geom import (
    angular_distance,
    mat_to_quat,
    quat_about_z,
    quat_conjugate,
    quat_from_axis_angle,
    quat_from_euler_xyz,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_mat,
    quat_to_rotvec,
)
from .handmodel import HandSpec, load_hand
from .kinchain import (
    ChainSpec,
    fk_batch,
    ik_step_batch,
    load_chain,
    manipulability_batch,
    neutral_pose,
)
from .objects import ObjectSet, load_object_set
from .reward import RewardBreakdown, RewardConfig, combine, hold_closure
from .surrogate import (
    attachment_step,
    push_response,
    rest_height,
    snap_to_stable,
    support_fraction,
    world_aabb,
)

REASONS = ("target", "off-table", "timeout")
REASON_TARGET = 0
REASON_OFF_TABLE = 1
REASON_TIMEOUT = 2

# Seed for the neutral-pose candidate sweep. Fixed so every process picks
# the same rest configuration for a given chain and hand box.
NEUTRAL_SEED = 11
NEUTRAL_CANDIDATES = 1000

HAND_SPAWN_BLOCK = 64
HAND_SPAWN_TRIES = 16

# Closing schedule used by the grasp check after an episode ends.
CLOSE_STEPS = 15

# Normal draws consumed per row per noisy observation: 25 position-like
# entries, 3 axis+angle quaternion wobbles, 5 joint angles.
NOISE_DRAWS = 42

_POS_NOISE_COLS = (((0, 3), 0), ((12, 15), 3), ((19, 22), 6), ((26, 32), 9), ((32, 42), 15))
_QUAT_NOISE_COLS = ((3, 7), (15, 19), (22, 26))


def observation_layout(n_categories: int) -> dict:
    """Column slices of the flat observation, keyed by block name."""
    blocks = (
        ("hand_pos", 3),
        ("hand_rot", 4),
        ("hand_controls", 5),
        ("hand_in_obj_pos", 3),
        ("hand_in_obj_rot", 4),
        ("obj_pos", 3),
        ("obj_rot", 4),
        ("obj_bbox", 6),
        ("obj_probe_sdf", 10),
        ("obj_category", int(n_categories)),
        ("grasp_pos", 3),
        ("grasp_rot", 4),
        ("grasp_controls", 5),
    )
    out = {}
    start = 0
    for name, width in blocks:
        out[name] = slice(start, start + width)
        start += width
    return out


def reason_name(code: int) -> str:
    if not 0 <= code < len(REASONS):
        raise DataError(f"unknown termination code {code}")
    return REASONS[code]


def curriculum_advance(stage: int, rates, threshold: float) -> int:
    """Next curriculum stage given per-object success rates.

    Stage 2 is absorbing. Stage 1 advances only when every object's rate
    meets the threshold; an empty rate list stays put.
    """
    if stage >= 2:
        return 2
    rates = np.asarray(rates, dtype=np.float64)
    if rates.size and float(rates.min()) >= threshold:
        return 2
    return 1


class CurriculumTracker:
    """Windowed per-object success bookkeeping driving the stage switch.

    Records one outcome per finished episode. The stage advances when
    every object has at least ``min_episodes`` recorded outcomes and the
    worst windowed rate clears the threshold; it never moves back.
    """

    def __init__(self, cfg: CurriculumConfig, n_objects: int):
        if n_objects < 1:
            raise DataError("tracker needs at least one object")
        self.cfg = cfg
        self.stage = int(cfg.start_stage) if cfg.enabled else 2
        self.history = [deque(maxlen=cfg.window) for _ in range(n_objects)]

    def record(self, obj_index: int, success: bool) -> None:
        self.history[int(obj_index)].append(bool(success))

    def rates(self) -> np.ndarray:
        return np.array([sum(h) / len(h) if h else 0.0 for h in self.history])

    def ready(self) -> bool:
        return all(len(h) >= self.cfg.min_episodes for h in self.history)

    def update(self) -> int:
        if self.stage < 2 and self.ready():
            self.stage = curriculum_advance(self.stage, self.rates(), self.cfg.threshold)
        return self.stage

    def state(self) -> dict:
        return {"stage": self.stage, "history": [list(h) for h in self.history]}

    def set_state(self, state: dict) -> None:
        hist = state["history"]
        if len(hist) != len(self.history):
            raise DataError("tracker state has wrong object count")
        self.stage = int(state["stage"])
        self.history = [deque(h, maxlen=self.cfg.window) for h in hist]


@dataclasses.dataclass(frozen=True)
class EpisodeState:
    """Everything needed to restore one row bit-exact.

    The ``prev_*`` caches are the distances from the previous tick that
    the differential reward terms compare against; ``rng_state`` is the
    row generator's bit-generator state dict.
    """

    arm_q: np.ndarray
    controls: np.ndarray
    obj_index: int
    obj_pos: np.ndarray
    obj_quat: np.ndarray
    obj_mass: float
    attached: bool
    hold_streak: int
    off_pos: np.ndarray
    off_quat: np.ndarray
    step_count: int
    stage: int
    prev_pos_dist: float
    prev_rot_dist: float
    prev_joint_dist: float
    prev_orient_dist: float
    prev_reach_sdf: np.ndarray
    rng_state: dict
    done: bool = False


def _resolve_chain(name_or_path: str) -> ChainSpec:
    p = Path(name_or_path)
    if p.suffix == ".json":
        return load_chain(p)
    return load_chain(data_path("chains", f"{name_or_path}.json"))


def _resolve_hand(name_or_path: str) -> HandSpec:
    p = Path(name_or_path)
    if p.suffix == ".json":
        return load_hand(p)
    return load_hand(data_path("hand", f"{name_or_path}.json"))


def neutral_config(chain: ChainSpec, env_cfg: EnvConfig) -> np.ndarray:
    """Rest configuration for spawning: high-manipulability, inside the
    hand spawn box when reachable, clear of the joint stops, and
    identical across processes."""
    box = np.array([env_cfg.hand_box_lo, env_cfg.hand_box_hi], dtype=np.float64)
    return neutral_pose(chain, seed=NEUTRAL_SEED, candidates=NEUTRAL_CANDIDATES,
                        position_box=box, limit_margin=0.1)


class GraspEnv:
    """Vectorized pre-grasp episodes over one object set.

    Parameters
    ----------
    cfg : full run configuration
    num_envs : batch width
    seed : root seed; rows get independent spawned streams
    eval_mode : use the evaluation step cap instead of the training cap
    auto_reset : respawn finished rows in place; when off, finished rows
        freeze and stepping the batch raises :class:`StateError`
    terminate_episodes : internal switch for the grasp check; when off,
        done flags are still reported but rows never freeze or respawn
    """

    def __init__(self, cfg: RunConfig, num_envs: int, seed: int,
                 eval_mode: bool = False, auto_reset: bool = True,
                 terminate_episodes: bool = True, _assets=None):
        if num_envs < 1:
            raise DataError("num_envs must be positive")
        self.cfg = cfg
        self.env_cfg = cfg.env
        self.sur_cfg = cfg.surrogate
        self.num_envs = int(num_envs)
        self.eval_mode = bool(eval_mode)
        self.auto_reset = bool(auto_reset)
        self.terminate_episodes = bool(terminate_episodes)

        if _assets is None:
            chain = _resolve_chain(cfg.env.chain)
            hand = _resolve_hand(cfg.env.hand)
            objects = load_object_set(
                cfg.env.objects, hand, cfg.env.mass_distributions,
                voxel_size=cfg.env.voxel_size, padding=cfg.env.sdf_padding)
            rcfg = cfg.reward
            if rcfg.manip_det_max is None:
                if chain.jacobian_det_max is None:
                    raise DataError(
                        "no manipulability scale: chain carries no calibrated "
                        "jacobian_det_max and reward.manip_det_max is unset")
                rcfg = dataclasses.replace(rcfg, manip_det_max=chain.jacobian_det_max)
            neutral_q = neutral_config(chain, cfg.env)
            _assets = (chain, hand, objects, rcfg, neutral_q)
        self._assets = _assets
        self.chain, self.hand, self.object_set, self.reward_cfg, self._neutral_q = _assets

        ee, _, _ = fk_batch(self.chain, self._neutral_q[None, :])
        self._neutral_ee_pos = ee[0, :3, 3].copy()
        self._neutral_ee_quat = mat_to_quat(ee[0, :3, :3])
        self._stage1_dir = self._toward_workspace()

        weights = np.asarray(cfg.env.stable_weights, dtype=np.float64)
        if weights.shape != (3,) or np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise DataError("stable_weights must be three non-negative values summing to 1")
        self._stable_cum = np.cumsum(weights)

        self.n_categories = len(self.object_set.categories)
        self.n_obs = 54 + self.n_categories
        self.max_steps = cfg.env.max_steps_eval if eval_mode else cfg.env.max_steps_train

        self.tracker = CurriculumTracker(cfg.curriculum, len(self.object_set))

        B = self.num_envs
        seqs = np.random.SeedSequence(seed).spawn(B)
        self.rngs = [np.random.Generator(np.random.PCG64(s)) for s in seqs]

        self.q = np.zeros((B, self.chain.dof))
        self.controls = np.zeros((B, 5))
        self.ee_pos = np.zeros((B, 3))
        self.ee_quat = np.tile([0.0, 0.0, 0.0, 1.0], (B, 1))
        self.obj_index = np.zeros(B, dtype=np.int64)
        self.obj_pos = np.zeros((B, 3))
        self.obj_quat = np.tile([0.0, 0.0, 0.0, 1.0], (B, 1))
        self.obj_mass = np.zeros(B)
        self.attached = np.zeros(B, dtype=bool)
        self.hold_streak = np.zeros(B, dtype=np.int64)
        self.off_pos = np.zeros((B, 3))
        self.off_quat = np.tile([0.0, 0.0, 0.0, 1.0], (B, 1))
        self.step_count = np.zeros(B, dtype=np.int64)
        self.stage_arr = np.zeros(B, dtype=np.int64)
        self.probe_sdf = np.zeros((B, 10))
        self.prev_pos_dist = np.zeros(B)
        self.prev_rot_dist = np.zeros(B)
        self.prev_joint_dist = np.zeros(B)
        self.prev_orient_dist = np.zeros(B)
        self.prev_reach_sdf = np.zeros((B, 6))
        self._frozen = np.zeros(B, dtype=bool)
        # (EpisodeState, reason) pairs for rows that terminated on the
        # latest step; only populated when auto_reset respawns them
        self.finished_episodes: list = []

        self._success_env: Optional[GraspEnv] = None
        self.reset()

    # -- spawning -----------------------------------------------------

    def _toward_workspace(self) -> np.ndarray:
        """Horizontal unit direction from the neutral hand toward the
        middle of the spawn region.  Stage-1 objects go a short reach
        away along it, which keeps them in the well-conditioned part of
        the arm's envelope; dropping them behind the palm instead can
        leave the straight-line reach pinned against a wrist stop."""
        mid = 0.5 * (np.asarray(self.env_cfg.workspace_lo) + np.asarray(self.env_cfg.workspace_hi))
        h = mid - self._neutral_ee_pos[:2]
        n = np.linalg.norm(h)
        if n > 1e-6:
            return h / n
        return np.array([1.0, 0.0])

    def _sample_mass(self, rng: np.random.Generator, obj: int) -> float:
        mean = self.object_set.mass_mean[obj]
        sigma = self.object_set.mass_sigma[obj]
        while True:
            z = rng.standard_normal()
            if abs(z) <= 3.0:
                return float(mean + sigma * z)

    def _spawn_row(self, i: int) -> None:
        rng = self.rngs[i]
        stage = self.tracker.stage
        cfg = self.env_cfg
        oi = int(rng.integers(len(self.object_set)))
        entry = self.object_set.entries[oi]

        if stage >= 2:
            pick = int(np.searchsorted(self._stable_cum, rng.random(), side="right"))
            pick = min(pick, 2)
            base = entry.annotation.stable_rotations[pick]
            yaw = rng.uniform(-cfg.spawn_yaw_range, cfg.spawn_yaw_range)
            quat = quat_normalize(quat_multiply(quat_about_z(yaw), base))
            lo0, hi0 = world_aabb(np.zeros(3), quat, entry.bbox_lo, entry.bbox_hi)
            z = rest_height(quat, entry.bbox_lo, entry.bbox_hi, cfg.table_height)
            ws_lo = np.asarray(cfg.workspace_lo)
            ws_hi = np.asarray(cfg.workspace_hi)
            for _ in range(cfg.spawn_rejection_limit):
                xy = rng.uniform(ws_lo, ws_hi)
                frac = support_fraction(lo0[:2] + xy, hi0[:2] + xy, ws_lo, ws_hi)
                if frac >= cfg.workspace_support:
                    break
            else:
                raise DataError(
                    f"workspace too small: no placement with support >= "
                    f"{cfg.workspace_support} in {cfg.spawn_rejection_limit} draws")
            self.obj_pos[i] = (xy[0], xy[1], z)
            self.obj_quat[i] = quat
            mass = self._sample_mass(rng, oi)
            box_lo = np.asarray(cfg.hand_box_lo)
            box_hi = np.asarray(cfg.hand_box_hi)
            for _ in range(HAND_SPAWN_TRIES):
                cand = rng.uniform(self.chain.lower, self.chain.upper,
                                   size=(HAND_SPAWN_BLOCK, self.chain.dof))
                mats, _, _ = fk_batch(self.chain, cand)
                pos = mats[:, :3, 3]
                ok = np.all((pos >= box_lo) & (pos <= box_hi), axis=1)
                hits = np.nonzero(ok)[0]
                if hits.size:
                    j = int(hits[0])
                    self.q[i] = cand[j]
                    self.ee_pos[i] = pos[j]
                    self.ee_quat[i] = mat_to_quat(mats[j, :3, :3])
                    break
            else:
                raise DataError(
                    "hand spawn box unreachable: no sampled arm configuration "
                    f"landed inside it in {HAND_SPAWN_TRIES * HAND_SPAWN_BLOCK} draws")
            self.controls[i] = rng.uniform(self.hand.control_lower, self.hand.control_upper)
        else:
            self.q[i] = self._neutral_q
            self.ee_pos[i] = self._neutral_ee_pos
            self.ee_quat[i] = self._neutral_ee_quat
            self.controls[i] = 0.0
            quat = entry.annotation.nominal_rotation
            lo0, hi0 = world_aabb(np.zeros(3), quat, entry.bbox_lo, entry.bbox_hi)
            half = 0.5 * (hi0[:2] - lo0[:2])
            center = 0.5 * (hi0[:2] + lo0[:2])
            n = self._stage1_dir
            # distance from object center to its near face along -n
            extent = float(np.abs(n) @ half - center @ n)
            xy = self.ee_pos[i, :2] + n * (cfg.stage1_offset + extent)
            z = rest_height(quat, entry.bbox_lo, entry.bbox_hi, cfg.table_height)
            self.obj_pos[i] = (xy[0], xy[1], z)
            self.obj_quat[i] = np.asarray(quat, dtype=np.float64)
            mass = self._sample_mass(rng, oi)

        self.obj_index[i] = oi
        self.obj_mass[i] = mass
        self.stage_arr[i] = stage
        self.attached[i] = False
        self.hold_streak[i] = 0
        self.off_pos[i] = 0.0
        self.off_quat[i] = (0.0, 0.0, 0.0, 1.0)
        self.step_count[i] = 0
        self._frozen[i] = False

    def reset(self) -> np.ndarray:
        """Respawn every row and return the first observation."""
        for i in range(self.num_envs):
            self._spawn_row(i)
        self._refresh_caches(np.arange(self.num_envs))
        return self.observe()

    # -- geometry helpers ---------------------------------------------

    def _sdf_rows(self, points: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Signed distance from world points (n, P, 3) to each row's
        object, grouped by object so every grid is queried once."""
        n, P = points.shape[:2]
        out = np.empty((n, P))
        idx = self.obj_index[rows]
        rot = quat_to_mat(self.obj_quat[rows])
        local = np.einsum("bji,bpj->bpi", rot, points - self.obj_pos[rows, None, :])
        for oi in np.unique(idx):
            sel = np.nonzero(idx == oi)[0]
            grid = self.object_set.entries[int(oi)].sdf
            out[sel] = grid.query(local[sel].reshape(-1, 3)).reshape(sel.size, P)
        return out

    def _site_points(self, rows: np.ndarray):
        joints = self.hand.expand_controls(self.controls[rows])
        mats = quat_to_mat(self.ee_quat[rows])
        return self.hand.site_points_batch(self.ee_pos[rows], mats, joints)

    def _distances(self, rows: np.ndarray):
        idx = self.obj_index[rows]
        rot = quat_to_mat(self.obj_quat[rows])
        p_rel = np.einsum("bji,bj->bi", rot, self.ee_pos[rows] - self.obj_pos[rows])
        q_rel = quat_multiply(quat_conjugate(self.obj_quat[rows]), self.ee_quat[rows])
        pos_dist = np.linalg.norm(p_rel - self.object_set.grasp_pos[idx], axis=1)
        rot_dist = angular_distance(q_rel, self.object_set.grasp_quat[idx])
        joint_dist = np.mean(np.abs(self.controls[rows] - self.object_set.grasp_controls[idx]), axis=1)
        orient_dist = angular_distance(self.obj_quat[rows], self.object_set.nominal_quat[idx])
        return pos_dist, rot_dist, joint_dist, orient_dist

    def _refresh_caches(self, rows: np.ndarray) -> None:
        """Recompute the differential-reward caches and probe distances
        for freshly spawned (or restored) rows."""
        probes, holds = self._site_points(rows)
        sdf = self._sdf_rows(np.concatenate([probes, holds], axis=1), rows)
        self.probe_sdf[rows] = sdf[:, :10]
        self.prev_reach_sdf[rows] = sdf[:, 10:]
        pos_d, rot_d, joint_d, orient_d = self._distances(rows)
        self.prev_pos_dist[rows] = pos_d
        self.prev_rot_dist[rows] = rot_d
        self.prev_joint_dist[rows] = joint_d
        self.prev_orient_dist[rows] = orient_d

    # -- observation --------------------------------------------------

    def observe(self) -> np.ndarray:
        """Flat observation batch (num_envs, 54 + n_categories).

        With noise enabled this consumes exactly ``NOISE_DRAWS`` normals
        per row; with it disabled no generator state is touched.
        """
        B = self.num_envs
        C = self.n_categories
        idx = self.obj_index
        obs = np.zeros((B, self.n_obs))
        obs[:, 0:3] = self.ee_pos
        obs[:, 3:7] = self.ee_quat
        obs[:, 7:12] = self.controls
        rot = quat_to_mat(self.obj_quat)
        obs[:, 12:15] = np.einsum("bji,bj->bi", rot, self.ee_pos - self.obj_pos)
        obs[:, 15:19] = quat_multiply(quat_conjugate(self.obj_quat), self.ee_quat)
        obs[:, 19:22] = self.obj_pos
        obs[:, 22:26] = self.obj_quat
        lo, hi = world_aabb(self.obj_pos, self.obj_quat,
                            self.object_set.bbox_lo[idx], self.object_set.bbox_hi[idx])
        obs[:, 26:29] = lo
        obs[:, 29:32] = hi
        obs[:, 32:42] = self.probe_sdf
        obs[np.arange(B), 42 + self.object_set.category_index[idx]] = 1.0
        g0 = 42 + C
        obs[:, g0:g0 + 3] = self.object_set.grasp_pos[idx]
        obs[:, g0 + 3:g0 + 7] = self.object_set.grasp_quat[idx]
        obs[:, g0 + 7:g0 + 12] = self.object_set.grasp_controls[idx]
        if self.env_cfg.obs_noise:
            self._apply_noise(obs)
        return obs

    def _apply_noise(self, obs: np.ndarray) -> None:
        cfg = self.env_cfg
        clip = cfg.noise_clip_sigmas
        draws = np.stack([g.standard_normal(NOISE_DRAWS) for g in self.rngs])
        pos = np.clip(draws[:, 0:25], -clip, clip) * cfg.pos_noise_sigma
        for (a, b), d0 in _POS_NOISE_COLS:
            obs[:, a:b] += pos[:, d0:d0 + (b - a)]
        for k, (a, b) in enumerate(_QUAT_NOISE_COLS):
            axis = draws[:, 25 + 4 * k:28 + 4 * k]
            norm = np.linalg.norm(axis, axis=1, keepdims=True)
            axis = np.where(norm < 1e-12, (0.0, 0.0, 1.0), axis / np.maximum(norm, 1e-12))
            angle = np.clip(draws[:, 28 + 4 * k], -clip, clip) * cfg.rot_noise_sigma
            wobble = quat_from_axis_angle(axis, angle)
            obs[:, a:b] = quat_normalize(quat_multiply(wobble, obs[:, a:b]))
        obs[:, 7:12] += np.clip(draws[:, 37:42], -clip, clip) * cfg.rot_noise_sigma

    # -- stepping -----------------------------------------------------

    def _clamp_actions(self, actions: np.ndarray):
        rcfg = self.reward_cfg
        dp = actions[:, 0:3]
        norm = np.linalg.norm(dp, axis=1)
        dp = dp * np.minimum(1.0, rcfg.pos_step / np.maximum(norm, 1e-12))[:, None]
        rv = quat_to_rotvec(quat_from_euler_xyz(actions[:, 3:6]))
        angle = np.linalg.norm(rv, axis=1)
        rv = rv * np.minimum(1.0, rcfg.rot_step / np.maximum(angle, 1e-12))[:, None]
        du = np.clip(actions[:, 6:11], -rcfg.joint_step, rcfg.joint_step)
        return dp, quat_from_rotvec(rv), du

    def step(self, actions: np.ndarray):
        """Advance every row one tick.

        Returns ``(obs, rewards, done, reasons)`` where rewards is a
        :class:`RewardBreakdown` of per-row arrays and reasons holds a
        termination code for done rows, -1 elsewhere.
        """
        B = self.num_envs
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (B, 11):
            raise DataError(f"actions must have shape ({B}, 11), got {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise DataError("actions must be finite")
        if self._frozen.any():
            rows = np.nonzero(self._frozen)[0]
            raise StateError(f"episode rows {rows.tolist()} are done; reset before stepping")
        self.finished_episodes = []

        dp, dq, du = self._clamp_actions(actions)
        target_pos = self.ee_pos + dp
        target_quat = quat_normalize(quat_multiply(dq, self.ee_quat))
        prev_ee = self.ee_pos
        self.q, self.ee_pos, self.ee_quat = ik_step_batch(
            self.chain, self.q, target_pos, target_quat, self.reward_cfg.dt,
            return_pose=True)
        self.controls = np.clip(self.controls + du,
                                self.hand.control_lower, self.hand.control_upper)
        hand_motion = self.ee_pos - prev_ee

        carried = np.nonzero(self.attached)[0]
        if carried.size:
            self.obj_pos[carried] = self.ee_pos[carried] + quat_rotate(
                self.ee_quat[carried], self.off_pos[carried])
            self.obj_quat[carried] = quat_normalize(quat_multiply(
                self.ee_quat[carried], self.off_quat[carried]))

        rows_all = np.arange(B)
        probes, holds = self._site_points(rows_all)
        all_pts = np.concatenate([probes, holds], axis=1)

        fell = np.zeros(B, dtype=bool)
        free = np.nonzero(~self.attached)[0]
        if free.size:
            pre_sdf = self._sdf_rows(probes[free], free)
            d_pos, d_yaw = push_response(pre_sdf, probes[free], self.obj_pos[free],
                                         hand_motion[free], self.sur_cfg.push_yaw_gain)
            moved = np.any(d_pos != 0.0, axis=1) | (d_yaw != 0.0)
            if moved.any():
                rows = free[moved]
                self.obj_pos[rows] += d_pos[moved]
                self.obj_quat[rows] = quat_normalize(quat_multiply(
                    quat_about_z(d_yaw[moved]), self.obj_quat[rows]))
                idx = self.obj_index[rows]
                lo, hi = world_aabb(self.obj_pos[rows], self.obj_quat[rows],
                                    self.object_set.bbox_lo[idx], self.object_set.bbox_hi[idx])
                frac = support_fraction(lo[:, :2], hi[:, :2],
                                        self.env_cfg.table_lo, self.env_cfg.table_hi)
                fell[rows] = frac < self.sur_cfg.min_support_fraction

        sdf = self._sdf_rows(all_pts, rows_all)
        probe_sdf = sdf[:, :10]
        hold_sdf = sdf[:, 10:]

        hold = hold_closure(hold_sdf, self.reward_cfg)
        self.attached, self.hold_streak, just_att, just_det = attachment_step(
            self.attached, self.hold_streak, hold, self.sur_cfg)
        # a row whose object just slid off cannot latch on the same tick
        if fell.any():
            self.attached[fell] = False
            self.hold_streak[fell] = 0
            just_att &= ~fell

        if just_att.any():
            rows = np.nonzero(just_att)[0]
            inv = quat_conjugate(self.ee_quat[rows])
            self.off_pos[rows] = quat_rotate(inv, self.obj_pos[rows] - self.ee_pos[rows])
            self.off_quat[rows] = quat_normalize(quat_multiply(inv, self.obj_quat[rows]))
        if just_det.any():
            rows = np.nonzero(just_det)[0]
            idx = self.obj_index[rows]
            for oi in np.unique(idx):
                sub = rows[idx == oi]
                entry = self.object_set.entries[int(oi)]
                snapped, _, _ = snap_to_stable(self.obj_quat[sub],
                                               entry.annotation.stable_rotations)
                self.obj_quat[sub] = snapped
                self.obj_pos[sub, 2] = rest_height(snapped, entry.bbox_lo, entry.bbox_hi,
                                                   self.env_cfg.table_height)
            lo, hi = world_aabb(self.obj_pos[rows], self.obj_quat[rows],
                                self.object_set.bbox_lo[idx], self.object_set.bbox_hi[idx])
            frac = support_fraction(lo[:, :2], hi[:, :2],
                                    self.env_cfg.table_lo, self.env_cfg.table_hi)
            fell[rows] |= frac < self.sur_cfg.min_support_fraction
            self.off_pos[rows] = 0.0
            self.off_quat[rows] = (0.0, 0.0, 0.0, 1.0)
            post = self._sdf_rows(all_pts[rows], rows)
            probe_sdf[rows] = post[:, :10]
            hold_sdf[rows] = post[:, 10:]

        self.probe_sdf = probe_sdf
        pos_d, rot_d, joint_d, orient_d = self._distances(rows_all)
        dets = manipulability_batch(self.chain, self.q)
        rewards = combine(
            self.prev_pos_dist, pos_d, self.prev_rot_dist, rot_d,
            self.prev_joint_dist, joint_d, self.prev_reach_sdf, hold_sdf,
            hold_sdf, self.prev_orient_dist, orient_d, dets, self.reward_cfg,
            manipulation_mask=(self.stage_arr == 2))

        self.step_count += 1
        reached = rewards.reached > 0.0
        timeout = self.step_count >= self.max_steps
        done = reached | fell | timeout
        reasons = np.full(B, -1, dtype=np.int64)
        reasons[timeout] = REASON_TIMEOUT
        reasons[fell] = REASON_OFF_TABLE
        reasons[reached] = REASON_TARGET

        self.prev_pos_dist = pos_d
        self.prev_rot_dist = rot_d
        self.prev_joint_dist = joint_d
        self.prev_orient_dist = orient_d
        self.prev_reach_sdf = hold_sdf.copy()

        if self.terminate_episodes and done.any():
            done_rows = np.nonzero(done)[0]
            for i in done_rows:
                self.tracker.record(self.obj_index[i], reasons[i] == REASON_TARGET)
            self.tracker.update()
            if self.auto_reset:
                # keep the terminal states around; respawning wipes the rows
                for i in done_rows:
                    self.finished_episodes.append((self.get_state(i), int(reasons[i])))
                    self._spawn_row(i)
                self._refresh_caches(done_rows)
            else:
                self._frozen[done_rows] = True

        return self.observe(), rewards, done, reasons

    # -- persistence --------------------------------------------------

    def get_state(self, i: int) -> EpisodeState:
        return EpisodeState(
            arm_q=self.q[i].copy(),
            controls=self.controls[i].copy(),
            obj_index=int(self.obj_index[i]),
            obj_pos=self.obj_pos[i].copy(),
            obj_quat=self.obj_quat[i].copy(),
            obj_mass=float(self.obj_mass[i]),
            attached=bool(self.attached[i]),
            hold_streak=int(self.hold_streak[i]),
            off_pos=self.off_pos[i].copy(),
            off_quat=self.off_quat[i].copy(),
            step_count=int(self.step_count[i]),
            stage=int(self.stage_arr[i]),
            prev_pos_dist=float(self.prev_pos_dist[i]),
            prev_rot_dist=float(self.prev_rot_dist[i]),
            prev_joint_dist=float(self.prev_joint_dist[i]),
            prev_orient_dist=float(self.prev_orient_dist[i]),
            prev_reach_sdf=self.prev_reach_sdf[i].copy(),
            rng_state=self.rngs[i].bit_generator.state,
            done=bool(self._frozen[i]),
        )

    def set_state(self, i: int, es: EpisodeState) -> None:
        if not 0 <= es.obj_index < len(self.object_set):
            raise DataError(f"state refers to object {es.obj_index} outside the set")
        self.q[i] = es.arm_q
        self.controls[i] = es.controls
        self.obj_index[i] = es.obj_index
        self.obj_pos[i] = es.obj_pos
        self.obj_quat[i] = quat_normalize(np.asarray(es.obj_quat, dtype=np.float64))
        self.obj_mass[i] = es.obj_mass
        self.attached[i] = es.attached
        self.hold_streak[i] = es.hold_streak
        self.off_pos[i] = es.off_pos
        self.off_quat[i] = es.off_quat
        self.step_count[i] = es.step_count
        self.stage_arr[i] = es.stage
        self.prev_pos_dist[i] = es.prev_pos_dist
        self.prev_rot_dist[i] = es.prev_rot_dist
        self.prev_joint_dist[i] = es.prev_joint_dist
        self.prev_orient_dist[i] = es.prev_orient_dist
        self.prev_reach_sdf[i] = es.prev_reach_sdf
        gen = np.random.Generator(np.random.PCG64())
        gen.bit_generator.state = es.rng_state
        self.rngs[i] = gen
        mats, _, _ = fk_batch(self.chain, self.q[i][None, :])
        self.ee_pos[i] = mats[0, :3, 3]
        self.ee_quat[i] = mat_to_quat(mats[0, :3, :3])
        row = np.array([i])
        probes, holds = self._site_points(row)
        sdf = self._sdf_rows(np.concatenate([probes, holds], axis=1), row)
        self.probe_sdf[i] = sdf[0, :10]
        self._frozen[i] = es.done

    def snapshot(self) -> dict:
        """Whole-batch state for checkpointing, arrays copied out."""
        return {
            "num_envs": self.num_envs,
            "rows": [self.get_state(i) for i in range(self.num_envs)],
            "tracker": self.tracker.state(),
        }

    def restore(self, snap: dict) -> None:
        if snap["num_envs"] != self.num_envs:
            raise DataError(
                f"snapshot holds {snap['num_envs']} rows, env has {self.num_envs}")
        self.tracker.set_state(snap["tracker"])
        for i, es in enumerate(snap["rows"]):
            self.set_state(i, es)

    # -- grasp check --------------------------------------------------

    def success_test(self, es: EpisodeState) -> bool:
        """Close the fingers on a restored scene and see if it latches.

        Runs a fixed closing schedule on a private single-row copy: arm
        held still, controls ramped toward the object's closing values.
        Passes when the object is attached at the end and the object's
        key probe point is within the hold radius; sliding off the table
        fails immediately.
        """
        if self._success_env is None:
            cfg = dataclasses.replace(self.cfg, env=dataclasses.replace(self.cfg.env, obs_noise=False))
            self._success_env = GraspEnv(
                cfg, 1, seed=0, eval_mode=True, auto_reset=False,
                terminate_episodes=False, _assets=self._assets)
        env = self._success_env
        env.set_state(0, dataclasses.replace(es, step_count=0, done=False))
        close_u = self.object_set.close_controls[es.obj_index]
        key = int(self.object_set.key_probe_index[es.obj_index])
        step = self.reward_cfg.joint_step
        actions = np.zeros((1, 11))
        for _ in range(CLOSE_STEPS):
            actions[0, 6:] = np.clip(close_u - env.controls[0], -step, step)
            _, _, done, reasons = env.step(actions)
            if done[0] and reasons[0] == REASON_OFF_TABLE:
                return False
        return bool(env.attached[0]) and float(env.probe_sdf[0, key]) <= self.reward_cfg.hold_radius


def scripted_reach_policy(env: GraspEnv) -> np.ndarray:
    """Greedy proportional controller toward each row's grasp pose.

    Emits budget-respecting actions aiming the hand at the annotated
    pose in the object's current frame; useful as a sanity rollout and
    for exercising the full step pipeline without a learner.
    """
    idx = env.obj_index
    rot = quat_to_mat(env.obj_quat)
    p_des = env.obj_pos + np.einsum("bij,bj->bi", rot, env.object_set.grasp_pos[idx])
    q_des = quat_multiply(env.obj_quat, env.object_set.grasp_quat[idx])
    rcfg = env.reward_cfg
    dp = p_des - env.ee_pos
    norm = np.linalg.norm(dp, axis=1)
    dp = dp * np.minimum(1.0, rcfg.pos_step / np.maximum(norm, 1e-12))[:, None]
    q_err = quat_multiply(q_des, quat_conjugate(env.ee_quat))
    rv = quat_to_rotvec(q_err)
    angle = np.linalg.norm(rv, axis=1)
    rv = rv * np.minimum(1.0, rcfg.rot_step / np.maximum(angle, 1e-12))[:, None]
    du = np.clip(env.object_set.grasp_controls[idx] - env.controls,
                 -rcfg.joint_step, rcfg.joint_step)
    return np.concatenate([dp, rv, du], axis=1)
