"""Compact on-policy learner: a fully connected Gaussian policy trained
with clipped-surrogate PPO and generalized advantage estimation.

Everything is plain numpy with hand-written backprop.  The network is
small enough that a framework would cost more in dependencies than it
saves in code, and explicit gradients keep training bit-reproducible:
given the same seed, the same config and worker count 1, two runs
produce identical weights, metrics and checkpoints.

The policy emits actions in a normalized per-dimension unit cube; the
tanh-squashed mean lives in [-1, 1] and the cube maps onto the per-step
motion budgets at the environment boundary, so nothing the sampler can
produce exceeds a budget after the final clip.
"""

from __future__ import annotations

import csv
import dataclasses
import pickle
import struct
import time
from collections import deque
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig
from .envcore import REASON_TARGET, GraspEnv
from .errors import DataError, DivergenceError
from .reward import RewardBreakdown

CHECKPOINT_MAGIC = b"PGCKPT1\0"

_LOG_2PI = float(np.log(2.0 * np.pi))


def _elu(z):
    return np.where(z > 0.0, z, np.expm1(z))


def _elu_grad(z, out):
    # derivative is 1 above zero and elu(z)+1 below
    return np.where(z > 0.0, 1.0, out + 1.0)


class PolicyNet:
    """Three hidden layers with ELU, a tanh mean head, a per-dimension
    log-std vector and a value head off the last hidden layer."""

    def __init__(self, obs_dim: int, act_dim: int = 11,
                 hidden=(512, 256, 128), log_std_init: float = -0.5,
                 seed: int = 0, dtype=np.float32):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        dims = (self.obs_dim,) + self.hidden

        def dense(n_in, n_out, scale):
            w = (rng.standard_normal((n_in, n_out)) * scale / np.sqrt(n_in))
            return w.astype(self.dtype), np.zeros(n_out, dtype=self.dtype)

        self.layers = [dense(a, b, np.sqrt(2.0)) for a, b in zip(dims[:-1], dims[1:])]
        # a small mean head keeps the initial policy near zero motion
        self.w_mean, self.b_mean = dense(self.hidden[-1], self.act_dim, 0.01)
        self.w_value, self.b_value = dense(self.hidden[-1], 1, 1.0)
        self.log_std = np.full(self.act_dim, log_std_init, dtype=self.dtype)

    def params(self) -> list:
        out = []
        for w, b in self.layers:
            out += [w, b]
        out += [self.w_mean, self.b_mean, self.w_value, self.b_value, self.log_std]
        return out

    def set_params(self, values) -> None:
        have = self.params()
        if len(values) != len(have):
            raise DataError("parameter list has wrong length")
        flat = []
        for w, b in self.layers:
            flat += [w, b]
        for dst, src in zip(have, values):
            if dst.shape != src.shape:
                raise DataError(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src

    def forward(self, obs: np.ndarray):
        """Returns (mean_raw, value, cache); obs is (B, obs_dim)."""
        h = obs.astype(self.dtype, copy=False)
        zs, hs = [], [h]
        for w, b in self.layers:
            z = h @ w + b
            h = _elu(z)
            zs.append(z)
            hs.append(h)
        mean_raw = h @ self.w_mean + self.b_mean
        value = (h @ self.w_value + self.b_value)[:, 0]
        return mean_raw, value, (zs, hs)

    def backward(self, cache, d_mean_raw, d_value):
        """Gradients of a scalar loss given its derivative at both heads.
        Returns a list aligned with params(); the log-std slot is zeros
        because that gradient never flows through the trunk."""
        zs, hs = cache
        last = hs[-1]
        dv = d_value[:, None].astype(self.dtype, copy=False)
        dm = d_mean_raw.astype(self.dtype, copy=False)
        g_w_mean = last.T @ dm
        g_b_mean = dm.sum(axis=0)
        g_w_value = last.T @ dv
        g_b_value = dv.sum(axis=0)
        dh = dm @ self.w_mean.T + dv @ self.w_value.T
        grads = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            dz = dh * _elu_grad(zs[k], hs[k + 1])
            grads[2 * k] = hs[k].T @ dz
            grads[2 * k + 1] = dz.sum(axis=0)
            if k:
                dh = dz @ self.layers[k][0].T
        return grads + [g_w_mean, g_b_mean, g_w_value, g_b_value,
                        np.zeros_like(self.log_std)]

    def distribution(self, obs: np.ndarray):
        """Squashed action mean in [-1, 1] plus the shared std vector."""
        mean_raw, value, cache = self.forward(obs)
        return np.tanh(mean_raw), np.exp(self.log_std), value, (mean_raw, cache)

    def astype(self, dtype) -> "PolicyNet":
        """Copy with converted parameters (float64 copies drive the
        finite-difference gradient checks)."""
        twin = PolicyNet(self.obs_dim, self.act_dim, self.hidden, 0.0,
                         seed=0, dtype=dtype)
        twin.set_params([p.astype(dtype) for p in self.params()])
        return twin


def gaussian_log_prob(x, mean, log_std):
    """Diagonal-Gaussian log density, summed over action dimensions."""
    z = (x - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))


class Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)

    def state(self) -> dict:
        return {"m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v], "t": self.t}

    def set_state(self, state: dict) -> None:
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src
        self.t = int(state["t"])


class RunningNorm:
    """Streaming mean/variance used to whiten observations.  Untouched
    dimensions keep variance 1 so the transform starts as identity."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.count = 0.0
        self.clip = float(clip)

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_m2 = ((batch - b_mean) ** 2).sum(axis=0)
        delta = b_mean - self.mean
        total = self.count + n
        self.mean += delta * (n / total)
        self.m2 += b_m2 + delta * delta * (self.count * n / total)
        self.count = total

    def normalize(self, batch: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.asarray(batch, dtype=np.float64)
        var = self.m2 / (self.count - 1)
        z = (batch - self.mean) / np.sqrt(var + 1e-8)
        return np.clip(z, -self.clip, self.clip)

    def state(self) -> dict:
        return {"mean": self.mean.copy(), "m2": self.m2.copy(),
                "count": self.count, "clip": self.clip}

    def set_state(self, state: dict) -> None:
        self.mean[...] = state["mean"]
        self.m2[...] = state["m2"]
        self.count = float(state["count"])
        self.clip = float(state["clip"])


def action_budgets(reward_cfg) -> np.ndarray:
    """Per-dimension half-widths of the action cube in metric units."""
    return np.array([reward_cfg.pos_step] * 3
                    + [reward_cfg.rot_step] * 3
                    + [reward_cfg.joint_step] * 5)


def gae(rewards, values, dones, gamma: float, lam: float, bootstrap):
    """Generalized advantage estimation over a (horizon, batch) rollout.

    `dones[t]` marks transitions whose successor starts a new episode, so
    nothing bootstraps across them.  `bootstrap` is V(s_T) for rows still
    running at the end of the horizon.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    bootstrap = np.asarray(bootstrap, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise DataError("gae inputs must share the (horizon, batch) shape")
    if not (np.isfinite(rewards).all() and np.isfinite(values).all()
            and np.isfinite(bootstrap).all()):
        raise DataError("gae inputs must be finite")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    carry = np.zeros_like(bootstrap)
    next_value = bootstrap
    for t in range(T - 1, -1, -1):
        live = ~dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        carry = delta + gamma * lam * carry * live
        adv[t] = carry
        next_value = values[t]
    return adv, adv + values


@dataclasses.dataclass
class RolloutBuffer:
    """One horizon of experience from every env row, flattened for the
    update pass."""

    obs: np.ndarray        # (T, B, obs_dim), already normalized
    actions: np.ndarray    # (T, B, act_dim), pre-clip samples
    log_probs: np.ndarray  # (T, B)
    rewards: np.ndarray    # (T, B)
    values: np.ndarray     # (T, B)
    dones: np.ndarray      # (T, B)
    advantages: np.ndarray = None
    returns: np.ndarray = None

    def finish(self, bootstrap, cfg: TrainConfig) -> None:
        self.advantages, self.returns = gae(
            self.rewards, self.values, self.dones,
            cfg.gamma, cfg.gae_lambda, bootstrap)

    def flat(self):
        T, B = self.rewards.shape
        n = T * B
        return (self.obs.reshape(n, -1), self.actions.reshape(n, -1),
                self.log_probs.reshape(n), self.advantages.reshape(n),
                self.returns.reshape(n))


def loss_and_grads(net: PolicyNet, obs, actions, logp_old, adv, ret,
                   cfg: TrainConfig) -> tuple:
    """PPO loss on one minibatch plus its exact gradients.

    Returns (total_loss, grads, stats) with grads aligned to
    net.params().  Pure apart from reading the net, which makes it
    directly checkable against finite differences.
    """
    mean, std, value, (_, cache) = net.distribution(obs)
    mean = mean.astype(np.float64)
    value = value.astype(np.float64)
    logp = gaussian_log_prob(actions, mean, net.log_std.astype(np.float64))
    ratio = np.exp(logp - logp_old)
    kl = float(np.mean(ratio - 1.0 - np.log(ratio)))
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv
    policy_loss = -float(np.minimum(surr1, surr2).mean())
    v_err = value - ret
    value_loss = 0.5 * float(np.mean(v_err * v_err))
    entropy = gaussian_entropy(net.log_std)
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    m = obs.shape[0]
    # d policy loss / d logp, zero where the clip discards the sample
    g_logp = np.where(surr1 <= surr2, -adv * ratio, 0.0) / m
    sigma = std[None, :].astype(np.float64)
    diff = (actions - mean) / (sigma * sigma)
    d_mean_raw = g_logp[:, None] * diff * (1.0 - mean * mean)
    d_log_std = (g_logp[:, None] * (((actions - mean) / sigma) ** 2 - 1.0)).sum(axis=0)
    d_log_std = d_log_std - cfg.entropy_coef
    d_value = cfg.value_coef * v_err / m
    grads = net.backward(cache, d_mean_raw, d_value)
    grads[-1] = grads[-1] + d_log_std.astype(net.dtype)
    stats = {"policy_loss": policy_loss, "value_loss": value_loss,
             "entropy": entropy, "kl": kl}
    return total, grads, stats


def ppo_update(buffer: RolloutBuffer, net: PolicyNet, optimizer: Adam,
               cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """Runs the clipped-surrogate epochs over a finished buffer.

    Raises DivergenceError when the mean KL estimate against the behavior
    policy exceeds kl_abort_factor * kl_target; at that point the policy
    has moved too far for the importance ratios to mean anything.
    """
    obs, actions, logp_old, adv, ret = buffer.flat()
    if cfg.normalize_adv:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = obs.shape[0]
    mb = n // cfg.minibatches
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0}
    batches = 0
    stop = False
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for k in range(cfg.minibatches):
            rows = order[k * mb:(k + 1) * mb]
            _, grads, stats = loss_and_grads(
                net, obs[rows], actions[rows], logp_old[rows],
                adv[rows], ret[rows], cfg)
            kl = stats["kl"]
            if not np.isfinite(kl) or kl > cfg.kl_abort_factor * cfg.kl_target:
                raise DivergenceError(
                    f"KL {kl:.4f} exceeded {cfg.kl_abort_factor:g} x "
                    f"target {cfg.kl_target:g}; aborting update")
            if kl > cfg.kl_early_stop_factor * cfg.kl_target:
                # the behavior policy is already stale; finishing the pass
                # would only push further off it
                stop = True
                break
            optimizer.step(grads)
            for key in totals:
                totals[key] += stats[key]
            batches += 1
        if stop:
            break
    return {k: v / max(batches, 1) for k, v in totals.items()}


METRIC_COLUMNS = (("iteration", "steps", "success_rate")
                  + RewardBreakdown.TERM_NAMES + ("stage", "wall_seconds"))


class Trainer:
    """Owns the env, the net and all mutable training state, so a
    checkpoint can capture everything needed to resume bit-exactly."""

    def __init__(self, cfg: RunConfig, seed: int = 0, out_dir=None,
                 _assets=None):
        self.cfg = cfg
        self.seed = int(seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.env = GraspEnv(cfg, cfg.train.num_envs, seed, _assets=_assets)
        self.net = PolicyNet(self.env.n_obs, 11, seed=self.seed + 1,
                             log_std_init=cfg.train.log_std_init)
        self.optimizer = Adam(self.net.params(), cfg.train.learning_rate)
        self.normalizer = RunningNorm(self.env.n_obs) if cfg.train.normalize_obs else None
        self.rng = np.random.default_rng(self.seed + 2)
        self.budgets = action_budgets(self.env.reward_cfg)
        self.iteration = 0
        self.total_steps = 0
        self.outcomes = deque(maxlen=200)
        self.wall_seconds = 0.0
        self._pending_obs = self.env.observe()
        self._last_stage = self.env.tracker.stage

    # -- rollout -------------------------------------------------------

    def _normalize(self, obs, update: bool):
        if self.normalizer is None:
            return np.asarray(obs, dtype=np.float64)
        if update:
            self.normalizer.update(obs)
        return self.normalizer.normalize(obs)

    def collect(self) -> tuple:
        """Gathers one horizon from every row; returns (buffer, term sums)."""
        tcfg = self.cfg.train
        T, B = tcfg.horizon, tcfg.num_envs
        obs_dim = self.env.n_obs
        buf = RolloutBuffer(
            obs=np.zeros((T, B, obs_dim)),
            actions=np.zeros((T, B, 11)),
            log_probs=np.zeros((T, B)),
            rewards=np.zeros((T, B)),
            values=np.zeros((T, B)),
            dones=np.zeros((T, B), dtype=bool),
        )
        term_sums = dict.fromkeys(RewardBreakdown.TERM_NAMES, 0.0)
        obs_raw = self._pending_obs
        for t in range(T):
            obs_n = self._normalize(obs_raw, update=True)
            mean, std, value, _ = self.net.distribution(obs_n)
            noise = self.rng.standard_normal((B, 11))
            x = mean + std[None, :] * noise
            logp = gaussian_log_prob(x, mean, self.net.log_std.astype(np.float64))
            emitted = self.budgets[None, :] * np.clip(x, -1.0, 1.0)
            obs_raw, breakdown, done, _ = self.env.step(emitted)
            for es, reason in self.env.finished_episodes:
                self.outcomes.append(reason == REASON_TARGET)
            buf.obs[t] = obs_n
            buf.actions[t] = x
            buf.log_probs[t] = logp
            buf.rewards[t] = breakdown.total
            buf.values[t] = value
            buf.dones[t] = done
            for name in term_sums:
                term_sums[name] += float(np.mean(getattr(breakdown, name)))
        self._pending_obs = obs_raw
        obs_n = self._normalize(obs_raw, update=False)
        _, _, bootstrap, _ = self.net.distribution(obs_n)
        buf.finish(bootstrap, tcfg)
        self.total_steps += T * B
        for name in term_sums:
            term_sums[name] /= T
        return buf, term_sums

    # -- iteration loop ------------------------------------------------

    def success_rate(self) -> float:
        if not self.outcomes:
            return 0.0
        return sum(self.outcomes) / len(self.outcomes)

    def run_iteration(self) -> dict:
        start = time.perf_counter()
        buf, term_means = self.collect()
        update_stats = ppo_update(buf, self.net, self.optimizer,
                                  self.cfg.train, self.rng)
        self.iteration += 1
        self.wall_seconds += time.perf_counter() - start
        row = {"iteration": self.iteration, "steps": self.total_steps,
               "success_rate": round(self.success_rate(), 6)}
        row.update({k: round(v, 9) for k, v in term_means.items()})
        row["stage"] = self.env.tracker.stage
        row["wall_seconds"] = round(self.wall_seconds, 3)
        row.update(update_stats)
        return row

    def train(self, log=print) -> list:
        """Runs until the configured step budget; returns metric rows."""
        tcfg = self.cfg.train
        per_iter = tcfg.horizon * tcfg.num_envs
        n_iters = -(-tcfg.total_steps // per_iter)
        writer = self._metrics_writer()
        rows = []
        while self.iteration < n_iters:
            row = self.run_iteration()
            rows.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in METRIC_COLUMNS])
            if self.env.tracker.stage != self._last_stage:
                if log is not None:
                    log(f"curriculum stage {self._last_stage} -> "
                        f"{self.env.tracker.stage} at iteration {self.iteration}")
                self._last_stage = self.env.tracker.stage
            if self.out_dir is not None and (
                    self.iteration % self.cfg.train.checkpoint_every == 0
                    or self.iteration == n_iters):
                self.save_checkpoint(self.out_dir / "checkpoint.bin")
            if log is not None and (self.iteration % 10 == 0
                                    or self.iteration == n_iters):
                log(f"iter {self.iteration}/{n_iters} steps {self.total_steps} "
                    f"success {row['success_rate']:.3f} stage {row['stage']}")
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None
        return rows

    def _metrics_writer(self):
        self._metrics_file = None
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "metrics.csv"
        fresh = not path.exists() or self.iteration == 0
        self._metrics_file = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(self._metrics_file)
        if fresh:
            writer.writerow(METRIC_COLUMNS)
        return writer

    # -- checkpointing -------------------------------------------------

    def save_checkpoint(self, path) -> None:
        payload = {
            "layer_shapes": [tuple(p.shape) for p in self.net.params()],
            "params": [p.copy() for p in self.net.params()],
            "optimizer": self.optimizer.state(),
            "normalizer": None if self.normalizer is None else self.normalizer.state(),
            "rng_state": self.rng.bit_generator.state,
            "iteration": self.iteration,
            "total_steps": self.total_steps,
            "outcomes": list(self.outcomes),
            "wall_seconds": self.wall_seconds,
            "pending_obs": self._pending_obs,
            "last_stage": self._last_stage,
            "env": self.env.snapshot(),
            "obs_dim": self.net.obs_dim,
            "hidden": self.net.hidden,
        }
        blob = pickle.dumps(payload, protocol=4)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
        tmp.replace(path)

    def load_checkpoint(self, path) -> None:
        payload = read_checkpoint(path)
        if payload["obs_dim"] != self.net.obs_dim or tuple(payload["hidden"]) != self.net.hidden:
            raise DataError("checkpoint was written for a different network shape")
        self.net.set_params(payload["params"])
        self.optimizer.set_state(payload["optimizer"])
        if self.normalizer is not None and payload["normalizer"] is not None:
            self.normalizer.set_state(payload["normalizer"])
        self.rng.bit_generator.state = payload["rng_state"]
        self.iteration = int(payload["iteration"])
        self.total_steps = int(payload["total_steps"])
        self.outcomes = deque(payload["outcomes"], maxlen=self.outcomes.maxlen)
        self.wall_seconds = float(payload["wall_seconds"])
        self._pending_obs = payload["pending_obs"]
        self._last_stage = int(payload["last_stage"])
        self.env.restore(payload["env"])


def read_checkpoint(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    blob = raw[len(CHECKPOINT_MAGIC) + 8:]
    if len(blob) != size:
        raise DataError(f"{path}: truncated checkpoint")
    return pickle.loads(blob)


def policy_from_checkpoint(path) -> tuple:
    """Loads just what acting needs: the net and the obs normalizer."""
    payload = read_checkpoint(path)
    net = PolicyNet(payload["obs_dim"], 11, hidden=tuple(payload["hidden"]))
    net.set_params(payload["params"])
    norm = None
    if payload["normalizer"] is not None:
        norm = RunningNorm(payload["obs_dim"])
        norm.set_state(payload["normalizer"])
    return net, norm
