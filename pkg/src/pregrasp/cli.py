"""Command-line harness: dataset preparation, rollouts, training,
ablation sweeps, policy evaluation and report rendering.

Exit codes: 0 on success, 1 for data problems, 2 for usage mistakes,
3 when training left the numerically healthy region.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import sys
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from .config import CurriculumConfig, RunConfig, load_config
from .envcore import (
    REASON_TARGET,
    REASONS,
    GraspEnv,
    reason_name,
    scripted_reach_policy,
)
from .errors import DataError, DivergenceError, StateError
from .learner import Trainer, action_budgets, policy_from_checkpoint
from .objects import bundled_object_dir, find_annotations, load_annotation
from .assets import data_path
from .reward import RewardBreakdown
from . import plots
from .sdfield import _cache_dir_for, cache_key, get_or_build_sdf

VARIANTS = ("full", "-r_reach", "-r_hold", "-r_orient", "-r_man")

_VARIANT_FLAGS = {
    "full": {},
    "-r_reach": {"enable_reach": False},
    "-r_hold": {"enable_hold": False},
    "-r_orient": {"enable_orient": False},
    "-r_man": {"enable_manipulation": False},
}


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DivergenceError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
        except (DataError, StateError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="TOML run configuration; defaults alone when omitted.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True,
              help="Worker threads for dataset preparation.")
@click.option("--out", "out_dir", type=click.Path(), default="pregrasp-out",
              show_default=True, help="Directory for emitted files.")
@click.pass_context
def main(ctx, config_path, seed, workers, out_dir):
    """Desk-scale pre-grasp manipulation: data, training and evaluation."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["workers"] = max(1, workers)
    ctx.obj["out"] = Path(out_dir)


def _load(ctx) -> RunConfig:
    return load_config(ctx.obj["config_path"])


def _outdir(ctx) -> Path:
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    return out


@main.group()
def sdf():
    """Distance-field cache maintenance."""


@sdf.command("build")
@click.option("--dataset", default=None,
              help="Object directory; defaults to the configured set.")
@click.option("--voxel", type=float, default=None, help="Voxel edge in meters.")
@click.option("--padding", type=float, default=None,
              help="Grid margin beyond the mesh bounds, meters.")
@click.pass_context
@guarded
def sdf_build(ctx, dataset, voxel, padding):
    """Build or refresh one SDF cache per annotated mesh."""
    cfg = _load(ctx)
    dataset = dataset or cfg.env.objects
    if dataset in (None, "bundled"):
        directory = bundled_object_dir()
    elif dataset == "toy":
        directory = data_path("toy_objects")
    else:
        directory = Path(dataset)
    voxel = cfg.env.voxel_size if voxel is None else voxel
    padding = cfg.env.sdf_padding if padding is None else padding

    meshes = []
    for ann_path in find_annotations(directory):
        ann = load_annotation(ann_path)
        meshes.append(Path(directory) / ann.mesh)

    def build(mesh):
        cached = (_cache_dir_for(mesh) / f"{cache_key(mesh, voxel, padding)}.sdf").exists()
        start = time.perf_counter()
        grid = get_or_build_sdf(mesh, voxel_size=voxel, padding=padding)
        return cached, grid.values.shape, time.perf_counter() - start

    failures = 0
    with ThreadPoolExecutor(max_workers=ctx.obj["workers"]) as pool:
        futures = [pool.submit(build, m) for m in meshes]
        for mesh, fut in zip(meshes, futures):
            try:
                cached, dims, dt = fut.result()
            except DataError as exc:
                click.echo(f"{mesh.name}: FAILED: {exc}", err=True)
                failures += 1
                continue
            state = "cached" if cached else f"built in {dt:.2f}s"
            click.echo(f"{mesh.name}: {dims[0]}x{dims[1]}x{dims[2]} {state}")
    click.echo(f"{len(meshes) - failures}/{len(meshes)} caches ready")
    if failures:
        sys.exit(1)


ROLLOUT_COLUMNS = (("episode", "step") + RewardBreakdown.TERM_NAMES
                   + ("done", "reason"))


def _policy_fn(name, checkpoint, env, seed):
    budgets = action_budgets(env.reward_cfg)
    if name == "scripted":
        return lambda: scripted_reach_policy(env)
    if name == "random":
        rng = np.random.default_rng(seed + 7919)
        return lambda: budgets * rng.uniform(-1.0, 1.0, size=(env.num_envs, 11))
    if name == "checkpoint":
        if checkpoint is None:
            raise click.UsageError("--policy checkpoint needs --checkpoint")
        if not Path(checkpoint).exists():
            raise click.UsageError(f"checkpoint not found: {checkpoint}")
        net, norm = policy_from_checkpoint(checkpoint)
        if net.obs_dim != env.n_obs:
            raise DataError(
                f"checkpoint expects {net.obs_dim} observation values, "
                f"env emits {env.n_obs}")

        def act():
            obs = env.observe()
            if norm is not None:
                obs = norm.normalize(obs)
            mean, _, _, _ = net.distribution(obs)
            return budgets * np.clip(mean.astype(np.float64), -1.0, 1.0)

        return act
    raise click.UsageError(f"unknown policy {name!r}")


@main.command()
@click.option("--policy", default="scripted", show_default=True,
              help="scripted, random, or checkpoint.")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--episodes", type=int, default=10, show_default=True)
@click.pass_context
@guarded
def rollout(ctx, policy, checkpoint, episodes):
    """Run episodes and write a per-step reward-term trace."""
    cfg = _load(ctx)
    out = _outdir(ctx)
    env = GraspEnv(cfg, 1, ctx.obj["seed"])
    act = _policy_fn(policy, checkpoint, env, ctx.obj["seed"])
    path = out / "rollout.csv"
    finished = 0
    successes = 0
    lengths = []
    totals = []
    episode_reward = 0.0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROLLOUT_COLUMNS)
        step_in_ep = 0
        while finished < episodes:
            _, breakdown, done, reasons = env.step(act())
            episode_reward += float(breakdown.total[0])
            reason = reason_name(int(reasons[0])) if done[0] else ""
            writer.writerow([finished, step_in_ep]
                            + [repr(float(getattr(breakdown, n)[0]))
                               for n in RewardBreakdown.TERM_NAMES]
                            + [int(done[0]), reason])
            step_in_ep += 1
            if done[0]:
                finished += 1
                successes += reason == "target"
                lengths.append(step_in_ep)
                totals.append(episode_reward)
                step_in_ep = 0
                episode_reward = 0.0
    click.echo(f"wrote {path}")
    click.echo(f"episodes {finished} success {successes}/{finished} "
               f"mean-steps {np.mean(lengths):.1f} "
               f"mean-return {np.mean(totals):.2f}")


@main.command()
@click.option("--resume", type=click.Path(), default=None,
              help="Checkpoint to continue from.")
@click.option("--total-steps", type=int, default=None,
              help="Override the configured step budget.")
@click.pass_context
@guarded
def train(ctx, resume, total_steps):
    """Train the policy and leave metrics, checkpoints and curves."""
    cfg = _load(ctx)
    if total_steps is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, total_steps=total_steps))
    out = _outdir(ctx)
    trainer = Trainer(cfg, seed=ctx.obj["seed"], out_dir=out)
    if resume is not None:
        if not Path(resume).exists():
            raise click.UsageError(f"checkpoint not found: {resume}")
        trainer.load_checkpoint(resume)
    trainer.train(log=click.echo)
    curve = plots.training_curve(out / "metrics.csv", out / "training_curve.svg")
    click.echo(f"final success rate {trainer.success_rate():.3f} "
               f"after {trainer.total_steps} steps")
    click.echo(f"wrote {out / 'metrics.csv'}, {out / 'checkpoint.bin'}, {curve}")


def _wilson(successes: int, n: int, z: float = 1.96):
    if n == 0:
        return 0.0, 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return p, max(0.0, center - half), min(1.0, center + half)


@dataclass
class EvalReport:
    """Grasp-success tallies from repeated spawns of every object."""

    objects: list       # (name, category, attempts, successes)
    reason_counts: dict

    def _agg(self, rows):
        n = sum(r[2] for r in rows)
        s = sum(r[3] for r in rows)
        return s, n

    def categories(self) -> list:
        out = []
        for cat in sorted({r[1] for r in self.objects}):
            s, n = self._agg([r for r in self.objects if r[1] == cat])
            out.append((cat, n, s))
        return out

    def overall(self) -> tuple:
        s, n = self._agg(self.objects)
        return n, s

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("kind", "name", "category", "attempts",
                             "successes", "rate", "ci_lo", "ci_hi"))
            for name, cat, n, s in self.objects:
                rate, lo, hi = _wilson(s, n)
                writer.writerow(("object", name, cat, n, s,
                                 f"{rate:.6f}", f"{lo:.6f}", f"{hi:.6f}"))
            for cat, n, s in self.categories():
                rate, lo, hi = _wilson(s, n)
                writer.writerow(("category", cat, cat, n, s,
                                 f"{rate:.6f}", f"{lo:.6f}", f"{hi:.6f}"))
            n, s = self.overall()
            rate, lo, hi = _wilson(s, n)
            writer.writerow(("overall", "overall", "", n, s,
                             f"{rate:.6f}", f"{lo:.6f}", f"{hi:.6f}"))
            for reason in REASONS:
                writer.writerow(("reason", reason, "",
                                 self.reason_counts.get(reason, 0), "", "", "", ""))

    def table(self) -> str:
        lines = [f"{'object':<16} {'category':<14} {'rate':>7} {'95% CI':>17} {'n':>5}"]
        for name, cat, n, s in self.objects:
            rate, lo, hi = _wilson(s, n)
            lines.append(f"{name:<16} {cat:<14} {rate:7.3f} "
                         f"[{lo:.3f}, {hi:.3f}] {n:>5}")
        for cat, n, s in self.categories():
            rate, lo, hi = _wilson(s, n)
            lines.append(f"{'-- ' + cat:<31} {rate:7.3f} [{lo:.3f}, {hi:.3f}] {n:>5}")
        n, s = self.overall()
        rate, lo, hi = _wilson(s, n)
        lines.append(f"{'== overall':<31} {rate:7.3f} [{lo:.3f}, {hi:.3f}] {n:>5}")
        reasons = ", ".join(f"{k}: {v}" for k, v in self.reason_counts.items())
        lines.append(f"done reasons: {reasons}")
        return "\n".join(lines)


def evaluate(cfg: RunConfig, checkpoint, attempts: int, seed: int,
             batch: int = 16) -> EvalReport:
    """Runs the full-mix eval protocol: stage-2 spawns, the evaluation
    step cap, deterministic mean actions, then the grasp-closure check on
    every episode that claimed the target."""
    cfg = dataclasses.replace(cfg, curriculum=CurriculumConfig(enabled=False))
    env = GraspEnv(cfg, batch, seed, eval_mode=True)
    net, norm = policy_from_checkpoint(checkpoint)
    if net.obs_dim != env.n_obs:
        raise DataError(f"checkpoint expects {net.obs_dim} observation values, "
                        f"env emits {env.n_obs}")
    budgets = action_budgets(env.reward_cfg)
    outcomes = {i: [] for i in range(len(env.object_set))}
    reason_counts = Counter()
    limit = attempts * len(outcomes) * cfg.env.max_steps_eval
    steps = 0
    while any(len(v) < attempts for v in outcomes.values()):
        obs = env.observe()
        if norm is not None:
            obs = norm.normalize(obs)
        mean, _, _, _ = net.distribution(obs)
        env.step(budgets * np.clip(mean.astype(np.float64), -1.0, 1.0))
        for es, reason in env.finished_episodes:
            rows = outcomes[int(es.obj_index)]
            if len(rows) >= attempts:
                continue
            ok = reason == REASON_TARGET and env.success_test(es)
            rows.append(ok)
            reason_counts[reason_name(reason)] += 1
        steps += 1
        if steps > limit:
            raise StateError("evaluation stalled: episodes stopped finishing")
    objects = []
    for i, entry in enumerate(env.object_set.entries):
        ann = entry.annotation
        objects.append((ann.object_id, ann.category,
                        len(outcomes[i]), int(sum(outcomes[i]))))
    return EvalReport(objects=objects, reason_counts=dict(reason_counts))


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--attempts", type=int, default=100, show_default=True,
              help="Finished episodes scored per object.")
@click.option("--batch", type=int, default=16, show_default=True)
@click.pass_context
@guarded
def eval_cmd(ctx, checkpoint, attempts, batch):
    """Score a trained policy over repeated spawns of every object."""
    if not Path(checkpoint).exists():
        raise click.UsageError(f"checkpoint not found: {checkpoint}")
    cfg = _load(ctx)
    out = _outdir(ctx)
    report = evaluate(cfg, checkpoint, attempts, ctx.obj["seed"], batch=batch)
    path = out / "eval.csv"
    report.write_csv(path)
    click.echo(report.table())
    figure = plots.eval_bars(path, out / "eval_rates.svg")
    click.echo(f"wrote {path}, {figure}")


def _variant_config(cfg: RunConfig, name: str) -> RunConfig:
    try:
        flags = _VARIANT_FLAGS[name]
    except KeyError:
        raise click.UsageError(
            f"unknown variant {name!r}; pick from {', '.join(VARIANTS)}")
    if not flags:
        return cfg
    return dataclasses.replace(
        cfg, reward=dataclasses.replace(cfg.reward, **flags))


@main.command()
@click.option("--seeds", type=int, default=3, show_default=True)
@click.option("--budget", type=int, default=None,
              help="Env steps per run; configured budget when omitted.")
@click.option("--variants", default=",".join(VARIANTS), show_default=True)
@click.pass_context
@guarded
def ablate(ctx, seeds, budget, variants):
    """Train reward-term variants and plot seed-averaged curves."""
    cfg = _load(ctx)
    if budget is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, total_steps=budget))
    names = [v.strip() for v in variants.split(",") if v.strip()]
    out = _outdir(ctx) / "ablate"
    summary_rows = []
    csvs_by_variant = {}
    for name in names:
        vcfg = _variant_config(cfg, name)
        metric_files = []
        finals = []
        for k in range(seeds):
            run_dir = out / name / f"seed{k}"
            trainer = Trainer(vcfg, seed=ctx.obj["seed"] + k, out_dir=run_dir)
            rows = trainer.train(log=None)
            metric_files.append(run_dir / "metrics.csv")
            final = rows[-1]["success_rate"] if rows else 0.0
            finals.append(final)
            summary_rows.append((name, k, final, trainer.total_steps))
            click.echo(f"{name} seed {k}: final success {final:.3f}")
        csvs_by_variant[name] = metric_files
        plots.variant_curve(metric_files, out / f"{name}.svg", name)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("kind", "variant", "seed", "final_success", "steps",
                         "ci_half"))
        for name, k, final, steps in summary_rows:
            writer.writerow(("run", name, k, f"{final:.6f}", steps, ""))
        for name in names:
            vals = [f for n, _, f, _ in summary_rows if n == name]
            mean = float(np.mean(vals))
            if len(vals) > 1:
                half = 1.96 * float(np.std(vals, ddof=1)) / np.sqrt(len(vals))
            else:
                half = 0.0
            writer.writerow(("variant", name, "", f"{mean:.6f}", "",
                             f"{half:.6f}"))
    plots.ablation_overview(csvs_by_variant, out / "ablation_overview.svg")
    click.echo(f"wrote {out / 'ablation.csv'} and curve files")


@main.command()
@click.option("--run", "run_dir", type=click.Path(), default=None,
              help="Run directory; defaults to --out.")
@click.pass_context
@guarded
def report(ctx, run_dir):
    """Render figures for whatever delimited outputs a run directory holds."""
    root = Path(run_dir) if run_dir is not None else ctx.obj["out"]
    rendered = []
    if (root / "metrics.csv").exists():
        rendered.append(plots.training_curve(
            root / "metrics.csv", root / "training_curve.svg"))
    if (root / "eval.csv").exists():
        rendered.append(plots.eval_bars(root / "eval.csv",
                                        root / "eval_rates.svg"))
    ab = root / "ablate"
    if ab.is_dir():
        csvs_by_variant = {}
        for vdir in sorted(p for p in ab.iterdir() if p.is_dir()):
            files = sorted(vdir.glob("seed*/metrics.csv"))
            if files:
                csvs_by_variant[vdir.name] = files
        for name, files in csvs_by_variant.items():
            rendered.append(plots.variant_curve(files, ab / f"{name}.svg", name))
        if csvs_by_variant:
            rendered.append(plots.ablation_overview(
                csvs_by_variant, ab / "ablation_overview.svg"))
    if not rendered:
        raise DataError(f"nothing to report under {root}")
    for path in rendered:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
