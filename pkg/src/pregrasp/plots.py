"""Figure rendering for training, ablation and evaluation outputs.

Every function reads the delimited files the harness writes and drops an
SVG next to them, so a run directory carries its own figures.  Rendering
is headless and avoids wall-clock metadata to keep regenerated files
stable.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "pregrasp"

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def _read_csv(path) -> dict:
    """Columns of a delimited file as float arrays where possible."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    out = {}
    for name in rows[0]:
        col = [r[name] for r in rows]
        try:
            out[name] = np.array([float(v) for v in col])
        except ValueError:
            out[name] = np.array(col)
    return out


def training_curve(metrics_csv, out_svg) -> Path:
    """Success rate and reward-term means against environment steps."""
    data = _read_csv(metrics_csv)
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7.2, 6.4), sharex=True)
    steps = data["steps"]
    top.plot(steps, data["success_rate"], color="tab:blue", label="success rate")
    top.set_ylabel("success rate")
    top.set_ylim(-0.02, 1.02)
    twin = top.twinx()
    twin.plot(steps, data["stage"], color="tab:gray", alpha=0.6,
              drawstyle="steps-post", label="stage")
    twin.set_ylabel("curriculum stage")
    twin.set_yticks([1, 2])
    top.legend(loc="upper left")

    for name, color in (("total", "tab:blue"), ("reach", "tab:orange"),
                        ("hold", "tab:green"), ("orient", "tab:red"),
                        ("manipulation", "tab:purple")):
        if name in data:
            bottom.plot(steps, data[name], color=color, label=name, linewidth=1.1)
    bottom.set_xlabel("environment steps")
    bottom.set_ylabel("mean per-step term")
    bottom.legend(loc="upper left", ncol=2, fontsize=8)
    fig.tight_layout()
    out_svg = Path(out_svg)
    fig.savefig(out_svg, **_SAVE_KW)
    plt.close(fig)
    return out_svg


def _common_grid(series, n=160):
    hi = min(s[0][-1] for s in series)
    lo = max(s[0][0] for s in series)
    return np.linspace(lo, hi, n)


def mean_ci_curve(metric_csvs, column="success_rate"):
    """Seed-averaged curve: (steps, mean, half-width of the 95% CI).

    Seeds are interpolated onto a shared step grid; the half-width uses
    the normal approximation and collapses to zero for a single seed.
    """
    series = []
    for path in metric_csvs:
        data = _read_csv(path)
        series.append((data["steps"], data[column]))
    grid = _common_grid(series)
    stack = np.stack([np.interp(grid, s, v) for s, v in series])
    mean = stack.mean(axis=0)
    if stack.shape[0] > 1:
        half = 1.96 * stack.std(axis=0, ddof=1) / np.sqrt(stack.shape[0])
    else:
        half = np.zeros_like(mean)
    return grid, mean, half


def variant_curve(metric_csvs, out_svg, label) -> Path:
    """One ablation variant: per-seed traces plus the mean +- CI band."""
    grid, mean, half = mean_ci_curve(metric_csvs)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for path in metric_csvs:
        data = _read_csv(path)
        ax.plot(data["steps"], data["success_rate"], color="tab:gray",
                alpha=0.45, linewidth=0.9)
    ax.plot(grid, mean, color="tab:blue", label=f"{label} (mean)")
    ax.fill_between(grid, mean - half, mean + half, color="tab:blue", alpha=0.2,
                    label="95% CI")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(label)
    ax.legend(loc="upper left")
    fig.tight_layout()
    out_svg = Path(out_svg)
    fig.savefig(out_svg, **_SAVE_KW)
    plt.close(fig)
    return out_svg


def ablation_overview(variant_csvs: dict, out_svg) -> Path:
    """All variants overlaid as mean +- CI bands on one axis."""
    fig, ax = plt.subplots(figsize=(7.2, 4.6))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, (label, paths) in enumerate(sorted(variant_csvs.items())):
        grid, mean, half = mean_ci_curve(paths)
        color = colors[k % len(colors)]
        ax.plot(grid, mean, color=color, label=label)
        ax.fill_between(grid, mean - half, mean + half, color=color, alpha=0.15)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    out_svg = Path(out_svg)
    fig.savefig(out_svg, **_SAVE_KW)
    plt.close(fig)
    return out_svg


def eval_bars(eval_csv, out_svg) -> Path:
    """Per-object success rates with CI whiskers from an eval report."""
    data = _read_csv(eval_csv)
    rows = [i for i, kind in enumerate(data["kind"]) if kind == "object"]
    if not rows:
        raise DataError(f"{eval_csv}: no per-object rows")
    names = [data["name"][i] for i in rows]
    # blank cells elsewhere keep these columns as strings, so cast per cell
    rates = np.array([float(data["rate"][i]) for i in rows])
    lo = np.array([float(data["ci_lo"][i]) for i in rows])
    hi = np.array([float(data["ci_hi"][i]) for i in rows])
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(names), 4.0))
    xs = np.arange(len(names))
    ax.bar(xs, rates, color="tab:blue", width=0.6)
    ax.vlines(xs, lo, hi, color="black", linewidth=1.2)
    for x, a, b in zip(xs, lo, hi):
        ax.hlines([a, b], x - 0.12, x + 0.12, color="black", linewidth=1.2)
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("success rate")
    fig.tight_layout()
    out_svg = Path(out_svg)
    fig.savefig(out_svg, **_SAVE_KW)
    plt.close(fig)
    return out_svg
