"""Figures for the evaluation studies, rendered to files with the Agg backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _methods(rows):
    seen = []
    for r in rows:
        if r["method"] not in seen:
            seen.append(r["method"])
    return seen


def plot_ratio_curve(summary, path, metric="rmse"):
    """Metric vs training ratio, one line per method, error bars from repeats."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in _methods(summary):
            pts = sorted((r["ratio"], r[metric], r[metric + "_std"]) for r in summary if r["method"] == m)
            x, y, e = (np.array(v) for v in zip(*pts))
            ax.errorbar(x, y, yerr=e, marker="o", ms=3, capsize=2, label=m)
        ax.set_xlabel("training ratio")
        ax.set_ylabel(metric.upper())
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_cold_start(rows, path, metric="rmse"):
    """Relative improvement over the baseline per cold-start group."""
    key = "improvement_" + metric
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        methods = _methods(rows)
        groups = []
        for r in rows:
            if r["group"] not in groups:
                groups.append(r["group"])
        width = 0.8 / max(len(methods), 1)
        for k, m in enumerate(methods):
            vals = {r["group"]: r.get(key, np.nan) for r in rows if r["method"] == m}
            ax.bar(np.arange(len(groups)) + k * width, [100 * vals.get(g, np.nan) for g in groups],
                   width, label=m)
        ax.set_xticks(np.arange(len(groups)) + 0.4 - width / 2)
        ax.set_xticklabels(groups)
        ax.set_xlabel("training ratings per user")
        ax.set_ylabel(f"{metric.upper()} improvement over MF (%)")
        ax.axhline(0, color="0.3", lw=0.6)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(rows, path, metric="rmse"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in _methods(rows):
            sub = sorted((r for r in rows if r["method"] == m), key=lambda r: r["prefix"])
            ax.plot([r["prefix"] for r in sub], [r[metric] for r in sub], marker="s", ms=3, label=m)
            ticks = [r["paths"].split("+")[-1] for r in sub]
        ax.set_xticks(range(1, len(ticks) + 1))
        ax.set_xticklabels(["+" + t for t in ticks], rotation=30)
        ax.set_xlabel("meta-paths added in order")
        ax.set_ylabel(metric.upper())
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep(rows, path, metric="rmse"):
    """Marginal mean of the metric for each swept parameter (one panel each)."""
    params = [p for p in ("D", "alpha", "beta", "d") if any(p in r and r[p] != "" for r in rows)]
    if not params:
        return None
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(params), figsize=(2.6 * len(params), 2.8), squeeze=False)
        for ax, p in zip(axes[0], params):
            for m in _methods(rows):
                sub = [r for r in rows if r["method"] == m]
                xs = sorted({float(r[p]) for r in sub})
                ys = [np.mean([r[metric] for r in sub if float(r[p]) == x]) for x in xs]
                ax.plot(xs, ys, marker="o", ms=3, label=m)
            ax.set_xlabel(p)
        axes[0][0].set_ylabel(metric.upper())
        axes[0][-1].legend(frameon=False)
        return _save(fig, path)


def plot_convergence(objectives: dict, path):
    """Training objective per epoch; ``objectives`` maps a label to a list of values."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, vals in objectives.items():
            ax.plot(np.arange(1, len(vals) + 1), vals, label=label)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("objective")
        ax.legend(frameon=False)
        return _save(fig, path)
