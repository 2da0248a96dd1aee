"""Optional figures rendered next to the CSV outputs (``--plots``).

matplotlib is imported lazily so the core package does not depend on it.
"""
from __future__ import annotations

import os

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise RuntimeError("--plots needs matplotlib (pip install 'artifact[plots]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _column(header, rows, name):
    j = header.index(name)
    return np.array([np.nan if r[j] is None else r[j] for r in rows], dtype=float)


def _band(ax, x, med, iqr, label):
    ax.plot(x, med, label=label, lw=1.5)
    ax.fill_between(x, med - iqr / 2, med + iqr / 2, alpha=0.25, lw=0)


def plot_transfer(path, header, rows, threshold=None, title=None, gap_label="pole length / TV gap"):
    """Median eval return with an IQR band, and the model column below it."""
    plt = _pyplot()
    x = _column(header, rows, "target_steps")
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    _band(top, x, _column(header, rows, "eval_return_median"), _column(header, rows, "eval_return_iqr"), "eval return")
    if threshold is not None:
        top.axhline(threshold, color="k", ls="--", lw=1, label="threshold")
    top.set_ylabel("return")
    top.legend(frameon=False, fontsize=8)
    _band(bottom, x, _column(header, rows, "pole_length_or_tv_gap_median"),
          _column(header, rows, "pole_length_or_tv_gap_iqr"), gap_label)
    bottom.set_ylabel(gap_label)
    bottom.set_xlabel("target environment steps")
    if title:
        top.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(path, header, rows, title=None):
    plt = _pyplot()
    x = _column(header, rows, "step")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    _band(ax, x, _column(header, rows, "episode_return_median"), _column(header, rows, "episode_return_iqr"),
          "episode return")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("return")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_slacks(path, suites):
    """One strip per suite: slack of every instance on a symlog axis."""
    plt = _pyplot()
    names = list(suites)
    fig, ax = plt.subplots(figsize=(6, 0.6 * len(names) + 1.2))
    for i, name in enumerate(names):
        s = np.array([r.slack for r in suites[name]])
        ax.scatter(s, np.full(len(s), i) + np.linspace(-0.2, 0.2, len(s)), s=4, alpha=0.6,
                   c=np.where(s >= -1e-9, "tab:blue", "tab:red"))
    ax.axvline(0, color="k", lw=0.8)
    ax.set_xscale("symlog", linthresh=1e-6)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("slack (rhs - lhs, oriented so >= 0 holds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def figure_path(out_dir, name):
    return os.path.join(out_dir, name + ".png")
