"""Figures written next to the CSV outputs of the CLI (PNG, non-interactive backend)."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _smooth(v, w):
    v = np.asarray(v, dtype=float)
    if len(v) < w or w <= 1:
        return v
    return np.convolve(v, np.ones(w) / w, mode="valid")


def plot_losses(history, path, window: int = 50):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, 2, figsize=(7.0, 2.8))
        steps = np.array([h["step"] for h in history])
        for a, key in zip(ax, ("fidelity", "contrastive")):
            v = _smooth([h[key] for h in history], window)
            a.plot(steps[len(steps) - len(v):], v)
            a.set_xlabel("step")
            a.set_ylabel(key)
        ax[0].set_yscale("log")
        return _save(fig, path)


def plot_similarity(sm, path):
    with plt.rc_context(STYLE):
        n = len(sm.ids)
        fig, ax = plt.subplots(figsize=(1.2 * n + 2.0, 1.0 * n + 1.6))
        im = ax.imshow(sm.matrix, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(n), sm.ids, rotation=30, ha="right")
        ax.set_yticks(range(n), sm.ids)
        for i in range(n):
            for j in range(n):
                ax.text(j, i, f"{sm.matrix[i, j]:.2f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title("mean embedding similarity")
        return _save(fig, path)


def plot_projection(points, labels, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.4))
        labels = np.asarray(labels)
        for name in dict.fromkeys(labels):
            sel = labels == name
            ax.scatter(points[sel, 0], points[sel, 1], s=10, label=str(name), alpha=0.8)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_awareness(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, 2, figsize=(7.0, 2.8), sharex=True)
        ids = list(dict.fromkeys(r["dataset_id"] for r in rows))
        for name in ids:
            sel = [r for r in rows if r["dataset_id"] == name]
            d = [r["density"] for r in sel]
            ax[0].scatter(d, [r["zeta_B"] for r in sel], s=8, label=name)
            ax[1].scatter(d, [r["zeta_R"] for r in sel], s=8, label=name)
        ax[0].set_ylabel("detail awareness")
        ax[1].set_ylabel("rain awareness")
        for a in ax:
            a.set_xlabel("rain density (streaks / 1e4 px)")
        ax[1].legend(frameon=False)
        return _save(fig, path)


def plot_temperature(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        finite = [r for r in rows if math.isfinite(r["mean_log_T"])]
        inf = [r for r in rows if not math.isfinite(r["mean_log_T"])]
        if finite:
            x = [r["layer_index"] for r in finite]
            m = np.array([r["mean_log_T"] for r in finite])
            lo = m - np.array([r["ci_low"] for r in finite])
            hi = np.array([r["ci_high"] for r in finite]) - m
            ax.errorbar(x, m, yerr=[lo, hi], fmt="o-", capsize=2)
        for r in inf:
            ax.axvline(r["layer_index"], color="0.8", lw=0.8, ls="--")
        ax.set_xticks([r["layer_index"] for r in rows], [r["layer"] for r in rows], rotation=45, ha="right")
        ax.set_ylabel("mean log T")
        return _save(fig, path)


def plot_sweep(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        lams = [r["lambda"] for r in rows]
        keys = sorted({k for r in rows for k in r if k.startswith("psnr_") and k != "psnr_mean"})
        for k in keys:
            ax.plot(lams, [r.get(k, np.nan) for r in rows], "o-", label=k[5:])
        ax.set_xlabel("lambda")
        ax.set_ylabel("PSNR (dB)")
        if keys:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_eval(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.bar([r["dataset_id"] for r in rows], [r["psnr"] for r in rows])
        ax.set_ylabel("PSNR (dB)")
        return _save(fig, path)
