"""Matplotlib figures for evaluation reports, training logs, and DDA-domain views (Agg backend)."""

from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _finite(v):
    return v is not None and not (isinstance(v, float) and math.isnan(v))


def plot_strata(strata: dict, xlabel: str, path: str, title: str = "") -> None:
    """One line per (task, method) over the stratum bins; ``strata`` = {task: {bin: {method: dB, 'n': n}}}."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for task, bins in strata.items():
        labels = list(bins)
        methods = sorted({m for b in bins.values() for m in b if m != "n"})
        for m in methods:
            ys = [bins[b].get(m) for b in labels]
            xs = [i for i, y in enumerate(ys) if _finite(y)]
            ax.plot(xs, [ys[i] for i in xs], marker="o", label=f"{task} {m}")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("NMSE (dB)")
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_kappa_sweep(rows: Sequence[dict], path: str) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8), sharey=True)
    cases = sorted({r["case"] for r in rows})
    for ax, case in zip(np.atleast_1d(axes), cases):
        sub = [r for r in rows if r["case"] == case]
        tasks = sorted({r["task"] for r in sub})
        methods = sorted({k for r in sub for k in r if k not in ("case", "kappa", "task")})
        for t in tasks:
            for m in methods:
                pts = [(r["kappa"], r[m]) for r in sub if r["task"] == t and _finite(r.get(m))]
                if pts:
                    ax.plot(*zip(*pts), marker="o", label=f"{t} {m}")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("kappa")
        ax.set_title(case)
        ax.grid(alpha=0.3)
    np.atleast_1d(axes)[0].set_ylabel("NMSE (dB)")
    np.atleast_1d(axes)[0].legend(fontsize=7)
    _save(fig, path)


def plot_training_log(records: Sequence[dict], path: str) -> None:
    steps = [r for r in records if r.get("kind") == "step"]
    vals = [r for r in records if r.get("kind") == "val"]
    fig, ax = plt.subplots(figsize=(6, 4))
    if steps:
        ax.plot([r["global_step"] for r in steps], [10 * math.log10(max(r["loss"], 1e-10)) for r in steps],
                lw=0.8, label="train batch")
    if vals:
        ax.plot([r["global_step"] for r in vals], [10 * math.log10(max(r["val_loss"], 1e-10)) for r in vals],
                marker="o", label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("NMSE (dB)")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_dda_views(views: dict[str, np.ndarray], path: str) -> None:
    """Doppler x delay magnitude (dB, summed over angle bins) for each named DDA tensor."""
    fig, axes = plt.subplots(1, len(views), figsize=(4 * len(views), 3.6), squeeze=False)
    for ax, (name, d) in zip(axes[0], views.items()):
        power = np.sum(np.abs(d) ** 2, axis=(2, 3))
        img = 10 * np.log10(power / max(power.max(), 1e-300) + 1e-12)
        im = ax.imshow(np.fft.fftshift(img, axes=0), aspect="auto", origin="lower", vmin=-40, vmax=0,
                       extent=(0, d.shape[1], -d.shape[0] // 2, d.shape[0] - d.shape[0] // 2))
        ax.set_title(name)
        ax.set_xlabel("delay bin")
        ax.set_ylabel("Doppler bin")
        fig.colorbar(im, ax=ax, label="dB")
    _save(fig, path)

