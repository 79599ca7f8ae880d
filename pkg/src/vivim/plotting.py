"""Figures for the training log, evaluation reports and the scaling benchmark."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training(rows, val_dice, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    steps = [r["step"] for r in rows]
    for key in ("l_total", "l_seg", "l_bce", "l_affine"):
        vals = np.array([r[key] for r in rows], dtype=float)
        if np.all(np.isnan(vals)):
            continue
        ax1.plot(steps, vals, label=key, lw=0.8)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(range(len(val_dice)), val_dice, marker="o")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation Dice")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_eval(result, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    dice = [r.dice for r in result.reports]
    jac = [r.jaccard for r in result.reports]
    ax.scatter(dice, jac, s=12)
    ax.plot([0, 1], [0, 1], color="gray", lw=0.5)
    ax.set_xlabel("Dice")
    ax.set_ylabel("Jaccard")
    ax.set_title(f"{len(dice)} clips, mean Dice {result.mean.dice:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bench(rows, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for kind in sorted({r.kind for r in rows}):
        ok = [r for r in rows if r.kind == kind and r.status == "ok"]
        tokens = [r.T * r.H * r.W for r in ok]
        ax1.loglog(tokens, [r.peak_bytes for r in ok], marker="o", label=kind)
        ax2.loglog(tokens, [r.wall_ms for r in ok], marker="o", label=kind)
        for r in rows:
            if r.kind == kind and r.status != "ok":
                ax1.axvline(r.T * r.H * r.W, ls=":", color="red")
    ax1.set_xlabel("tokens (T*H*W)")
    ax1.set_ylabel("peak bytes")
    ax2.set_xlabel("tokens (T*H*W)")
    ax2.set_ylabel("wall ms")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
