"""Report figures rendered to files (Agg backend, no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    # fixed hash salt keeps SVG/PDF output stable between runs
    "svg.hashsalt": "lenslesskit",
}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
    return path


def cost_scaling_figure(path, sides, series):
    """Log-log multiplication counts against image side.

    ``series`` maps a label to counts aligned with ``sides``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label, counts in series.items():
            ax.loglog(sides, counts, marker="o", label=label)
        ax.set_xlabel("image side [px]")
        ax.set_ylabel("multiplications")
        ax.legend()
        return _save(fig, path)


def cost_table_figure(path, rows):
    """Bar chart of estimated FP32 memory per configuration with the 15 GB limit."""
    with plt.rc_context(STYLE):
        labels = [f"{r['image']}\n{r['model']} {r['embed']}" for r in rows]
        vals = [r["fp32_gb"] for r in rows]
        fig, ax = plt.subplots(figsize=(max(4.0, 0.55 * len(rows)), 3.4))
        ax.bar(range(len(rows)), vals, color=["C3" if r["over_memory_fp32"] else "C0" for r in rows])
        ax.axhline(15.0, color="k", lw=0.8, ls="--")
        ax.set_yscale("log")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_ylabel("FP32 memory [GB]")
        return _save(fig, path)


def image_figure(path, values, title=None, cmap="gray"):
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(3, 3))
        v = np.asarray(values)
        ax.imshow(v if v.ndim == 2 else np.clip(v, 0, 1), cmap=cmap, interpolation="nearest")
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def reconstruction_figure(path, columns, max_rows=4):
    """Grid of images: one column per ``{label: (N, H, W[, C]) array}`` entry."""
    with plt.rc_context({**STYLE, "axes.grid": False}):
        n = min(max_rows, min(len(v) for v in columns.values()))
        fig, axes = plt.subplots(n, len(columns), figsize=(1.6 * len(columns), 1.6 * n), squeeze=False)
        for j, (label, imgs) in enumerate(columns.items()):
            for i in range(n):
                im = np.asarray(imgs[i])
                if im.ndim == 3 and im.shape[2] == 1:
                    im = im[..., 0]
                axes[i, j].imshow(np.clip(im, 0, 1), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                axes[i, j].set_axis_off()
            axes[0, j].set_title(label)
        return _save(fig, path)


def history_figure(path, history):
    """Train loss and eval PSNR per epoch."""
    with plt.rc_context(STYLE):
        ep = [r["epoch"] for r in history]
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.semilogy(ep, [r["train_loss"] for r in history], color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train MSE", color="C0")
        if any("eval_psnr" in r for r in history):
            ax2 = ax.twinx()
            ax2.plot([r["epoch"] for r in history if "eval_psnr" in r],
                     [r["eval_psnr"] for r in history if "eval_psnr" in r], color="C1")
            ax2.set_ylabel("eval PSNR [dB]", color="C1")
            ax2.grid(False)
        return _save(fig, path)
