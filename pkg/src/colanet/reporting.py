"""CSV reports and their companion matplotlib figures.

All delimited output uses fixed 4-decimal reals and LF line endings so
reruns are byte-identical; each writer has a sibling that renders the same
data as a PNG figure next to the CSV.
"""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def fmt_real(x):
    """Fixed 4-decimal rendering with an ``inf`` sentinel."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.4f}"


def write_loss_csv(path, curve):
    """Loss curve rows (step, lr, loss) with header ``step,lr,loss``."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in curve:
            fh.write(f"{step},{fmt_real(lr)},{fmt_real(loss)}\n")


def write_eval_csv(path, report):
    """Per-image metric rows plus a trailing mean row."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("file,psnr_db,ssim\n")
        for name, p, s in zip(report.names, report.psnr_db, report.ssim):
            fh.write(f"{name},{fmt_real(p)},{fmt_real(s)}\n")
        fh.write(f"mean,{fmt_real(report.mean_psnr)},"
                 f"{fmt_real(report.mean_ssim)}\n")


def write_distance_csv(path, matrix):
    """A patch-similarity matrix as plain 4-decimal rows."""
    mat = np.asarray(matrix)
    with open(path, "w", encoding="ascii", newline="") as fh:
        for row in mat:
            fh.write(",".join(fmt_real(v) for v in row) + "\n")


def render_loss_figure(path, curve):
    """Loss (log scale) and learning rate over optimizer steps."""
    steps = [row[0] for row in curve]
    lrs = [row[1] for row in curve]
    losses = [row[2] for row in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.9, color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, lw=0.9, color="tab:orange", label="lr")
    ax2.set_ylabel("learning rate")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_eval_figure(path, report):
    """Per-image PSNR bars with the mean drawn as a horizontal line."""
    finite = [p for p in report.psnr_db if math.isfinite(p)]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(report.names)), 4))
    xs = np.arange(len(report.names))
    heights = [p if math.isfinite(p) else 0.0 for p in report.psnr_db]
    ax.bar(xs, heights, color="tab:blue")
    if finite:
        ax.axhline(sum(finite) / len(finite), color="tab:red", lw=1,
                   label="mean (finite)")
        ax.legend()
    ax.set_xticks(xs)
    ax.set_xticklabels(report.names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_heat_figure(path, heat_maps):
    """Grayscale panels of per-block heat maps (values in [0, 1])."""
    n = len(heat_maps)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, (label, hmap) in zip(axes[0], heat_maps):
        im = ax.imshow(hmap, cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(label, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
