"""Static figures for evaluation reports: metric violins and error maps."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
COLORS = ("#7f7f7f", "#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _finite(values):
    a = np.asarray(values, dtype=np.float64)
    return a[np.isfinite(a)]


def metric_violins(reports, path, title=None):
    """One violin panel per metric, one violin per method.

    Infinite PSNR values (exact reconstructions) are left out of the violin
    and counted in the axis label instead.
    """
    names = ("psnr", "ssim", "nmse")
    labels = {"psnr": "PSNR (dB)", "ssim": "SSIM", "nmse": "NMSE"}
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        for ax, name in zip(axes, names):
            data, skipped = [], 0
            for r in reports:
                vals = _finite(getattr(r, name))
                skipped += len(getattr(r, name)) - vals.size
                # violinplot needs at least one point per group
                data.append(vals if vals.size else np.array([np.nan]))
            pos = np.arange(1, len(reports) + 1)
            parts = ax.violinplot(data, positions=pos, showmeans=True, showextrema=True)
            for i, body in enumerate(parts["bodies"]):
                body.set_facecolor(COLORS[i % len(COLORS)])
                body.set_edgecolor("black")
                body.set_alpha(0.6)
            ax.set_xticks(pos)
            ax.set_xticklabels([r.method for r in reports], rotation=20)
            ylabel = labels[name]
            if skipped:
                ylabel += f" ({skipped} infinite omitted)"
            ax.set_ylabel(ylabel)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def error_maps(ground_truth, images, path, names=None, max_rows=4, vmax=None):
    """Grid of ground truth, reconstructions and ``|est - truth|`` maps.

    ``images`` maps a method name to a list of magnitude images aligned with
    ``ground_truth``. At most ``max_rows`` samples are drawn.
    """
    names = list(names or images)
    n = min(max_rows, len(ground_truth))
    if n == 0:
        raise ValueError("no samples to draw")
    errs = {k: [np.abs(np.asarray(images[k][i]) - np.asarray(ground_truth[i])) for i in range(n)] for k in names}
    if vmax is None:
        vmax = max(float(e.max()) for v in errs.values() for e in v) or 1.0
    cols = 1 + 2 * len(names)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(n, cols, figsize=(1.6 * cols, 1.6 * n), squeeze=False)
        for i in range(n):
            row = axes[i]
            row[0].imshow(ground_truth[i], cmap="gray", vmin=0, vmax=1)
            for j, k in enumerate(names):
                row[1 + 2 * j].imshow(images[k][i], cmap="gray", vmin=0, vmax=1)
                im = row[2 + 2 * j].imshow(errs[k][i], cmap="inferno", vmin=0, vmax=vmax)
            if i == 0:
                row[0].set_title("target")
                for j, k in enumerate(names):
                    row[1 + 2 * j].set_title(k)
                    row[2 + 2 * j].set_title(f"|{k} - target|")
            for ax in row:
                ax.set_xticks([])
                ax.set_yticks([])
        fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.6, label="absolute error")
        fig.savefig(path)
        plt.close(fig)
    return path


def field_quiver(field, path, reference=None, step=None):
    """Quiver plot of a deformation field, optionally over a reference field."""
    h, w = field.shape
    step = step or max(1, int(math.ceil(max(h, w) / 16)))
    yy, xx = np.mgrid[0:h:step, 0:w:step]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        if reference is not None:
            ax.quiver(xx, yy, reference.dx[::step, ::step], reference.dy[::step, ::step], color="0.6", angles="xy",
                      scale_units="xy", scale=1, label="true")
        ax.quiver(xx, yy, field.dx[::step, ::step], field.dy[::step, ::step], color=COLORS[2], angles="xy",
                  scale_units="xy", scale=1, label="estimated")
        ax.set_xlim(-1, w)
        ax.set_ylim(h, -1)
        ax.set_aspect("equal")
        ax.legend(loc="upper right", fontsize=7)
        fig.savefig(path)
        plt.close(fig)
    return path
