"""Figures written next to the CSV/JSON reports."""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    # keep PNG bytes reproducible
    "svg.hashsalt": "stickerguard",
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def metrics_bars(reports, path, metrics=("DR", "CD", "PDA")):
    """Grouped bars of the defense metrics, one group per report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(reports) + 2), 3.2))
        x = np.arange(len(reports))
        width = 0.8 / len(metrics)
        for i, m in enumerate(metrics):
            vals = [np.nan if getattr(r, m) is None else getattr(r, m) for r in reports]
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels([r.name for r in reports], rotation=25, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("rate")
        ax.legend(ncol=len(metrics), loc="upper left", frameon=False)
        return _save(fig, path)


def grid_heatmap(result, path, metric="PDA"):
    """Window size x ratio heatmap; floored cells are starred, the best cell boxed."""
    windows = sorted({c.window for c in result.cells})
    ratios = sorted({c.ratio for c in result.cells})
    grid = np.full((len(windows), len(ratios)), np.nan)
    for c in result.cells:
        if c.report is not None and getattr(c.report, metric) is not None:
            grid[windows.index(c.window), ratios.index(c.ratio)] = getattr(c.report, metric)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.1 * len(ratios) + 1.8, 0.8 * len(windows) + 1.2))
        im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=1, aspect="auto")
        for c in result.cells:
            i, j = windows.index(c.window), ratios.index(c.ratio)
            text = "n/a" if np.isnan(grid[i, j]) else f"{grid[i, j]:.3f}" + ("*" if c.floored else "")
            ax.text(j, i, text, ha="center", va="center", color="w" if grid[i, j] < 0.6 else "k")
        if result.best is not None:
            i, j = windows.index(result.best.window), ratios.index(result.best.ratio)
            ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, lw=2, ec="r"))
        ax.set_xticks(range(len(ratios)))
        ax.set_xticklabels([str(r) for r in ratios])
        ax.set_yticks(range(len(windows)))
        ax.set_yticklabels([str(w) for w in windows])
        ax.set_xlabel("ratio")
        ax.set_ylabel("window size w")
        ax.set_title(metric)
        fig.colorbar(im, ax=ax, fraction=0.05)
        return _save(fig, path)


def image_panel(images, titles, path, masks=None):
    """Row of images, optionally with mask outlines."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(1.6 * len(images), 1.9), squeeze=False)
        for i, (ax, img, title) in enumerate(zip(axes[0], images, titles)):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            if masks is not None and masks[i] is not None:
                ax.contour(masks[i].astype(float), levels=[0.5], colors="m", linewidths=0.6)
            ax.set_title(title, fontsize=7)
            ax.axis("off")
        return _save(fig, path)
