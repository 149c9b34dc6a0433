"""Matplotlib figures for experiment outputs, written as reproducible SVG.

SVG ids are salted with a fixed string and the date stamp is dropped, so the
same results always produce the same bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import SweepResult  # noqa: E402

STYLE = {
    "svg.hashsalt": "scoredistill",
    "svg.fonttype": "none",
    "axes.labelsize": 11,
    "axes.titlesize": 11,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "legend.frameon": False,
    "figure.dpi": 100,
}


def save(fig, path) -> str:
    with matplotlib.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return str(path)


def _new(ncols=1, size=(5.0, 3.6)):
    with matplotlib.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(size[0] * ncols, size[1]))
    return fig, np.atleast_1d(axes)


def denoise_figure(res: SweepResult, reference: dict | None, path) -> str:
    """PSNR against noise level per predictor; reference values in their own panel."""
    preds = list(dict.fromkeys(c.split("@T")[0] for c in res.cells))
    fig, axes = _new(2 if reference else 1)
    ax = axes[0]
    for p in preds:
        cells = [c for c in res.cells if c.startswith(p + "@T")]
        T = [int(c.split("@T")[1]) for c in cells]
        ax.plot(T, [res.median(c) for c in cells], marker="o", label=p)
    ax.set_xlabel("noise level T")
    ax.set_ylabel("median PSNR of recovered view (dB)")
    ax.set_title("toy denoising")
    ax.legend()
    if reference:
        ax = axes[1]
        for p, vals in reference.items():
            T = sorted(vals)
            ax.plot(T, [vals[t] for t in T], marker="s", linestyle="--", label=p)
        ax.set_xlabel("noise level T")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title("paper_reference (annotation only)")
        ax.legend()
    fig.tight_layout()
    return save(fig, path)


def gap_figure(res: SweepResult, path) -> str:
    fig, (ax,) = _new()
    for c in res.cells:
        T, v = zip(*sorted((r.seed, r.value) for r in res.records if r.cell == c))
        style = dict(linestyle=":", color="k") if c == "reference" else dict(marker="o")
        ax.plot(T, v, label=c, **style)
    ax.set_xlabel("noise level T")
    ax.set_ylabel("RMS noise-prediction gap")
    ax.legend()
    fig.tight_layout()
    return save(fig, path)


def bar_figure(res: SweepResult, path, ylabel: str | None = None) -> str:
    fig, (ax,) = _new(size=(max(4.0, 0.8 * len(res.cells) + 1.5), 3.6))
    med = np.array(res.medians)
    lo = [res.median(c) - np.percentile(res.values(c), 25) for c in res.cells]
    hi = [np.percentile(res.values(c), 75) - res.median(c) for c in res.cells]
    x = np.arange(len(res.cells))
    ax.bar(x, med, yerr=[lo, hi], capsize=3, color="0.6", edgecolor="k")
    ax.set_xticks(x)
    ax.set_xticklabels(res.cells, rotation=30, ha="right")
    ax.set_ylabel(ylabel or f"median {res.metric}")
    ax.set_title(res.experiment)
    fig.tight_layout()
    return save(fig, path)


def alpha_figure(res: SweepResult, path) -> str:
    pairs = [tuple(float(p.split("=")[1]) for p in c.split(",")) for c in res.cells]
    a1s = sorted({a for a, _ in pairs})
    a2s = sorted({b for _, b in pairs})
    grid = np.full((len(a1s), len(a2s)), np.nan)
    for (a1, a2), c in zip(pairs, res.cells):
        grid[a1s.index(a1), a2s.index(a2)] = res.median(c)
    fig, (ax,) = _new(size=(4.4, 3.8))
    im = ax.imshow(grid, origin="lower", cmap="viridis")
    ax.set_xticks(range(len(a2s)))
    ax.set_xticklabels([f"{a:g}" for a in a2s])
    ax.set_yticks(range(len(a1s)))
    ax.set_yticklabels([f"{a:g}" for a in a1s])
    ax.set_xlabel("alpha2 (pose term)")
    ax.set_ylabel("alpha1 (image term)")
    for i in range(len(a1s)):
        for j in range(len(a2s)):
            ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", color="w")
    fig.colorbar(im, ax=ax, label="median PSNR (dB)")
    fig.tight_layout()
    return save(fig, path)


def box_figure(res: SweepResult, path) -> str:
    fig, (ax,) = _new()
    ax.boxplot([res.values(c) for c in res.cells])
    ax.set_xticks(range(1, len(res.cells) + 1))
    ax.set_xticklabels(res.cells, rotation=20)
    ax.set_ylabel(res.metric)
    ax.set_title(res.experiment)
    fig.tight_layout()
    return save(fig, path)


def grid_heatmap(grid, path, title: str = "") -> str:
    fig, (ax,) = _new(size=(3.6, 3.4))
    im = ax.imshow(np.asarray(grid), origin="lower", cmap="gray", vmin=0.0, vmax=1.0)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return save(fig, path)


def trajectory_figure(run, path) -> str:
    fig, axes = _new(2, size=(4.2, 3.2))
    axes[0].plot(run.steps, run.psnrs)
    axes[0].set_xlabel("optimizer step")
    axes[0].set_ylabel("grid PSNR (dB)")
    axes[1].plot(run.steps, run.residual_norms, lw=0.5)
    axes[1].set_xlabel("optimizer step")
    axes[1].set_ylabel("residual norm")
    fig.tight_layout()
    return save(fig, path)
