"""Figures written next to the CSV outputs of training and evaluation."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "savefig.dpi": 150,
}

# (attribute of RDPoint, axis label, lower is better)
PANELS = (
    ("psnr", "PSNR (dB)", False),
    ("ms_ssim", "MS-SSIM", False),
    ("perceptual_proxy", "perceptual proxy", True),
)


def rd_figure(report, path):
    """Four panels: quality vs bpp for each metric, plus bpp vs rate parameter."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(7.0, 5.6))
        for ax, (attr, label, lower) in zip(axes.flat, PANELS):
            for method in report.methods:
                pts = sorted(report.curve(method), key=lambda p: p.bpp)
                ax.plot([p.bpp for p in pts], [getattr(p, attr) for p in pts], "o-", label=method)
            ax.set_xlabel("bpp")
            ax.set_ylabel(label + (" ↓" if lower else " ↑"))
        ax = axes.flat[3]
        for method in report.methods:
            pts = sorted(report.curve(method), key=lambda p: p.rate_param)
            ax.plot([p.rate_param for p in pts], [p.bpp for p in pts], "s--", label=method)
        ax.set_xlabel("rate parameter")
        ax.set_ylabel("bpp")
        if any(p.rate_param > 0 for p in report.rd_points.values()):
            ax.set_xscale("log")
        axes.flat[0].legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def loss_figure(history, path, keys=None):
    """One line per logged loss term against training step (log-scaled y)."""
    if not history:
        return
    steps = np.array([h["step"] for h in history])
    keys = keys or [k for k in history[0] if k not in ("step", "lr")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for k in keys:
            vals = np.array([h.get(k, np.nan) for h in history], dtype=float)
            if np.all(~np.isfinite(vals)) or np.nanmax(np.abs(vals)) == 0:
                continue
            ax.plot(steps, np.abs(vals), label=k)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("|loss term|")
        ax.legend(loc="upper right", frameon=False, ncol=2)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def usage_figure(counts, path):
    counts = np.asarray(counts)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 2.8))
        ax.bar(np.arange(len(counts)), counts, width=1.0, color="0.3")
        ax.set_xlabel("code index")
        ax.set_ylabel("count")
        ax.set_title(f"{(counts > 0).mean():.1%} of {len(counts)} codes used")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
