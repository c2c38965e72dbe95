"""SVG figures drawn from data that has already been written to CSV.

Output is byte-reproducible: the SVG id salt is fixed, no date is stamped,
and text stays as text.  The manifest digest is stored in the SVG metadata.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["line_plot", "fit_plot", "panels_plot", "bar_plot"]

STYLE = {
    "svg.hashsalt": "purcellkit",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.linewidth": 0.8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "legend.frameon": False,
    "figure.dpi": 100,
}


def _save(fig, path, manifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None, "Creator": "purcellkit"}
    if manifest:
        meta["Description"] = f"manifest: {manifest}"
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
    return path


def _axes(ax, xlabel, ylabel, logx=False, logy=False, title=None):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)


def line_plot(path, x, series: dict, xlabel, ylabel, title=None, logx=False, logy=False, manifest=None):
    """One or more curves sharing an x axis; ``series`` maps label to y."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label, y in series.items():
            ax.plot(x, y, label=label)
        _axes(ax, xlabel, ylabel, logx, logy, title)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        return _save(fig, path, manifest)


def fit_plot(path, x, y, fit_x, fit_y, xlabel, ylabel, yerr=None, components=None, residuals=None,
             title=None, logy=False, manifest=None):
    """Data with the fitted curve, optional components and a residual strip."""
    with plt.rc_context(STYLE):
        if residuals is not None:
            fig, (ax, axr) = plt.subplots(2, 1, figsize=(4.5, 4.0), sharex=True,
                                          gridspec_kw={"height_ratios": [3, 1]})
        else:
            fig, ax = plt.subplots(figsize=(4.5, 3.2))
        if yerr is not None:
            ax.errorbar(x, y, yerr=yerr, fmt=".", color="0.5", elinewidth=0.5, label="data")
        else:
            ax.plot(x, y, ".", color="0.5", label="data")
        ax.plot(fit_x, fit_y, "k-", label="fit")
        for label, cy in (components or {}).items():
            ax.plot(fit_x, cy, "--", label=label)
        _axes(ax, "" if residuals is not None else xlabel, ylabel, logy=logy, title=title)
        ax.legend()
        if residuals is not None:
            axr.plot(x, residuals, ".", color="0.3")
            axr.axhline(0.0, color="k", lw=0.6)
            _axes(axr, xlabel, "norm. resid.")
        fig.tight_layout()
        return _save(fig, path, manifest)


def panels_plot(path, panels, xlabel, logx=True, manifest=None):
    """Side-by-side panels sharing an x label.

    Each panel is a dict with ``ylabel``, ``points`` (label -> (x, y, yerr))
    and ``curves`` (label -> (x, y, style)).
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.0))
        axes = np.atleast_1d(axes)
        for ax, panel in zip(axes, panels):
            for label, (px, py, pe) in panel.get("points", {}).items():
                ax.errorbar(px, py, yerr=pe, fmt="o", label=label)
            for label, (cx, cy, style) in panel.get("curves", {}).items():
                ax.plot(cx, cy, style, label=label)
            _axes(ax, xlabel, panel["ylabel"], logx=logx, logy=panel.get("logy", False))
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path, manifest)


def bar_plot(path, labels, series: dict, ylabel, title=None, manifest=None):
    """Grouped bars, one group per label; NaN entries are left empty."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        x = np.arange(len(labels))
        width = 0.8 / max(len(series), 1)
        for i, (name, vals) in enumerate(series.items()):
            ax.bar(x + (i - (len(series) - 1) / 2) * width, np.asarray(vals, dtype=float), width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        _axes(ax, "", ylabel, title=title)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        return _save(fig, path, manifest)
