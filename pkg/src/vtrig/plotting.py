"""Report figures, rendered straight to files with the Agg canvas."""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

__all__ = [
    "plot_distance_curve",
    "plot_segment",
    "plot_pge_grid",
    "plot_sweep",
    "plot_comparison",
]

RC = {"dpi": 120}


def _figure(w=7.0, h=3.6):
    fig = Figure(figsize=(w, h), dpi=RC["dpi"], layout="constrained")
    FigureCanvasAgg(fig)
    return fig


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    return path


def plot_distance_curve(curve, path, sample_rate_hz, truth_delta=None):
    """Even/odd L1 distance against the length correction, in nanoseconds."""
    fig = _figure()
    ax = fig.add_subplot()
    ns = curve[:, 0] * 1e9 / sample_rate_hz
    ax.plot(ns, curve[:, 1], lw=0.8, color="tab:blue")
    i = int(np.argmin(curve[:, 1]))
    ax.axvline(ns[i], color="tab:red", lw=0.8, ls="--", label=f"argmin {ns[i]:+.1f} ns")
    if truth_delta is not None:
        ax.axvline(truth_delta * 1e9 / sample_rate_hz, color="k", lw=0.6, ls=":", label="truth")
    ax.set_xlabel("length correction (ns)")
    ax.set_ylabel("L1 distance")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_segment(samples, path, title="denoised segment", idle_window=None):
    fig = _figure(h=3.0)
    ax = fig.add_subplot()
    ax.plot(samples, lw=0.5, color="tab:blue")
    if idle_window:
        ax.axvspan(0, idle_window, color="0.85", lw=0, label="idle window")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlim(0, len(samples))
    ax.set_xlabel("sample")
    ax.set_ylabel("amplitude")
    ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_pge_grid(pge, steps, path, title="PGE per key byte"):
    """Heat grid of mean PGE: key byte against number of attack segments."""
    pge = np.asarray(pge, dtype=np.float64)
    fig = _figure(w=7.0, h=4.0)
    ax = fig.add_subplot()
    im = ax.imshow(pge.T, aspect="auto", origin="lower", cmap="viridis_r", vmin=0, vmax=max(16.0, pge.max()))
    ax.set_xticks(range(len(steps)), [str(s) for s in steps])
    ax.set_yticks(range(0, 16, 3))
    ax.set_xlabel("attack segments")
    ax.set_ylabel("key byte")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, label="mean PGE")
    return _save(fig, path)


def plot_sweep(curves, steps, path, ylabel="mean PGE over bytes"):
    """One line per labelled run: mean PGE over the 16 bytes against segments used."""
    fig = _figure()
    ax = fig.add_subplot()
    for label, pge in curves.items():
        ax.plot(steps, np.asarray(pge).mean(axis=1), marker="o", ms=3, lw=1, label=label)
    ax.set_xlabel("attack segments")
    ax.set_ylabel(ylabel)
    ax.set_yscale("symlog", linthresh=1.0)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_comparison(curves, steps, path):
    return plot_sweep(curves, steps, path, ylabel="mean PGE (VT vs pullout)")
