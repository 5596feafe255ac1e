"""Figures written to files; no interactive backends."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_field(grid, values, path, title="", log=False):
    fig, ax = plt.subplots(figsize=(5, 4))
    data = np.log10(np.maximum(values, 1e-300)) if log else values
    im = ax.imshow(data.T, origin="lower", aspect="auto",
                   extent=(grid.x_min, grid.x_max, grid.v_min, grid.v_max), cmap="viridis")
    fig.colorbar(im, ax=ax, label="log10" if log else None)
    ax.set_xlabel("x")
    ax.set_ylabel("v")
    ax.set_title(title)
    return _save(fig, path)


def plot_trace(trace, path, envelope_c=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(trace.times, trace.N, label="N_t")
    ax.semilogy(trace.times, trace.norm_sq, "--", label="|g_t|^2")
    if envelope_c is not None:
        t = trace.times
        ax.semilogy(t, trace.norm_sq[0] * np.exp(-envelope_c * np.minimum(t, t ** 3)), ":",
                    label="certified envelope")
    ax.set_xlabel("t")
    ax.legend()
    return _save(fig, path)


def plot_series(x, series: dict, path, xlabel="t", logy=True, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in series.items():
        (ax.semilogy if logy else ax.plot)(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_coupling(stats, bound, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(stats.times, stats.mean_sq_dist, yerr=stats.ci_sq, fmt="o-", ms=3, label="E|Z-Z'|^2")
    ax.plot(stats.times, bound, "--", label="exp(2Kt)|dz0|^2")
    ax.set_xlabel("t")
    ax.legend()
    return _save(fig, path)
