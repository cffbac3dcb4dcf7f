"""Figures for reports.  Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_commutation", "plot_histogram", "plot_ensemble", "plot_ode"]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_commutation(report, path):
    """Both reduction orders (and the SSA mean, if present) against slow time."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, var in enumerate(report.slow_vars):
        if report.y_qm is not None:
            ax.plot(report.tau, report.y_qm[:, k], lw=2, label=f"mean field, then QE ({var})")
        if report.y_mq is not None:
            ax.plot(report.tau, report.y_mq[:, k], "--", lw=2, label=f"QE, then mean field ({var})")
        if report.ssa_mean is not None:
            ax.plot(report.tau, report.ssa_mean[:, k], ":", label=f"SSA mean ({var})")
    ax.set_xlabel("slow time")
    ax.set_ylabel("density")
    title = f"{report.model}: {report.verdict}"
    if report.D is not None:
        title += f", D = {report.D:.3g}"
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_histogram(hist, path):
    """Stationary slow-variable histogram with detected modes marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    width = hist.edges[1] - hist.edges[0]
    ax.bar(hist.edges[:-1], hist.prob / width, width=width, align="edge", color="0.6")
    for mode, mass in zip(hist.modes, hist.mode_mass):
        ax.axvline(mode, color="C3", lw=1)
        ax.annotate(f"{mode:.2f} ({mass:.2f})", (mode, ax.get_ylim()[1] * 0.9), fontsize=8, ha="center")
    ax.set_xlabel(f"{hist.var} / N")
    ax.set_ylabel("density")
    return _save(fig, path)


def plot_ensemble(ens, path, vars=None):
    """Ensemble mean with a one-standard-deviation band."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = ens.vars if vars is None else vars
    for var in names:
        k = ens.vars.index(var)
        mean, sd = ens.mean[:, k], np.sqrt(ens.var[:, k])
        ax.plot(ens.grid, mean, label=var)
        ax.fill_between(ens.grid, mean - sd, mean + sd, alpha=0.2)
    ax.set_xlabel("t")
    ax.set_ylabel("count")
    ax.set_title(f"{ens.replicates} replicates")
    ax.legend()
    return _save(fig, path)


def plot_ode(t, x, vars, path, xlabel="t"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, var in enumerate(vars):
        ax.plot(t, x[:, k], label=var)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.legend()
    return _save(fig, path)
