"""Matplotlib figures written next to the CSV/JSON artifacts."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}
SAVE_KW = {"metadata": {"Software": None}}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return Path(path)


def plot_convergence(report, path):
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        it = np.arange(len(report.J))
        ax1.plot(it, report.J, "o-", ms=3)
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("cost J")
        res = np.maximum(np.asarray(report.residual, float), 1e-300)
        ax2.semilogy(it, res, "o-", ms=3, color="C1", label="optimality residual")
        if report.mode != "gradient" and len(report.step) > 1:
            ax2.semilogy(it[:-1] if len(report.step) < len(it) else it,
                         np.maximum(report.step, 1e-300)[:len(it)], "s--", ms=3,
                         color="C2", label="control update")
        ax2.set_xlabel("iteration")
        ax2.legend(frameon=False)
        fig.suptitle(f"{report.mode}: {report.reason}")
        return _save(fig, path)


def plot_paths(grid, ens, path, oracle=None, max_paths=30):
    t = grid.nodes
    X = ens.states[:, :, 0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(t, X[:, :max_paths], color="0.6", lw=0.5, alpha=0.6)
        mean, sd = X.mean(axis=1), X.std(axis=1)
        ax.plot(t, mean, color="C0", lw=2, label="particle mean")
        ax.fill_between(t, mean - sd, mean + sd, color="C0", alpha=0.15, label="+/- 1 sd")
        if oracle is not None:
            ax.plot(oracle.times, oracle.mean[:, 0], "k--", lw=1.2, label="oracle mean")
        ax.set_xlabel("t")
        ax.set_ylabel("x (first coordinate)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_control(grid, ens, ctrl, path, oracle=None):
    """Scatter of control against state at a few times, with the oracle feedback."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ks = sorted({0, grid.K // 2, grid.K - 1})
        for c, k in enumerate(ks):
            x = ens.states[k, :500, 0]
            v = ctrl.values[k, :500, 0]
            ax.scatter(x, v, s=4, color=f"C{c}", alpha=0.5, label=f"t = {grid.nodes[k]:.2f}")
            if oracle is not None:
                xs = np.linspace(x.min(), x.max(), 50)
                xbar = ens.states[k, :, 0].mean()
                u = (oracle.K_gain[k, 0, 0] * (xs - xbar) + oracle.G_gain[k, 0, 0] * xbar
                     + oracle.g0[k, 0])
                ax.plot(xs, u, color=f"C{c}", lw=1.2)
        ax.set_xlabel("x")
        ax.set_ylabel("v")
        ax.legend(frameon=False, markerscale=3)
        return _save(fig, path)


def plot_gains(solutions, path):
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        for sol in solutions:
            ax1.plot(sol.times, sol.P[:, 0, 0], label=f"{sol.kind} P")
            ax1.plot(sol.times, sol.K_gain[:, 0, 0], "--", label=f"{sol.kind} K")
            ax2.plot(sol.times, sol.mean[:, 0], label=f"{sol.kind} mean")
        ax1.set_xlabel("t")
        ax1.legend(frameon=False)
        ax2.set_xlabel("t")
        ax2.legend(frameon=False)
        return _save(fig, path)


def plot_gradcheck(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        fd = [r["finite_difference"] for r in report["rows"]]
        ad = [r["adjoint"] for r in report["rows"]]
        ax.plot(fd, ad, "o")
        lo, hi = min(fd + ad), max(fd + ad)
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel("finite-difference derivative")
        ax.set_ylabel("adjoint pairing")
        ax.set_title(f"max error {report['max_error']:.2e} (tol {report['tol']:g})")
        return _save(fig, path)
