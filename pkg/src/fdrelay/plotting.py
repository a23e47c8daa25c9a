"""SVG figures from the CSV outputs (post-processing only)."""

import os

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import read_csv  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "svg.hashsalt": "fdrelay",
}

AXIS_LABELS = {
    "kappa": r"$\kappa$ [dB]",
    "sigma_n2": r"$\sigma_n^2$ [dBm]",
    "T": "T",
    "dims": "antennas per node",
    "rho_rr": r"$\rho_{rr}$ [dB]",
}


def plot_summary(summary_path, out_path, quantity="mse"):
    """Median with interquartile band per method against the swept value."""
    rows = read_csv(summary_path)
    if not rows:
        raise ValueError(f"{summary_path} has no rows")
    param = rows[0]["sweep_param"]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in methods:
            rs = sorted((r for r in rows if r["method"] == m), key=lambda r: float(r["sweep_value"]))
            x = np.array([float(r["sweep_value"]) for r in rs])
            med = np.array([float(r[f"{quantity}_median"]) for r in rs])
            lo = np.array([float(r[f"{quantity}_q1"]) for r in rs])
            hi = np.array([float(r[f"{quantity}_q3"]) for r in rs])
            line, = ax.plot(x, med, marker="o", ms=3, label=m)
            ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.15, lw=0)
        ax.set_xlabel(AXIS_LABELS.get(param, param))
        ax.set_ylabel("MSE" if quantity == "mse" else "rate [bit/s]")
        if param == "T":
            ax.set_xscale("log")
        if quantity == "mse":
            ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return out_path


def plot_convergence(trace_path, inner_path, out_path):
    """Four panels: MSE against violation, inner AL, MSE and violation per outer iteration."""
    rows = read_csv(trace_path)
    inner = read_csv(inner_path)
    k = np.array([int(r["outer_iter"]) for r in rows])
    zeta = np.array([float(r["zeta"]) for r in rows])
    mse = np.array([float(r["mse"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(7.0, 5.0))
        ax = axes[0, 0]
        ax.semilogx(zeta, mse, marker="o", ms=3)
        ax.set_xlabel(r"$\zeta$")
        ax.set_ylabel("MSE")
        ax = axes[0, 1]
        for outer in sorted({int(r["outer_iter"]) for r in inner}):
            al = [float(r["al_value"]) for r in inner if int(r["outer_iter"]) == outer]
            ax.plot(np.arange(1, len(al) + 1), al, lw=0.8)
        ax.set_xlabel("inner iteration")
        ax.set_ylabel("AL")
        ax = axes[1, 0]
        ax.plot(k, mse, marker="o", ms=3)
        ax.set_xlabel("outer iteration")
        ax.set_ylabel("MSE")
        ax = axes[1, 1]
        ax.semilogy(k, zeta, marker="o", ms=3)
        ax.set_xlabel("outer iteration")
        ax.set_ylabel(r"$\zeta$")
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return out_path


def plot_directory(out_dir):
    """Render every summary and trace CSV found in ``out_dir``; returns the SVG paths."""
    made = []
    summary = os.path.join(out_dir, "summary.csv")
    if os.path.exists(summary):
        made.append(plot_summary(summary, os.path.join(out_dir, "summary_mse.svg"), "mse"))
        made.append(plot_summary(summary, os.path.join(out_dir, "summary_rate.svg"), "rate"))
    for name in sorted(os.listdir(out_dir)):
        if name.startswith("trace_") and name.endswith(".csv") and not name.endswith("_inner.csv"):
            stem = name[:-4]
            inner = os.path.join(out_dir, stem + "_inner.csv")
            if os.path.exists(inner):
                made.append(plot_convergence(os.path.join(out_dir, name), inner,
                                             os.path.join(out_dir, stem + ".svg")))
    return made
