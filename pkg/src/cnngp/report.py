"""Figure rendering for run artifacts.

Every function takes data already produced by the pipeline (sweep curves,
chains, predictions, replicate tables), draws a matplotlib figure, and writes
it to a file next to the delimited outputs. Uses the Agg backend so rendering
works headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def fig_radius_sweep(radii, kappas, suggested: float | None, out_path: str) -> str:
    radii = np.asarray(radii, dtype=np.float64)
    kappas = np.asarray(kappas, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(radii, kappas, "o-", color="tab:blue", lw=1.2, ms=4)
    if suggested is not None:
        ax.axvline(suggested, color="tab:red", ls="--", lw=1,
                   label=f"suggested r = {suggested:.4g}")
        ax.legend(frameon=False)
    ax.set_xlabel("clustering radius r")
    ax.set_ylabel("number of clusters")
    ax.set_title("Cluster count vs. radius")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def fig_traces(chain_table: np.ndarray, header: list[str], out_path: str,
               max_panels: int = 8) -> str:
    """Traceplots for the parameter columns of a chain table (iter first)."""
    names = header[1:max_panels + 1]
    cols = chain_table[:, 1:max_panels + 1]
    iters = chain_table[:, 0]
    k = len(names)
    nrow = (k + 1) // 2
    fig, axes = plt.subplots(nrow, 2, figsize=(8, 1.9 * nrow), squeeze=False)
    for j, name in enumerate(names):
        ax = axes[j // 2][j % 2]
        ax.plot(iters, cols[:, j], lw=0.5, color="tab:blue")
        ax.set_ylabel(name)
    for j in range(k, nrow * 2):
        axes[j // 2][j % 2].set_axis_off()
    axes[-1][0].set_xlabel("iteration")
    fig.suptitle("Parameter traces")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def fig_pred_scatter(y_true, pred_mean, lower, upper, out_path: str) -> str:
    """Observed vs. predicted with interval whiskers."""
    y = np.asarray(y_true, dtype=np.float64)
    mu = np.asarray(pred_mean, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.4, 4.2))
    ax.errorbar(y, mu, yerr=[mu - np.asarray(lower), np.asarray(upper) - mu],
                fmt="o", ms=2.5, lw=0.4, alpha=0.5, color="tab:blue",
                ecolor="lightsteelblue")
    span = [min(y.min(), mu.min()), max(y.max(), mu.max())]
    ax.plot(span, span, color="black", lw=0.8)
    ax.set_xlabel("observed")
    ax.set_ylabel("predicted mean")
    ax.set_title("Holdout predictions")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def fig_experiment_box(rows: list[dict], out_path: str,
                       metrics: tuple = ("rmspe", "mae", "crps", "coverage")) -> str:
    """Per-model boxplots of replicate metrics from an experiment table."""
    def ok(r):
        return r.get("error") in (None, "", "nan")

    models = []
    for r in rows:
        if ok(r) and r.get("model") not in models:
            models.append(r.get("model"))
    if not models:
        raise ValueError("no successful replicate rows to plot")
    fig, axes = plt.subplots(1, len(metrics), figsize=(2.6 * len(metrics), 3.2))
    axes = np.atleast_1d(axes)
    for ax, metric in zip(axes, metrics):
        data = [
            [v for r in rows
             if ok(r) and r.get("model") == mname and metric in r
             and np.isfinite(v := float(r[metric]))]
            for mname in models
        ]
        ax.boxplot(data, tick_labels=models)
        ax.set_title(metric)
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_run_dir(run_dir: str, out_dir: str | None = None,
                   truth_path: str | None = None) -> list[str]:
    """Render figures for every known artifact found in a run directory.

    sweep.csv -> sweep.png, chain.csv -> trace.png, predictions.csv (plus a
    truth response file) -> predictions.png, replicates.csv -> experiment.png.
    Returns the list of files written.
    """
    from . import dataio

    out_dir = out_dir or run_dir
    dataio.ensure_dir(out_dir)
    written = []

    sweep = os.path.join(run_dir, "sweep.csv")
    if os.path.exists(sweep):
        _, data = dataio.read_table(sweep, expected_header=["radius", "kappa"])
        suggested = None
        man = os.path.join(run_dir, "prepare.json")
        if os.path.exists(man):
            suggested = dataio.read_json(man).get("suggested_radius")
        written.append(fig_radius_sweep(data[:, 0], data[:, 1], suggested,
                                        os.path.join(out_dir, "sweep.png")))

    chain = os.path.join(run_dir, "chain.csv")
    if os.path.exists(chain):
        header, data = dataio.read_table(chain, prefix=["iter"])
        written.append(fig_traces(data, header,
                                  os.path.join(out_dir, "trace.png")))

    preds = os.path.join(run_dir, "predictions.csv")
    if os.path.exists(preds) and truth_path is not None:
        _, pdata = dataio.read_table(
            preds, expected_header=["id", "x", "y", "mean", "sd", "q025", "q975"])
        _, y = dataio.read_response(truth_path)
        if len(y) != len(pdata):
            raise ValueError("truth file length does not match predictions")
        written.append(fig_pred_scatter(y, pdata[:, 3], pdata[:, 5], pdata[:, 6],
                                        os.path.join(out_dir, "predictions.png")))

    reps = os.path.join(run_dir, "replicates.csv")
    if os.path.exists(reps):
        import csv

        with open(reps, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            written.append(fig_experiment_box(
                rows, os.path.join(out_dir, "experiment.png")))

    return written
