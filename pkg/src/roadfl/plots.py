"""Figure rendering: RMSE-vs-round line plots written next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _series_from_report(report):
    rounds = [r.round_index for r in report.records]
    rmse = [r.rmse_kmh for r in report.records]
    return rounds, rmse


def plot_rmse(reports, out_path, *, title: str = "Held-out RMSE per round",
              extra_series: dict | None = None) -> Path:
    """One line per report; optional extra named series (e.g. centralized)."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for report in reports:
        x, y = _series_from_report(report)
        ax.plot(x, y, marker="o", markersize=2.5, linewidth=1.2, label=report.name)
    if extra_series:
        for label, ys in extra_series.items():
            ax.plot(range(len(ys)), ys, linestyle="--", linewidth=1.2, label=label)
    ax.set_xlabel("round")
    ax.set_ylabel("RMSE (km/h)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_mean_rmse(groups: dict[str, list], out_path, *,
                   title: str = "Held-out RMSE per round (seed mean)") -> Path:
    """Mean RMSE curve per group of same-arm reports run across seeds."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for label, reports in groups.items():
        n_rounds = min(len(r.records) for r in reports)
        curves = np.array([[rec.rmse_kmh for rec in r.records[:n_rounds]]
                           for r in reports])
        mean = curves.mean(axis=0)
        lo, hi = curves.min(axis=0), curves.max(axis=0)
        x = np.arange(n_rounds)
        ax.plot(x, mean, linewidth=1.4, label=f"{label} (n={len(reports)})")
        ax.fill_between(x, lo, hi, alpha=0.15)
    ax.set_xlabel("round")
    ax.set_ylabel("RMSE (km/h)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
