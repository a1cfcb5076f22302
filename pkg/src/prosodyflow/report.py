"""Delimited outputs and figures.

CSV files start with '# key=value' provenance comment lines (config hash,
format versions). Figures are rendered with matplotlib to SVG with a fixed
hash salt and no date metadata, so report outputs are byte-reproducible;
wall-clock timestamps belong in the sidecar run log only.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalsuite import DensityEstimate, SweepTable  # noqa: E402

plt.rcParams["svg.hashsalt"] = "prosodyflow"

_SVG_META = {"Date": None}


def write_csv(path, columns: list[str], rows: list[list],
              provenance: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        for key in sorted(provenance or {}):
            f.write(f"# {key}={provenance[key]}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    provenance = {}
    rows = []
    columns: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        body = []
        for line in f:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition("=")
                provenance[key] = value
            else:
                body.append(line)
        reader = csv.reader(body)
        for i, row in enumerate(reader):
            if i == 0:
                columns = row
            else:
                rows.append(row)
    return provenance, columns, rows


def save_figure(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_sweep(table: SweepTable, out_dir, prefix: str = "sweep") -> list[str]:
    """One figure per variable: both variance statistics over log-scaled tau."""
    paths = []
    taus = table.taus
    for variable in table.variables:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharex=True)
        for ax, stat, label in (
            (axes[0], table.within[variable], "within-contour variance"),
            (axes[1], table.across[variable], "variance of contour means"),
        ):
            ax.plot(taus, stat, marker="o", linewidth=1.2)
            ax.set_xlabel("sampling temperature")
            ax.set_ylabel(label)
            if all(t > 0 for t in taus):
                ax.set_xscale("log")
            ax.grid(True, alpha=0.3)
        fig.suptitle(f"{variable}: variance vs temperature")
        fig.tight_layout()
        path = str(out_dir / f"{prefix}_{variable}.svg")
        save_figure(fig, path)
        paths.append(path)
    return paths


def plot_density_overlay(estimates: dict[str, DensityEstimate], title: str,
                         path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, est in estimates.items():
        ax.plot(est.grid, est.density, label=label, linewidth=1.2)
        ax.fill_between(est.grid, est.density, alpha=0.15)
    ax.set_title(title)
    ax.set_xlabel("value")
    ax.set_ylabel("density")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    save_figure(fig, path)


def plot_realization_summary(summaries: dict[str, "object"], variable: str,
                             path) -> None:
    """Overlay mean/variance KDEs from several sources (reference vs model)."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for label, summary in summaries.items():
        axes[0].plot(summary.means_kde.grid, summary.means_kde.density,
                     label=label, linewidth=1.2)
        axes[1].plot(summary.variances_kde.grid, summary.variances_kde.density,
                     label=label, linewidth=1.2)
    axes[0].set_title(f"{variable}: realization means")
    axes[1].set_title(f"{variable}: realization variances")
    for ax in axes:
        ax.set_ylabel("density")
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    save_figure(fig, path)
