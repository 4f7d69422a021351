"""Render experiment-grid results to figures alongside the CSV.

The grid CSV is the canonical delimited output; these helpers draw the
accuracy-versus-dataset-size trends per resolution and a per-class bar
panel, writing PNGs next to the CSV so a run's report directory is
self-contained.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

CLASS_COLUMNS = {
    "center_map": "Center defects (mAP)",
    "poly_miou": "Polycrystalline defects (mIoU)",
    "edge_map": "Edge defects (mAP)",
}


def read_grid_csv(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            parsed: dict[str, Any] = {
                "dataset_size": int(row["dataset_size"]),
                "resolution": int(row["resolution"]),
                "mean": float(row["mean"]),
            }
            for column in CLASS_COLUMNS:
                value = row.get(column, "")
                parsed[column] = float(value) if value else None
            rows.append(parsed)
    return rows


def render_grid_figures(csv_path: Path, out_dir: Path) -> list[Path]:
    """Write trend and per-class figures for one grid CSV; returns paths."""
    rows = read_grid_csv(csv_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    resolutions = sorted({r["resolution"] for r in rows})

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for resolution in resolutions:
        series = sorted(
            (r for r in rows if r["resolution"] == resolution),
            key=lambda r: r["dataset_size"],
        )
        ax.plot(
            [r["dataset_size"] for r in series],
            [100.0 * r["mean"] for r in series],
            marker="o",
            label=f"{resolution}x{resolution}",
        )
    ax.set_xlabel("dataset size (images)")
    ax.set_ylabel("mean accuracy (%)")
    ax.set_title("Mean accuracy vs dataset size")
    ax.grid(True, alpha=0.3)
    ax.legend(title="resolution")
    trend_path = out_dir / "grid_mean_accuracy.png"
    fig.tight_layout()
    fig.savefig(trend_path, dpi=150)
    plt.close(fig)
    written.append(trend_path)

    present = [c for c in CLASS_COLUMNS if any(r[c] is not None for r in rows)]
    if present:
        fig, axes = plt.subplots(
            1, len(resolutions), figsize=(4.5 * len(resolutions), 4.0), squeeze=False
        )
        for axis, resolution in zip(axes[0], resolutions):
            series = sorted(
                (r for r in rows if r["resolution"] == resolution),
                key=lambda r: r["dataset_size"],
            )
            sizes = [str(r["dataset_size"]) for r in series]
            width = 0.8 / len(present)
            for offset, column in enumerate(present):
                values = [100.0 * (r[column] or 0.0) for r in series]
                positions = [i + offset * width for i in range(len(series))]
                axis.bar(positions, values, width=width, label=CLASS_COLUMNS[column])
            axis.set_xticks([i + 0.4 - width / 2 for i in range(len(series))])
            axis.set_xticklabels(sizes)
            axis.set_xlabel("dataset size")
            axis.set_ylabel("accuracy (%)")
            axis.set_ylim(0, 105)
            axis.set_title(f"{resolution}x{resolution}")
            axis.grid(True, axis="y", alpha=0.3)
        axes[0][-1].legend(fontsize=8)
        bars_path = out_dir / "grid_per_class.png"
        fig.tight_layout()
        fig.savefig(bars_path, dpi=150)
        plt.close(fig)
        written.append(bars_path)

    return written
