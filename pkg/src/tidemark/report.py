"""Per-pad summaries across samples and metric-vs-pad plots."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

from .metrics import MetricRow

log = logging.getLogger(__name__)

METRICS = ("iou", "dice", "vs")
SUMMARY_COLUMNS = ("loss_kind", "pad_um", "metric", "n", "median", "std")


def summarize(rows: Iterable[MetricRow]) -> dict[tuple[str, float, str], tuple[int, float, float]]:
    """(loss_kind, pad_um, metric) -> (n, median, sample std with ddof=1)."""
    groups: dict[tuple[str, float], list[MetricRow]] = defaultdict(list)
    for r in rows:
        groups[(r.loss_kind, r.pad_um)].append(r)
    out = {}
    for (kind, pad), members in groups.items():
        for metric in METRICS:
            values = np.array([getattr(m, metric) for m in members], dtype=np.float64)
            std = float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")
            out[(kind, pad, metric)] = (len(values), float(np.median(values)), std)
    return out


def write_summary(summary: Mapping, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for (kind, pad, metric), (n, med, std) in sorted(summary.items()):
            writer.writerow([kind, f"{pad:g}", metric, n, f"{med:.6f}", f"{std:.6f}"])


def read_summary(path: Union[str, Path]) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["loss_kind"], float(row["pad_um"]), row["metric"])
            out[key] = (int(row["n"]), float(row["median"]), float(row["std"]))
    return out


def table(summary: Mapping, metric: str = "iou") -> tuple[list[str], list[float], list[list[str]]]:
    """Loss kinds x pads grid of ``median±std`` cells."""
    kinds = sorted({k for k, _, m in summary if m == metric})
    pads = sorted({p for _, p, m in summary if m == metric})
    cells = []
    for kind in kinds:
        row = []
        for pad in pads:
            entry = summary.get((kind, pad, metric))
            row.append("" if entry is None else f"{entry[1]:.2f}±{entry[2]:.2f}")
        cells.append(row)
    return kinds, pads, cells


def write_table(summary: Mapping, path: Union[str, Path], metric: str = "iou") -> None:
    kinds, pads, cells = table(summary, metric)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loss_kind"] + [f"{p:g}" for p in pads])
        for kind, row in zip(kinds, cells):
            writer.writerow([kind] + row)


def check_monotone(summary: Mapping) -> list[str]:
    """Loss/metric pairs whose median decreases with pad; logged as warnings only."""
    offenders = []
    for kind in sorted({k for k, _, _ in summary}):
        for metric in METRICS:
            pads = sorted(p for k, p, m in summary if k == kind and m == metric)
            medians = [summary[(kind, p, metric)][1] for p in pads]
            if any(b < a for a, b in zip(medians, medians[1:])):
                offenders.append(f"{kind}/{metric}")
                log.warning("median %s for %s is not monotone in pad: %s", metric, kind, medians)
    return offenders


def curves(summary: Mapping) -> dict[str, dict[str, tuple[list[float], list[float]]]]:
    """metric -> loss kind -> (pads, medians)."""
    out: dict = {}
    for metric in METRICS:
        per_kind = {}
        for kind in sorted({k for k, _, m in summary if m == metric}):
            pads = sorted(p for k, p, m in summary if k == kind and m == metric)
            per_kind[kind] = (pads, [summary[(kind, p, metric)][1] for p in pads])
        out[metric] = per_kind
    return out


def plot_curves(summary: Mapping, out_dir: Union[str, Path]) -> list[Path]:
    """One PNG per metric, one line per loss kind (median vs pad)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = {"iou": "IoU", "dice": "Dice", "vs": "Volumetric similarity"}
    paths = []
    for metric, per_kind in curves(summary).items():
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for kind, (pads, medians) in per_kind.items():
            ax.plot(pads, medians, marker="o", label=kind)
        ax.set_xlabel("Pad [µm]")
        ax.set_ylabel(f"Median {labels[metric]}")
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths

