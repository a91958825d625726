"""Tidemark-banded overlap metrics.

The tidemark is taken per (slice, column) as the first foreground depth of the
ground-truth hard-tissue mask. Scores are computed only inside a band of
``±pad`` voxels along Z around it, with counts pooled over the whole sample.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

from .volio import MaskVolume

PADS_UM = (15, 30, 45, 60, 75, 90, 105, 120, 135, 150)
REPORT_COLUMNS = (
    "sample_id", "subject_id", "loss_kind", "pad_um", "pad_voxels",
    "TP", "FP", "FN", "TN", "iou", "dice", "vs", "band_empty_flag",
)


def pad_um_to_voxels(pad_um: float, voxel_um: float) -> int:
    if not (pad_um > 0 and voxel_um > 0):
        raise ValueError("pad and voxel size must be positive")
    return max(1, math.floor(pad_um / voxel_um + 0.5))


@dataclass(frozen=True, eq=False)
class TidemarkSurface:
    """Interface depth per (slice, column) for one slicing plane.

    ``depth[s, c]`` is only meaningful where ``present[s, c]``; elsewhere it is -1.
    For ZX the slice index is y and the column is x; for ZY it is the reverse.
    """

    depth: np.ndarray
    present: np.ndarray
    plane: str
    n_z: int

    def as_yx(self) -> tuple[np.ndarray, np.ndarray]:
        if self.plane == "ZX":
            return self.depth, self.present
        return self.depth.T, self.present.T


@dataclass(frozen=True, eq=False)
class BandMask:
    voxels: np.ndarray
    pad_voxels: int
    pad_um: float = float("nan")

    @property
    def size(self) -> int:
        return int(self.voxels.sum())


class Confusion(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


def extract_tidemark(gt: MaskVolume, plane: str = "ZX") -> TidemarkSurface:
    g = gt.voxels.astype(bool)
    present = g.any(axis=0)  # (Y, X)
    depth = np.where(present, g.argmax(axis=0), -1)
    if plane == "ZY":
        depth, present = depth.T, present.T
    elif plane != "ZX":
        raise ValueError(f"unknown plane {plane!r}")
    return TidemarkSurface(np.ascontiguousarray(depth), np.ascontiguousarray(present), plane, g.shape[0])


def build_band(surface: TidemarkSurface, pad_voxels: int, shape: Sequence[int], pad_um: float = float("nan")) -> BandMask:
    if pad_voxels < 1:
        raise ValueError("pad_voxels must be at least 1")
    depth, present = surface.as_yx()
    z = np.arange(shape[0])[:, None, None]
    band = present[None] & (np.abs(z - depth[None]) <= pad_voxels)
    return BandMask(band, int(pad_voxels), pad_um)


def banded_confusion(pred: MaskVolume, gt: MaskVolume, band: BandMask) -> Confusion:
    if not (pred.shape == gt.shape == band.voxels.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, band {band.voxels.shape}")
    b = band.voxels
    p = pred.voxels[b].astype(bool)
    g = gt.voxels[b].astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size) - tp - fp - fn
    return Confusion(tp, fp, fn, tn)


def iou(c: Confusion) -> float:
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def dice(c: Confusion) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def volumetric_similarity(c: Confusion) -> float:
    den = 2 * c.tp + c.fp + c.fn
    # one integer division keeps the result correctly rounded
    return 1.0 if den == 0 else (den - abs(c.fp - c.fn)) / den


@dataclass
class MetricRow:
    sample_id: str
    subject_id: str
    loss_kind: str
    pad_um: float
    pad_voxels: int
    TP: int
    FP: int
    FN: int
    TN: int
    iou: float
    dice: float
    vs: float
    band_empty_flag: bool

    @property
    def confusion(self) -> Confusion:
        return Confusion(self.TP, self.FP, self.FN, self.TN)


def evaluate_sample(
    pred: MaskVolume,
    gt: MaskVolume,
    pads_um: Iterable[float] = PADS_UM,
    voxel_um: float = 3.2,
    sample_id: str = "",
    subject_id: str = "",
    loss_kind: str = "",
) -> list[MetricRow]:
    """One metric row per pad level, band built from ZX slices of ``gt``."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    surface = extract_tidemark(gt, "ZX")
    rows = []
    for pad_um in pads_um:
        pad_vox = pad_um_to_voxels(pad_um, voxel_um)
        band = build_band(surface, pad_vox, gt.shape, pad_um)
        c = banded_confusion(pred, gt, band)
        rows.append(
            MetricRow(
                sample_id, subject_id, loss_kind, float(pad_um), pad_vox,
                c.tp, c.fp, c.fn, c.tn, iou(c), dice(c), volumetric_similarity(c),
                band_empty_flag=(c.tp + c.fp + c.fn) == 0,
            )
        )
    return rows


def write_report(rows: Iterable[MetricRow], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            d = asdict(row)
            d["band_empty_flag"] = int(row.band_empty_flag)
            writer.writerow(d)


def read_report(path: Union[str, Path]) -> list[MetricRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                MetricRow(
                    sample_id=raw["sample_id"],
                    subject_id=raw["subject_id"],
                    loss_kind=raw["loss_kind"],
                    pad_um=float(raw["pad_um"]),
                    pad_voxels=int(raw["pad_voxels"]),
                    TP=int(raw["TP"]), FP=int(raw["FP"]), FN=int(raw["FN"]), TN=int(raw["TN"]),
                    iou=float(raw["iou"]), dice=float(raw["dice"]), vs=float(raw["vs"]),
                    band_empty_flag=raw["band_empty_flag"] in ("1", "True", "true"),
                )
            )
    return rows
