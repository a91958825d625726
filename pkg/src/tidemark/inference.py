"""Out-of-fold dual-plane prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .cvsplit import FoldAssignment
from .preprocess import CANONICAL_SHAPE, PLANES, as_float, check_canonical, load_canonical, plane_view, reassemble
from .trainer import Checkpoint
from .volio import MaskVolume, VolumeStack, save_stack

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = {"bce_log_jaccard": 0.3, "bce": 0.5, "focal": 0.5}


class LeakageError(AssertionError):
    pass


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    values: np.ndarray
    provenance: str  # ZX, ZY or averaged

    def __post_init__(self):
        if self.provenance not in PLANES + ("averaged",):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        v = self.values
        if v.ndim != 3 or (v.size and (v.min() < 0 or v.max() > 1)):
            raise ValueError("probability volume must be 3D with values in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


def threshold_for(loss_kind: str, table: Optional[Mapping[str, float]] = None) -> float:
    table = DEFAULT_THRESHOLDS if table is None else table
    return float(table.get(loss_kind, 0.5))


def predict_plane(
    model: torch.nn.Module,
    vol: VolumeStack,
    plane: str,
    batch_size: int = 8,
    shape: Sequence[int] = CANONICAL_SHAPE,
) -> ProbabilityVolume:
    """Run the model over every slice of ``plane`` and restack the outputs."""
    check_canonical(vol.shape, shape)
    slices = plane_view(as_float(vol), plane)
    out = np.empty(slices.shape, dtype=np.float32)
    model.eval()
    with torch.no_grad():
        for start in range(0, slices.shape[0], batch_size):
            batch = torch.from_numpy(np.ascontiguousarray(slices[start:start + batch_size]))[:, None]
            out[start:start + batch.shape[0]] = model(batch)[:, 0].numpy()
    return ProbabilityVolume(reassemble(out, plane), plane)


def ensemble_and_threshold(p_zx: ProbabilityVolume, p_zy: ProbabilityVolume, threshold: float) -> MaskVolume:
    """Voxelwise mean of the two planes, foreground where mean >= threshold."""
    if p_zx.shape != p_zy.shape:
        raise ValueError(f"shape mismatch: {p_zx.shape} vs {p_zy.shape}")
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if (p_zx.provenance, p_zy.provenance) != ("ZX", "ZY"):
        raise ValueError("expected one ZX and one ZY probability volume")
    mean = (p_zx.values.astype(np.float64) + p_zy.values.astype(np.float64)) / 2.0
    return MaskVolume((mean >= threshold).astype(np.uint8))


def predict_sample(model, vol: VolumeStack, threshold: float, batch_size: int = 8, shape=CANONICAL_SHAPE) -> MaskVolume:
    p_zx = predict_plane(model, vol, "ZX", batch_size, shape)
    p_zy = predict_plane(model, vol, "ZY", batch_size, shape)
    return ensemble_and_threshold(p_zx, p_zy, threshold)


def prediction_dir(run_dir: Union[str, Path], loss_kind: str, sample_id: str) -> Path:
    return Path(run_dir) / "predictions" / loss_kind / sample_id


def out_of_fold_predict(
    checkpoints: Mapping[int, Checkpoint],
    assignment: FoldAssignment,
    loss_kind: str,
    data_dir: Union[str, Path],
    thresholds: Optional[Mapping[str, float]] = None,
    shape: Sequence[int] = CANONICAL_SHAPE,
    out_root: Union[str, Path, None] = None,
    batch_size: int = 8,
    voxel_um: float = 3.2,
) -> dict[str, MaskVolume]:
    """Predict each sample with the checkpoint of the fold that held it out.

    With ``out_root`` set, masks are also written under
    ``out_root/predictions/<loss_kind>/<sample_id>/`` and only the sample ids
    are kept in memory (values of the returned map are then ``None``).
    """
    threshold = threshold_for(loss_kind, thresholds)
    models = {}
    preds: dict[str, Optional[MaskVolume]] = {}
    for record in assignment.records:
        fold = assignment.fold_of(record)
        if fold not in checkpoints:
            raise KeyError(f"sample {record.sample_id}: no checkpoint for fold {fold}")
        ckpt = checkpoints[fold]
        if ckpt.fold != fold:
            raise LeakageError(f"checkpoint for fold {fold} reports fold {ckpt.fold}")
        if record.subject_id in ckpt.train_subjects:
            raise LeakageError(f"sample {record.sample_id}: subject {record.subject_id} was in fold {fold} training")
        if record.sample_id in preds:
            raise ValueError(f"sample {record.sample_id} predicted twice")
        if fold not in models:
            models[fold] = ckpt.model()
        vol, _ = load_canonical(data_dir, record.sample_id, voxel_um)
        mask = predict_sample(models[fold], vol, threshold, batch_size, shape)
        log.info("predicted %s with fold %d (threshold %.2f)", record.sample_id, fold, threshold)
        if out_root is not None:
            save_stack(mask, prediction_dir(out_root, loss_kind, record.sample_id))
            preds[record.sample_id] = None
        else:
            preds[record.sample_id] = mask
    return preds
