"""Volume containers, slice-stack I/O and the sample manifest."""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import cv2
import numpy as np

DEFAULT_VOXEL_UM = 3.2
SLICE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp")
MANIFEST_COLUMNS = ("sample_id", "subject_id", "grade", "volume_path", "mask_path")

RAW_INTEGER = "raw-integer"
NORMALIZED_FLOAT = "normalized-float"


class VolumeIOError(Exception):
    """Base class for slice-stack failures."""


class StackNotFoundError(VolumeIOError):
    pass


class EmptyStackError(VolumeIOError):
    pass


class MixedSliceDimensionsError(VolumeIOError):
    pass


class UnsupportedBitDepthError(VolumeIOError):
    pass


class ManifestError(ValueError):
    pass


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = arr.view()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VolumeStack:
    """Intensity volume indexed (z, y, x).

    Integer arrays are raw scanner intensities, floating arrays must lie in
    [0, 1]. The voxel array is made read-only on construction.
    """

    voxels: np.ndarray
    voxel_size_um: float = DEFAULT_VOXEL_UM
    bit_depth: Optional[int] = None

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {v.shape}")
        if not self.voxel_size_um > 0:
            raise ValueError("voxel_size_um must be positive")
        if np.issubdtype(v.dtype, np.floating):
            if v.size and (np.nanmin(v) < 0 or np.nanmax(v) > 1 or np.isnan(v).any()):
                raise ValueError("normalized-float volume has values outside [0, 1]")
        elif not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"unsupported voxel dtype {v.dtype}")
        object.__setattr__(self, "voxels", _readonly(v))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def dtype_class(self) -> str:
        return NORMALIZED_FLOAT if np.issubdtype(self.voxels.dtype, np.floating) else RAW_INTEGER


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary volume with values exactly 0 or 1 (stored as uint8)."""

    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"mask must be a non-empty 3D grid, got shape {v.shape}")
        if v.dtype == bool:
            v = v.astype(np.uint8)
        elif np.issubdtype(v.dtype, np.unsignedinteger):
            if v.max() > 1:
                raise ValueError("mask values must be 0 or 1")
        elif not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "voxels", _readonly(v.astype(np.uint8, copy=False)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def check_aligned(self, vol: Union[VolumeStack, "MaskVolume"]) -> None:
        if self.shape != vol.shape:
            raise ValueError(f"mask shape {self.shape} does not match volume shape {vol.shape}")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    subject_id: str
    grade: int
    volume_path: Path
    mask_path: Path
    z_flip: bool = False


def _slice_key(path: Path) -> tuple[int, str]:
    runs = re.findall(r"\d+", path.stem)
    if not runs:
        return (-1, path.name)
    longest = max(runs, key=len)  # first of equally long runs wins
    return (int(longest), path.name)


def list_slices(directory: Union[str, Path]) -> list[Path]:
    """Slice files of a stack directory in numeric Z order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise StackNotFoundError(f"stack directory not found: {directory}")
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in SLICE_SUFFIXES]
    return sorted(files, key=_slice_key)


def _read_slice(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise VolumeIOError(f"unreadable slice: {path}")
    if img.ndim != 2:
        raise UnsupportedBitDepthError(f"{path.name}: expected a single-channel grayscale slice")
    if img.dtype not in (np.uint8, np.uint16):
        raise UnsupportedBitDepthError(f"{path.name}: unsupported sample type {img.dtype}")
    return img


def _read_slices(directory: Union[str, Path]) -> np.ndarray:
    files = list_slices(directory)
    if not files:
        raise EmptyStackError(f"no readable slices in {directory}")
    first = _read_slice(files[0])
    out = np.empty((len(files),) + first.shape, dtype=first.dtype)
    out[0] = first
    for i, path in enumerate(files[1:], start=1):
        img = _read_slice(path)
        if img.shape != first.shape:
            raise MixedSliceDimensionsError(
                f"{path.name} is {img.shape[1]}x{img.shape[0]}, "
                f"expected {first.shape[1]}x{first.shape[0]}"
            )
        if img.dtype != first.dtype:
            raise UnsupportedBitDepthError(f"{path.name}: mixed bit depths in one stack")
        out[i] = img
    return out


def load_stack(directory: Union[str, Path], expected_voxel_um: float = DEFAULT_VOXEL_UM) -> VolumeStack:
    voxels = _read_slices(directory)
    bits = 8 if voxels.dtype == np.uint8 else 16
    return VolumeStack(voxels, voxel_size_um=expected_voxel_um, bit_depth=bits)


def load_mask(directory: Union[str, Path]) -> MaskVolume:
    """Read a 0/255 mask stack; anything at or above half range is foreground."""
    voxels = _read_slices(directory)
    cut = 128 if voxels.dtype == np.uint8 else 32768
    return MaskVolume((voxels >= cut).astype(np.uint8))


def to_uint16(values: np.ndarray) -> np.ndarray:
    """Scale [0, 1] floats to 16 bit with round-half-up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 65535.0 + 0.5).astype(np.uint16)


def _encode(vol: Union[VolumeStack, MaskVolume]) -> np.ndarray:
    if isinstance(vol, MaskVolume):
        return vol.voxels * np.uint8(255)
    v = vol.voxels
    if vol.dtype_class == NORMALIZED_FLOAT:
        return to_uint16(v)
    if v.dtype in (np.uint8, np.uint16):
        return v
    lo, hi = int(v.min()), int(v.max())
    if lo >= 0 and hi <= 255:
        return v.astype(np.uint8)
    if lo >= 0 and hi <= 65535:
        return v.astype(np.uint16)
    raise UnsupportedBitDepthError(f"integer range [{lo}, {hi}] does not fit 16-bit slices")


def save_stack(vol: Union[VolumeStack, MaskVolume], directory: Union[str, Path], prefix: str = "slice_") -> None:
    directory = Path(directory)
    data = _encode(vol)
    width = max(4, len(str(data.shape[0] - 1)))
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for stale in list_slices(directory):
            stale.unlink()
        for z in range(data.shape[0]):
            path = directory / f"{prefix}{z:0{width}d}.png"
            if not cv2.imwrite(str(path), np.ascontiguousarray(data[z])):
                raise VolumeIOError(f"failed to write {path}")
    except OSError as exc:
        raise VolumeIOError(f"cannot write stack to {directory}: {exc}") from exc


def _resolve(path: str, data_root: Optional[Path], base: Path) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return (data_root if data_root is not None else base) / p


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("", "0", "false", "no"):
        return False
    if t in ("1", "true", "yes"):
        return True
    raise ManifestError(f"unparseable z_flip value {text!r}")


def load_manifest(file: Union[str, Path], data_root: Union[str, Path, None] = None) -> list[SampleRecord]:
    """Read the sample manifest (comma-delimited, UTF-8).

    Relative paths are resolved against ``data_root``, then the ``DATA_ROOT``
    environment variable, then the manifest's own directory. An optional
    ``z_flip`` column marks stacks stored bone-end first.
    """
    file = Path(file)
    if data_root is None and os.environ.get("DATA_ROOT"):
        data_root = os.environ["DATA_ROOT"]
    root = Path(data_root) if data_root is not None else None
    with open(file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"manifest {file} is missing column(s): {', '.join(missing)}")
        records: list[SampleRecord] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            sid = row["sample_id"].strip()
            if sid in seen:
                raise ManifestError(f"duplicate sample_id {sid!r} on line {lineno}")
            seen.add(sid)
            try:
                grade = int(row["grade"])
            except (TypeError, ValueError):
                raise ManifestError(f"unparseable grade {row['grade']!r} on line {lineno}") from None
            if grade < 0:
                raise ManifestError(f"negative grade on line {lineno}")
            records.append(
                SampleRecord(
                    sample_id=sid,
                    subject_id=row["subject_id"].strip(),
                    grade=grade,
                    volume_path=_resolve(row["volume_path"].strip(), root, file.parent),
                    mask_path=_resolve(row["mask_path"].strip(), root, file.parent),
                    z_flip=_parse_bool(row.get("z_flip") or ""),
                )
            )
    return records


def write_manifest(records: list[SampleRecord], file: Union[str, Path]) -> None:
    file = Path(file)
    file.parent.mkdir(parents=True, exist_ok=True)
    with open(file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS + ("z_flip",))
        for r in records:
            writer.writerow([r.sample_id, r.subject_id, r.grade, r.volume_path, r.mask_path, int(r.z_flip)])
