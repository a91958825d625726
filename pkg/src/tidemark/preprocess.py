"""Trim, normalize, localize, crop and slice micro-CT stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence, Union

import numpy as np
from scipy import ndimage

from .volio import MaskVolume, VolumeStack, load_mask, load_stack, save_stack

CANONICAL_SHAPE = (768, 448, 448)  # (Z, Y, X)
PLANES = ("ZX", "ZY")


class EmptySampleError(ValueError):
    pass


class NonCanonicalShapeError(ValueError):
    pass


@dataclass(frozen=True)
class CanonicalCrop:
    center_xy: tuple[int, int]
    crop_shape: tuple[int, int, int] = CANONICAL_SHAPE
    z_origin: int = 0
    source_shape: tuple[int, int, int] = (0, 0, 0)
    # zero padding applied per side: ((z_lo, z_hi), (y_lo, y_hi), (x_lo, x_hi))
    padding: tuple[tuple[int, int], ...] = ((0, 0), (0, 0), (0, 0))

    @property
    def padded(self) -> bool:
        return any(lo or hi for lo, hi in self.padding)


class SlicePair(NamedTuple):
    image: np.ndarray
    mask: np.ndarray
    plane: str
    index: int


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def flip_z(vol: VolumeStack) -> VolumeStack:
    return VolumeStack(vol.voxels[::-1], vol.voxel_size_um, vol.bit_depth)


def trim_bottom(vol: VolumeStack, fraction: float = 0.30) -> VolumeStack:
    """Drop the deep (high-Z) end, keeping ceil(Z * (1 - fraction)) slices."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    z = vol.shape[0]
    if z < 2:
        raise ValueError("need at least two slices to trim")
    # round() guards against 0.7 * 1000 = 700.0000000000001 style noise
    keep = math.ceil(round(z * (1.0 - fraction), 9))
    return VolumeStack(vol.voxels[:keep], vol.voxel_size_um, vol.bit_depth)


def trim_mask(mask: MaskVolume, keep: int) -> MaskVolume:
    return MaskVolume(mask.voxels[:keep])


def normalize_global(vol: VolumeStack) -> VolumeStack:
    v = vol.voxels.astype(np.float32)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / np.float32(hi - lo)
        np.clip(out, 0.0, 1.0, out=out)
    return VolumeStack(out, vol.voxel_size_um)


def occupancy_image(vol: VolumeStack, threshold: float = 0.1) -> np.ndarray:
    """Binarize at ``threshold`` and sum along Z."""
    return (vol.voxels >= threshold).sum(axis=0)


def locate_center(vol: VolumeStack, threshold: float = 0.1) -> tuple[int, int]:
    """(cx, cy) centroid of the largest 8-connected foreground region of the Z-summed occupancy."""
    occ = occupancy_image(vol, threshold) > 0
    labels, n = ndimage.label(occ, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        raise EmptySampleError("no foreground after thresholding")
    areas = np.bincount(labels.ravel())[1:]
    largest = int(np.argmax(areas)) + 1
    ys, xs = np.nonzero(labels == largest)
    return round_half_away(xs.mean()), round_half_away(ys.mean())


def _window(length: int, start: int, size: int) -> tuple[slice, slice, tuple[int, int]]:
    """Source/destination slices of a window [start, start+size) into [0, length)."""
    src_lo, src_hi = max(start, 0), min(start + size, length)
    pad_lo = src_lo - start
    pad_hi = size - pad_lo - max(src_hi - src_lo, 0)
    if src_hi <= src_lo:
        return slice(0, 0), slice(0, 0), (size, 0)
    return slice(src_lo, src_hi), slice(pad_lo, pad_lo + src_hi - src_lo), (pad_lo, pad_hi)


def crop_canonical(
    vol: VolumeStack,
    mask: MaskVolume,
    center: tuple[int, int],
    shape: Sequence[int] = CANONICAL_SHAPE,
) -> tuple[VolumeStack, MaskVolume, CanonicalCrop]:
    """Cut a fixed-size window centred on ``center`` in XY and anchored at Z=0.

    Parts of the window outside the source are zero-filled; volume and mask
    share the exact same geometry.
    """
    mask.check_aligned(vol)
    cz, cy_size, cx_size = (int(s) for s in shape)
    cx, cy = int(center[0]), int(center[1])
    zs, ys, xs = vol.shape
    if not (0 <= cx < xs and 0 <= cy < ys):
        raise ValueError(f"center {center} outside XY extent {xs}x{ys}")
    z_src, z_dst, z_pad = _window(zs, 0, cz)
    y_src, y_dst, y_pad = _window(ys, cy - cy_size // 2, cy_size)
    x_src, x_dst, x_pad = _window(xs, cx - cx_size // 2, cx_size)

    out_v = np.zeros((cz, cy_size, cx_size), dtype=vol.voxels.dtype)
    out_m = np.zeros((cz, cy_size, cx_size), dtype=np.uint8)
    out_v[z_dst, y_dst, x_dst] = vol.voxels[z_src, y_src, x_src]
    out_m[z_dst, y_dst, x_dst] = mask.voxels[z_src, y_src, x_src]
    crop = CanonicalCrop(
        center_xy=(cx, cy),
        crop_shape=(cz, cy_size, cx_size),
        z_origin=0,
        source_shape=tuple(vol.shape),
        padding=(z_pad, y_pad, x_pad),
    )
    return VolumeStack(out_v, vol.voxel_size_um, vol.bit_depth), MaskVolume(out_m), crop


def plane_view(arr: np.ndarray, plane: str) -> np.ndarray:
    """View of a (Z, Y, X) array as (slice, Z, lateral) for the given plane."""
    if plane == "ZX":
        return arr.transpose(1, 0, 2)
    if plane == "ZY":
        return arr.transpose(2, 0, 1)
    raise ValueError(f"unknown plane {plane!r}")


def reassemble(slices: np.ndarray, plane: str) -> np.ndarray:
    """Inverse of :func:`plane_view`: stack (slice, Z, lateral) back to (Z, Y, X)."""
    slices = np.asarray(slices)
    if plane == "ZX":
        return np.ascontiguousarray(slices.transpose(1, 0, 2))
    if plane == "ZY":
        return np.ascontiguousarray(slices.transpose(1, 2, 0))
    raise ValueError(f"unknown plane {plane!r}")


def check_canonical(shape: Sequence[int], expected: Sequence[int] = CANONICAL_SHAPE) -> None:
    if tuple(shape) != tuple(expected):
        raise NonCanonicalShapeError(f"expected canonical shape {tuple(expected)}, got {tuple(shape)}")


def slice_planes(
    vol: VolumeStack, mask: MaskVolume, shape: Sequence[int] = CANONICAL_SHAPE
) -> Iterator[SlicePair]:
    """All ZX slices (fixed y, ascending) then all ZY slices (fixed x, ascending)."""
    check_canonical(vol.shape, shape)
    mask.check_aligned(vol)
    for plane in PLANES:
        images, masks = plane_view(vol.voxels, plane), plane_view(mask.voxels, plane)
        for i in range(images.shape[0]):
            yield SlicePair(images[i], masks[i], plane, i)


@dataclass(frozen=True)
class PreprocessResult:
    volume: VolumeStack
    mask: MaskVolume
    crop: CanonicalCrop
    raw_shape: tuple[int, int, int]


def preprocess_sample(
    vol: VolumeStack,
    mask: MaskVolume,
    fraction: float = 0.30,
    threshold: float = 0.1,
    shape: Sequence[int] = CANONICAL_SHAPE,
    z_flip: bool = False,
) -> PreprocessResult:
    """Full chain: optional Z flip, trim, normalize, locate, crop."""
    mask.check_aligned(vol)
    raw_shape = tuple(vol.shape)
    if z_flip:
        vol = flip_z(vol)
        mask = MaskVolume(mask.voxels[::-1])
    vol = trim_bottom(vol, fraction)
    mask = trim_mask(mask, vol.shape[0])
    vol = normalize_global(vol)
    center = locate_center(vol, threshold)
    vol_c, mask_c, crop = crop_canonical(vol, mask, center, shape)
    return PreprocessResult(vol_c, mask_c, crop, raw_shape)


def canonical_dirs(root: Union[str, Path], sample_id: str) -> tuple[Path, Path]:
    """(volume_dir, mask_dir) of a preprocessed sample under ``root``."""
    base = Path(root) / sample_id
    return base / "volume", base / "mask"


def save_canonical(root: Union[str, Path], sample_id: str, vol: VolumeStack, mask: MaskVolume) -> None:
    vdir, mdir = canonical_dirs(root, sample_id)
    save_stack(vol, vdir)
    save_stack(mask, mdir)


def load_canonical(root: Union[str, Path], sample_id: str, voxel_um: float = 3.2) -> tuple[VolumeStack, MaskVolume]:
    vdir, mdir = canonical_dirs(root, sample_id)
    vol = load_stack(vdir, voxel_um)
    mask = load_mask(mdir)
    mask.check_aligned(vol)
    return vol, mask


def as_float(vol: VolumeStack) -> np.ndarray:
    """Intensities in [0, 1] as float32; stored 8/16-bit stacks are rescaled to full range."""
    v = vol.voxels
    if np.issubdtype(v.dtype, np.floating):
        return v.astype(np.float32, copy=False)
    if v.dtype == np.uint8:
        return v.astype(np.float32) / np.float32(255)
    if v.dtype == np.uint16:
        return v.astype(np.float32) / np.float32(65535)
    raise ValueError(f"cannot interpret {v.dtype} volume as normalized intensities")
