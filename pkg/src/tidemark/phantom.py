"""Synthetic osteochondral plugs for smoke tests and desk-scale runs.

Each phantom is a vertical cylinder in air: stained cartilage on top, a
curved tidemark, then calcified tissue and trabecular bone. Contrast at the
tidemark is partly washed out by a smooth random field and a few
non-enhancing voids sit on the interface, mimicking stained-sample artefacts.
The mask is the hard tissue (everything at or below the tidemark inside the
cylinder).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

from .volio import MaskVolume, SampleRecord, VolumeStack, save_stack, write_manifest


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (366, 160, 160)  # raw (Z, Y, X)
    radius: float = 50.0
    surface_z: int = 24
    tidemark_z: float = 110.0
    tidemark_amplitude: float = 12.0
    step: float = 0.14  # calcified minus cartilage intensity at full contrast
    max_contrast_loss: float = 0.8
    n_voids: int = 3
    noise: float = 0.025
    center_jitter: float = 8.0  # max lateral offset of the cylinder axis


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    f -= f.min()
    return f / max(f.max(), 1e-12)


def tidemark_surface(rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    """Smooth curved interface depth per (y, x)."""
    _, ny, nx = spec.shape
    y, x = np.mgrid[0:ny, 0:nx].astype(np.float64)
    a = spec.tidemark_amplitude
    phase = rng.uniform(0, 2 * np.pi, size=3)
    lam = rng.uniform(80, 160, size=2)
    t = (
        spec.tidemark_z
        + 0.6 * a * np.sin(2 * np.pi * x / lam[0] + phase[0])
        + 0.4 * a * np.cos(2 * np.pi * y / lam[1] + phase[1])
        + 0.2 * a * np.sin(2 * np.pi * (x + y) / 60.0 + phase[2])
    )
    return t


def make_phantom(rng: np.random.Generator, spec: PhantomSpec = PhantomSpec()) -> tuple[VolumeStack, MaskVolume]:
    nz, ny, nx = spec.shape
    j = spec.center_jitter
    cy = ny / 2 + rng.uniform(-j, j)
    cx = nx / 2 + rng.uniform(-j, j)
    y, x = np.mgrid[0:ny, 0:nx].astype(np.float64)
    inside = (y - cy) ** 2 + (x - cx) ** 2 <= spec.radius**2
    tide = tidemark_surface(rng, spec)
    tide_idx = np.ceil(tide).astype(int)

    z = np.arange(nz, dtype=np.float64)[:, None, None]
    depth = z - tide[None]  # negative in cartilage, positive below the tidemark
    hard = (z >= tide_idx[None]) & inside[None]

    # stained cartilage grows brighter towards the tidemark
    cart = 0.38 + 0.14 * np.clip((z - spec.surface_z) / (spec.tidemark_z - spec.surface_z), 0, 1)
    contrast = 1.0 - spec.max_contrast_loss * _smooth_field(rng, (ny, nx), 12.0)
    calcified = cart + spec.step * contrast[None]
    # trabecular bone starts some distance below the interface
    trab = _smooth_field(rng, (nz // 2, ny // 2, nx // 2), 1.5)
    trab = ndimage.zoom(trab, 2, order=1)[:nz, :ny, :nx]
    marrow = (trab < 0.45) & (depth > 28)
    bone = np.where(marrow, 0.30, calcified + 0.08)

    vol = np.where(depth < 0, cart, np.where(depth < 28, calcified, bone))
    sample = inside[None] & (z >= spec.surface_z)

    # non-enhancing voids straddling the interface
    for _ in range(spec.n_voids):
        reach = 0.6 * spec.radius
        vy, vx = cy + rng.uniform(-reach, reach), cx + rng.uniform(-reach, reach)
        r = rng.uniform(0.12, 0.24) * spec.radius
        vz = tide[int(np.clip(vy, 0, ny - 1)), int(np.clip(vx, 0, nx - 1))]
        ell = ((y - vy) ** 2 + (x - vx) ** 2)[None] / r**2 + ((z - vz) / 5.0) ** 2 <= 1
        vol = np.where(ell, vol - 0.15, vol)

    noise = rng.normal(0, 1, size=vol.shape)
    vol = np.where(sample, vol + spec.noise * noise, 0.02 + 0.004 * noise)
    raw = np.clip(vol * 40000 + 1500, 0, 65535).astype(np.uint16)
    return VolumeStack(raw, bit_depth=16), MaskVolume(hard.astype(np.uint8))


def write_dataset(
    root: Union[str, Path],
    n_samples: int = 8,
    n_subjects: int = 4,
    seed: int = 0,
    spec: PhantomSpec = PhantomSpec(),
) -> Path:
    """Write raw phantom stacks plus ``manifest.csv`` under ``root``; returns the manifest path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_samples):
        subject = i % n_subjects
        vol, mask = make_phantom(rng, spec)
        sid = f"S{i:02d}"
        save_stack(vol, root / sid / "volume")
        save_stack(mask, root / sid / "mask")
        records.append(
            SampleRecord(
                sample_id=sid,
                subject_id=f"P{subject:02d}",
                grade=subject % 4,
                volume_path=Path(sid) / "volume",
                mask_path=Path(sid) / "mask",
            )
        )
    manifest = root / "manifest.csv"
    write_manifest(records, manifest)
    return manifest
