"""Slice-wise training with per-fold best-checkpoint selection."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .cvsplit import FoldAssignment, fold_views
from .losses import LossConfig, build_loss
from .preprocess import PLANES, load_canonical, plane_view
from .unet import UNet, UNetConfig, build
from .volio import SampleRecord

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("fold", "epoch", "train_loss", "val_loss", "wall_time")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    pad_to: tuple[int, int] = (800, 800)
    crop_to: tuple[int, int] = (768, 448)
    hflip_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.5, 2.0)
    loss: LossConfig = field(default_factory=LossConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    # every n-th slice of each plane; 1 uses all slices
    slice_stride: int = 1
    num_workers: int = 0
    deterministic: bool = True

    def __post_init__(self):
        d = self.unet.divisor
        if self.crop_to[0] % d or self.crop_to[1] % d:
            raise ValueError(f"crop_to {self.crop_to} must be divisible by {d}")
        if self.crop_to[0] > self.pad_to[0] or self.crop_to[1] > self.pad_to[1]:
            raise ValueError(f"crop_to {self.crop_to} does not fit inside pad_to {self.pad_to}")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ValueError("gamma_range must satisfy 0 < low <= high")
        if self.batch_size < 1 or self.epochs < 1 or self.slice_stride < 1:
            raise ValueError("batch_size, epochs and slice_stride must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pad_to"], d["crop_to"], d["gamma_range"] = list(self.pad_to), list(self.crop_to), list(self.gamma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        unet = UNetConfig(**d.pop("unet", {}))
        for key in ("pad_to", "crop_to", "gamma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(loss=loss, unet=unet, **d)


# ---------------------------------------------------------------- augmentation


class AugmentParams(NamedTuple):
    top: int
    left: int
    flip: bool
    gamma: float


def sample_augment(
    rng: np.random.Generator,
    pad_to: Sequence[int] = (800, 800),
    crop_to: Sequence[int] = (768, 448),
    hflip_prob: float = 0.5,
    gamma_range: Sequence[float] = (0.5, 2.0),
) -> AugmentParams:
    top = int(rng.integers(0, pad_to[0] - crop_to[0] + 1))
    left = int(rng.integers(0, pad_to[1] - crop_to[1] + 1))
    flip = bool(rng.random() < hflip_prob)
    gamma = float(rng.uniform(gamma_range[0], gamma_range[1]))
    return AugmentParams(top, left, flip, gamma)


def centered_params(pad_to: Sequence[int], crop_to: Sequence[int]) -> AugmentParams:
    """Identity parameters: the crop window that undoes the symmetric padding."""
    return AugmentParams((pad_to[0] - crop_to[0]) // 2, (pad_to[1] - crop_to[1]) // 2, False, 1.0)


def apply_augment(
    image: np.ndarray, mask: np.ndarray, params: AugmentParams, pad_to: Sequence[int] = (800, 800)
) -> tuple[np.ndarray, np.ndarray]:
    h, w = image.shape
    if mask.shape != image.shape:
        raise ValueError("image and mask shapes differ")
    ph, pw = pad_to[0] - h, pad_to[1] - w
    pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    img = np.pad(np.asarray(image, dtype=np.float32), pads)
    msk = np.pad(np.asarray(mask, dtype=np.uint8), pads)
    img = img[params.top:params.top + h, params.left:params.left + w]
    msk = msk[params.top:params.top + h, params.left:params.left + w]
    if params.flip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if params.gamma != 1.0:
        img = np.power(img, np.float32(params.gamma))
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    pad_to: Sequence[int] = (800, 800),
    crop_to: Sequence[int] = (768, 448),
    hflip_prob: float = 0.5,
    gamma_range: Sequence[float] = (0.5, 2.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Pad to ``pad_to``, random-crop back to ``crop_to``, random h-flip, image-only gamma."""
    if tuple(image.shape) != tuple(crop_to):
        raise ValueError(f"expected a {tuple(crop_to)} slice, got {tuple(image.shape)}")
    params = sample_augment(rng, pad_to, crop_to, hflip_prob, gamma_range)
    return apply_augment(image, mask, params, pad_to)


# ---------------------------------------------------------------- data


class SliceDataset(Dataset):
    """ZX and ZY slices of a set of canonical volumes.

    Augmentation randomness is drawn from a generator keyed on
    ``(seed, epoch, item)``, so batches do not depend on worker layout.
    """

    def __init__(self, volumes, masks, config: TrainConfig, augment: bool = False, seed: int = 0):
        self.volumes = list(volumes)
        self.masks = list(masks)
        self.config = config
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        self.index: list[tuple[int, str, int]] = []
        for s, vol in enumerate(self.volumes):
            for plane in PLANES:
                n = plane_view(vol, plane).shape[0]
                self.index.extend((s, plane, i) for i in range(0, n, config.slice_stride))

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.index)

    def slice_at(self, item: int) -> tuple[np.ndarray, np.ndarray]:
        s, plane, i = self.index[item]
        image = plane_view(self.volumes[s], plane)[i]
        if image.dtype == np.uint16:
            image = image.astype(np.float32) / np.float32(65535)
        mask = plane_view(self.masks[s], plane)[i]
        return np.asarray(image, dtype=np.float32), np.asarray(mask, dtype=np.uint8)

    def __getitem__(self, item: int):
        image, mask = self.slice_at(item)
        if self.augment:
            cfg = self.config
            rng = np.random.default_rng((self.seed, self.epoch, item))
            image, mask = augment(image, mask, rng, cfg.pad_to, cfg.crop_to, cfg.hflip_prob, cfg.gamma_range)
        return torch.from_numpy(image[None].copy()), torch.from_numpy(mask[None].astype(np.float32))


def load_split(records: Sequence[SampleRecord], data_dir: Union[str, Path]):
    vols, masks = [], []
    for r in records:
        vol, mask = load_canonical(data_dir, r.sample_id)
        vols.append(vol.voxels)
        masks.append(mask.voxels)
    return vols, masks


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    state_dict: dict
    unet: UNetConfig
    train: TrainConfig
    fold: int
    epoch: int
    val_loss: float
    seed: int
    train_subjects: tuple[str, ...] = ()
    history: list = field(default_factory=list)

    def model(self) -> UNet:
        model = build(self.unet)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": ckpt.state_dict,
        "unet": ckpt.unet.to_dict(),
        "train": ckpt.train.to_dict(),
        "fold": ckpt.fold,
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "seed": ckpt.seed,
        "train_subjects": list(ckpt.train_subjects),
        "history": [list(h) for h in ckpt.history],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return Checkpoint(
        state_dict=payload["state_dict"],
        unet=UNetConfig(**payload["unet"]),
        train=TrainConfig.from_dict(payload["train"]),
        fold=payload["fold"],
        epoch=payload["epoch"],
        val_loss=payload["val_loss"],
        seed=payload["seed"],
        train_subjects=tuple(payload["train_subjects"]),
        history=[tuple(h) for h in payload["history"]],
    )


# ---------------------------------------------------------------- loops


def _append_log(path: Optional[Path], row: Sequence) -> None:
    if path is None:
        return
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(TRAIN_LOG_COLUMNS)
        writer.writerow(row)


def evaluate_loss(model: UNet, dataset: SliceDataset, loss_fn, batch_size: int) -> float:
    """Size-weighted mean batch loss in eval mode, no augmentation."""
    model.eval()
    total, count = 0.0, 0
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    with torch.no_grad():
        for images, masks in loader:
            loss = loss_fn(model(images), masks)
            total += float(loss) * images.shape[0]
            count += images.shape[0]
    return total / max(count, 1)


def train_epoch(model, optimizer, loader, loss_fn, fold: int = 0, epoch: int = 0) -> float:
    model.train()
    total, count = 0.0, 0
    for step, (images, masks) in enumerate(loader):
        optimizer.zero_grad(set_to_none=True)
        loss = loss_fn(model(images), masks)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {float(loss.detach())} at fold {fold}, epoch {epoch}, batch {step}; "
                "check learning rate, loss epsilon and input normalization"
            )
        loss.backward()
        optimizer.step()
        total += float(loss.detach()) * images.shape[0]
        count += images.shape[0]
    return total / max(count, 1)


def train_fold(
    train_records: Sequence[SampleRecord],
    val_records: Sequence[SampleRecord],
    config: TrainConfig,
    data_dir: Union[str, Path],
    fold: int = 0,
    log_path: Union[str, Path, None] = None,
    data=None,
) -> Checkpoint:
    """Train one fold and return the checkpoint with the lowest validation loss.

    ``data`` may carry preloaded ``((train_vols, train_masks), (val_vols, val_masks))``
    arrays; otherwise canonical stacks are read from ``data_dir``.
    """
    if not train_records:
        raise ValueError("empty training set")
    if not val_records:
        raise ValueError("empty validation set")
    log_path = Path(log_path) if log_path is not None else None
    seed = config.seed
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    if data is None:
        data = (load_split(train_records, data_dir), load_split(val_records, data_dir))
    (tv, tm), (vv, vm) = data
    train_ds = SliceDataset(tv, tm, config, augment=True, seed=seed)
    val_ds = SliceDataset(vv, vm, config, augment=False, seed=seed)

    model = build(config.unet)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    loss_fn = build_loss(config.loss)

    best: Optional[Checkpoint] = None
    history = []
    start = time.time()
    for epoch in range(config.epochs):
        train_ds.set_epoch(epoch)
        order = np.random.default_rng((seed, epoch)).permutation(len(train_ds)).tolist()
        generator = torch.Generator().manual_seed(seed * 1000 + epoch)
        loader = DataLoader(
            train_ds, batch_size=config.batch_size, sampler=order,
            num_workers=config.num_workers, generator=generator,
        )
        train_loss = train_epoch(model, optimizer, loader, loss_fn, fold, epoch)
        val_loss = evaluate_loss(model, val_ds, loss_fn, config.batch_size)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"non-finite validation loss at fold {fold}, epoch {epoch}")
        wall = time.time() - start
        history.append((fold, epoch, train_loss, val_loss, wall))
        _append_log(log_path, (fold, epoch, f"{train_loss:.6f}", f"{val_loss:.6f}", f"{wall:.1f}"))
        log.info("fold %d epoch %d train %.4f val %.4f (%.0fs)", fold, epoch, train_loss, val_loss, wall)
        if best is None or val_loss < best.val_loss:
            best = Checkpoint(
                state_dict=copy.deepcopy(model.state_dict()),
                unet=config.unet,
                train=config,
                fold=fold,
                epoch=epoch,
                val_loss=val_loss,
                seed=seed,
                train_subjects=tuple(sorted({r.subject_id for r in train_records})),
            )
    best.history = history
    return best


def checkpoint_path(checkpoint_dir: Union[str, Path], fold: int) -> Path:
    return Path(checkpoint_dir) / f"fold_{fold}.pt"


def train_all_folds(
    records: Sequence[SampleRecord],
    assignment: FoldAssignment,
    config: TrainConfig,
    data_dir: Union[str, Path],
    checkpoint_dir: Union[str, Path],
    folds: Optional[Sequence[int]] = None,
    force: bool = False,
    log_path: Union[str, Path, None] = None,
) -> list[Checkpoint]:
    """Train each fold with seed ``config.seed + fold``; existing fold checkpoints are reused."""
    folds = list(range(assignment.k)) if folds is None else list(folds)
    out = []
    for fold in folds:
        train, val = fold_views(assignment, fold)
        leaked = {r.subject_id for r in train} & {r.subject_id for r in val}
        assert not leaked, f"fold {fold}: subjects in both train and val: {sorted(leaked)}"
        path = checkpoint_path(checkpoint_dir, fold)
        if path.exists() and not force:
            log.info("fold %d: reusing %s", fold, path)
            out.append(load_checkpoint(path))
            continue
        cfg = replace(config, seed=config.seed + fold)
        ckpt = train_fold(train, val, cfg, data_dir, fold=fold, log_path=log_path)
        save_checkpoint(ckpt, path)
        out.append(ckpt)
    return out
