"""YAML run configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .inference import DEFAULT_THRESHOLDS
from .losses import LossConfig
from .metrics import PADS_UM
from .preprocess import CANONICAL_SHAPE
from .trainer import TrainConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    manifest: Path
    data_root: Optional[Path] = None
    voxel_um: float = 3.2
    z_flip: dict[str, bool] = field(default_factory=dict)


@dataclass(frozen=True)
class PreprocessSection:
    fraction: float = 0.30
    threshold: float = 0.1
    canonical_shape: tuple[int, int, int] = CANONICAL_SHAPE


@dataclass(frozen=True)
class SplitSection:
    k: int = 5


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    pad_to: tuple[int, int] = (800, 800)
    crop_to: tuple[int, int] = (768, 448)
    hflip_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.5, 2.0)
    slice_stride: int = 1
    num_workers: int = 0
    deterministic: bool = True


@dataclass(frozen=True)
class EvalSection:
    pads_um: tuple[float, ...] = PADS_UM
    thresholds: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    batch_size: int = 8


@dataclass(frozen=True)
class RunConfig:
    data: DataSection
    run_dir: Path
    seed: int = 0
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    split: SplitSection = field(default_factory=SplitSection)
    unet: UNetConfig = field(default_factory=UNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self, loss_kind: Optional[str] = None) -> TrainConfig:
        loss = self.loss if loss_kind is None else LossConfig(**{**asdict(self.loss), "kind": loss_kind})
        return TrainConfig(seed=self.seed, loss=loss, unet=self.unet, **asdict(self.train))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @property
    def preprocessed_dir(self) -> Path:
        return self.run_dir / "preprocessed"

    def checkpoint_dir(self, loss_kind: str) -> Path:
        return self.run_dir / "checkpoints" / loss_kind


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _section(cls, raw: Any, name: str, **extra):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    values = {**raw, **extra}
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if isinstance(v, list):
            values[f.name] = tuple(v)
        elif isinstance(v, str) and f.type == "float":
            # YAML 1.1 reads "1e-7" as a string
            try:
                values[f.name] = float(v)
            except ValueError:
                raise ConfigError(f"{name}.{f.name}: expected a number, got {v!r}") from None
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def from_dict(raw: dict, base_dir: Union[str, Path] = ".") -> RunConfig:
    base = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    data_raw = dict(raw.get("data") or {})
    if "manifest" not in data_raw:
        raise ConfigError("data.manifest is required")
    if "run_dir" not in raw:
        raise ConfigError("run_dir is required")
    data_raw["manifest"] = base / data_raw["manifest"]
    if data_raw.get("data_root") is not None:
        data_raw["data_root"] = base / data_raw["data_root"]
    data_raw["z_flip"] = {str(k): bool(v) for k, v in (data_raw.get("z_flip") or {}).items()}
    cfg = RunConfig(
        data=_section(DataSection, data_raw, "data"),
        run_dir=base / raw["run_dir"],
        seed=int(raw.get("seed", 0)),
        preprocess=_section(PreprocessSection, raw.get("preprocess"), "preprocess"),
        split=_section(SplitSection, raw.get("split"), "split"),
        unet=_section(UNetConfig, raw.get("unet"), "unet"),
        loss=_section(LossConfig, raw.get("loss"), "loss"),
        train=_section(TrainSection, raw.get("train"), "train"),
        eval=_section(EvalSection, raw.get("eval"), "eval"),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    pads = cfg.eval.pads_um
    if not pads:
        raise ConfigError("eval.pads_um must not be empty")
    if any(b <= a for a, b in zip(pads, pads[1:])) or pads[0] <= 0:
        raise ConfigError("eval.pads_um must be positive and strictly increasing")
    if len(cfg.preprocess.canonical_shape) != 3:
        raise ConfigError("preprocess.canonical_shape needs three entries (Z, Y, X)")
    z, y, x = cfg.preprocess.canonical_shape
    if tuple(cfg.train.crop_to) != (z, x) or y != x:
        raise ConfigError(
            f"train.crop_to {tuple(cfg.train.crop_to)} must equal the canonical slice size ({z}, {x}) "
            "and the canonical crop must be square in XY"
        )
    if cfg.split.k < 2:
        raise ConfigError("split.k must be at least 2")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    d = cfg.unet.divisor
    if z % d or x % d:
        raise ConfigError(f"canonical slice size {z}x{x} is not divisible by {d}")


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw or {}, path.parent)


def check_paths(cfg: RunConfig) -> None:
    if not cfg.data.manifest.is_file():
        raise ConfigError(f"manifest not found: {cfg.data.manifest}")
    if cfg.data.data_root is not None and not cfg.data.data_root.is_dir():
        raise ConfigError(f"data_root not found: {cfg.data.data_root}")
