"""Segmentation losses on sigmoid probabilities.

All losses take probabilities in (0, 1) and binary targets of the same shape
and return a scalar tensor. Probabilities are clamped to
``[epsilon, 1 - epsilon]`` before any logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

LOSS_KINDS = ("bce", "focal", "jaccard", "bce_log_jaccard")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "bce_log_jaccard"
    alpha: float = 0.25
    gamma: float = 2.0
    epsilon: float = 1e-7
    # "batch": one global Jaccard ratio per batch; "image": mean of per-image ratios
    jaccard_reduction: str = "batch"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.jaccard_reduction not in ("batch", "image"):
            raise ValueError("jaccard_reduction must be 'batch' or 'image'")


def _check(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(p.shape)} vs targets {tuple(y.shape)}")


def bce(p: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-7) -> torch.Tensor:
    _check(p, y)
    p = p.clamp(epsilon, 1 - epsilon)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def focal(
    p: torch.Tensor, y: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0, epsilon: float = 1e-7
) -> torch.Tensor:
    _check(p, y)
    p = p.clamp(epsilon, 1 - epsilon)
    y = y.to(p.dtype)
    p_t = y * p + (1 - y) * (1 - p)
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    return -(alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def soft_jaccard(p: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-7, reduction: str = "batch") -> torch.Tensor:
    """Smoothed soft Jaccard index; 1 when both inputs are empty."""
    _check(p, y)
    y = y.to(p.dtype)
    if reduction == "image" and p.ndim > 1:
        dims = tuple(range(1, p.ndim))
        inter = (p * y).sum(dims)
        union = p.sum(dims) + y.sum(dims) - inter
        return ((inter + epsilon) / (union + epsilon)).mean()
    inter = (p * y).sum()
    return (inter + epsilon) / (p.sum() + y.sum() - inter + epsilon)


def jaccard_loss(p: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-7, reduction: str = "batch") -> torch.Tensor:
    return 1 - soft_jaccard(p, y, epsilon, reduction)


def combined(p: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-7, reduction: str = "batch") -> torch.Tensor:
    """BCE minus the log of the soft Jaccard index (clamped at epsilon)."""
    j = soft_jaccard(p, y, epsilon, reduction)
    return bce(p, y, epsilon) - torch.log(j.clamp_min(epsilon))


def build_loss(config: LossConfig) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    eps = config.epsilon
    if config.kind == "bce":
        return lambda p, y: bce(p, y, eps)
    if config.kind == "focal":
        return lambda p, y: focal(p, y, config.alpha, config.gamma, eps)
    if config.kind == "jaccard":
        return lambda p, y: jaccard_loss(p, y, eps, config.jaccard_reduction)
    return lambda p, y: combined(p, y, eps, config.jaccard_reduction)
