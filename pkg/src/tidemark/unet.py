"""2D U-Net with bilinear decoder.

State-dict keys follow a fixed scheme so checkpoints stay readable::

    encoder.{L}.block.{B}.conv.weight      L = level, B in {0, 1}
    encoder.{L}.block.{B}.bn.{weight,bias,running_mean,running_var,...}
    decoder.{L}.reduce.{weight,bias}       3x3 conv halving channels after upsampling
    decoder.{L}.block.{B}.conv / .bn
    head.{weight,bias}                     1x1 conv to one channel

Decoder ``L`` brings features back up to encoder level ``L``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


class InvalidInputShapeError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    base_width: int = 24
    depth: int = 6  # resolution levels including the bottleneck
    in_channels: int = 1
    out_channels: int = 1
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        if self.base_width < 1 or self.depth < 1:
            raise ValueError("base_width and depth must be positive")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.upsample_mode != "bilinear":
            raise ValueError("only bilinear upsampling is supported")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**level for level in range(self.depth)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvUnit(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)), inplace=True)


class DoubleBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = nn.Sequential(ConvUnit(cin, cout), ConvUnit(cout, cout))

    def forward(self, x):
        return self.block(x)


class UpLevel(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.reduce = nn.Conv2d(cin, cout, 3, padding=1)
        self.block = nn.Sequential(ConvUnit(2 * cout, cout), ConvUnit(cout, cout))

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = self.reduce(x)
        return self.block(torch.cat([skip, x], dim=1))


class UNet(nn.Module):
    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        w = config.widths
        self.encoder = nn.ModuleList(
            DoubleBlock(config.in_channels if i == 0 else w[i - 1], w[i]) for i in range(config.depth)
        )
        self.decoder = nn.ModuleList(UpLevel(w[i + 1], w[i]) for i in range(config.depth - 1))
        self.head = nn.Conv2d(w[0], config.out_channels, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        d = self.config.divisor
        if h % d or w % d:
            raise InvalidInputShapeError(f"input {h}x{w} is not divisible by {d} (depth {self.config.depth})")
        skips = []
        for level, enc in enumerate(self.encoder):
            x = enc(x)
            if level < self.config.depth - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for level in reversed(range(self.config.depth - 1)):
            x = self.decoder[level](x, skips[level])
        return torch.sigmoid(self.head(x))


def build(config: UNetConfig = UNetConfig()) -> UNet:
    return UNet(config)


def forward(model: UNet, batch: torch.Tensor) -> torch.Tensor:
    """Probabilities for a (B, 1, H, W) batch of [0, 1] images."""
    return model(batch)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def analytic_param_count(config: UNetConfig) -> int:
    """Closed-form parameter count for :class:`UNet` (used as a cross-check)."""
    w = config.widths

    def unit(cin, cout):
        return 9 * cin * cout + 2 * cout

    total = 0
    for i in range(config.depth):
        cin = config.in_channels if i == 0 else w[i - 1]
        total += unit(cin, w[i]) + unit(w[i], w[i])
    for i in range(config.depth - 1):
        total += 9 * w[i + 1] * w[i] + w[i]
        total += unit(2 * w[i], w[i]) + unit(w[i], w[i])
    total += w[0] * config.out_channels + config.out_channels
    return total
