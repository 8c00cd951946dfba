"""Scaled-down 3D encoder-decoder segmentation net and the dual-subnet pair.

Instance-style normalization keeps forwards batch-size independent, and
dropout only lives in the deepest stage, so inference-mode outputs are
deterministic functions of the input.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import InvalidParameterError, ShapeError


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 8
    depth: int = 2
    crop_size: tuple = (16, 16, 16)
    dropout: float = 0.2

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidParameterError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "crop_size", tuple(int(s) for s in self.crop_size))
        factor = 2 ** self.depth
        for s in self.crop_size:
            if s % factor != 0:
                raise InvalidParameterError(
                    f"crop size {self.crop_size} not divisible by 2^depth = {factor}"
                )


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class SegNet(nn.Module):
    """U-Net-style encoder-decoder; forward returns per-voxel probabilities."""

    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        widths = [w * (2 ** i) for i in range(config.depth + 1)]

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = config.in_channels
        for i in range(config.depth):
            self.enc_blocks.append(_conv_block(cin, widths[i]))
            self.downs.append(nn.Conv3d(widths[i], widths[i + 1], 2, stride=2))
            cin = widths[i + 1]
        self.bottleneck = _conv_block(widths[-1], widths[-1])
        self.drop = nn.Dropout3d(config.dropout)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.ups.append(nn.ConvTranspose3d(widths[i + 1], widths[i], 2, stride=2))
            self.dec_blocks.append(_conv_block(widths[i] * 2, widths[i]))
        self.head = nn.Conv3d(widths[0], config.num_classes, 1)

    def forward(self, x):
        if x.dim() != 5:
            raise ShapeError(f"expected (B, C, W, H, L) input, got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.config.crop_size:
            raise ShapeError(
                f"spatial dims {tuple(x.shape[2:])} != crop size {self.config.crop_size}"
            )
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        x = self.drop(self.bottleneck(x))
        for up, block, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        return torch.softmax(self.head(x), dim=1)


@dataclass
class DualSubnets:
    subnet_1: SegNet
    subnet_2: SegNet
    config: SegNetConfig
    seed_1: int
    seed_2: int


def build_dual(config, seed_1, seed_2):
    """Two identically shaped nets with distinct, seed-deterministic inits."""
    if seed_1 == seed_2:
        raise InvalidParameterError(f"subnet seeds must differ, both are {seed_1}")
    nets = []
    for seed in (seed_1, seed_2):
        torch.manual_seed(seed)
        nets.append(SegNet(config))
    return DualSubnets(subnet_1=nets[0], subnet_2=nets[1], config=config,
                       seed_1=seed_1, seed_2=seed_2)
