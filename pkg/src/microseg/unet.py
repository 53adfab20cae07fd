"""Plain U-Net baseline: double-conv stages, max-pool downsampling, transposed-conv upsampling."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .swin import ShapeError


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
        )


class UNet(nn.Module):
    """Full-resolution stem plus ``len(widths)`` encoder stages, each halving the spatial size."""

    def __init__(self, in_chans: int = 3, num_classes: int = 1, widths: Sequence[int] = (64, 128, 256, 512, 1024)):
        super().__init__()
        widths = [widths[0] // 2] + list(widths)
        self.size_multiple = 2 ** (len(widths) - 1)
        self.down = nn.ModuleList()
        prev = in_chans
        for w in widths:
            self.down.append(DoubleConv(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(prev, w, 2, stride=2))
            self.dec.append(DoubleConv(2 * w, w))
            prev = w
        self.out = nn.Conv2d(prev, num_classes, 1)

    def forward(self, image: Tensor) -> Tensor:
        H, W = image.shape[-2:]
        if H % self.size_multiple or W % self.size_multiple:
            raise ShapeError(f"U-Net input {H}x{W} must be a multiple of {self.size_multiple}")
        skips = []
        x = image
        for i, stage in enumerate(self.down):
            if i:
                x = self.pool(x)
            x = stage(x)
            skips.append(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.out(x)
