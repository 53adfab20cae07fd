"""UPerNet decoder with bilinear, deconvolution and pyramid-native output heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .swin import FeaturePyramid, ShapeError

HEADS = ("bilinear", "deconv", "pyramid_native")


@dataclass
class DecoderConfig:
    fpn_channels: int = 512
    ppm_scales: Tuple[int, ...] = (1, 2, 3, 6)
    head: str = "bilinear"
    input_skip: bool = False
    num_classes: int = 1
    head_channels: int = 128
    in_chans: int = 3

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        self.ppm_scales = tuple(self.ppm_scales)

    def check_pyramid(self, finest_stride: int):
        if self.head == "pyramid_native" and finest_stride != 1:
            raise ValueError(f"pyramid_native head needs a stride-1 finest level, got {finest_stride}")
        if self.head == "deconv" and finest_stride not in (2, 4):
            raise ValueError(f"deconv head needs finest stride 2 or 4, got {finest_stride}")


class Resample(nn.Module):
    """Resize to a target size. ``mode`` is recorded for graph inspection."""

    def __init__(self, mode: str = "nearest"):
        super().__init__()
        if mode not in ("nearest", "bilinear"):
            raise ValueError(mode)
        self.mode = mode

    def forward(self, x: Tensor, size) -> Tensor:
        size = tuple(size)
        if tuple(x.shape[-2:]) == size:
            return x
        if self.mode == "bilinear":
            return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return F.interpolate(x, size=size, mode="nearest")


class ConvBlock(nn.Sequential):
    """3x3 conv (padding 1) + BatchNorm + ReLU; ``kernel=1`` gives the lateral variant."""

    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
        )


class PPM(nn.Module):
    def __init__(self, cin: int, scales: Sequence[int], channels: int):
        super().__init__()
        self.scales = tuple(scales)
        self.branches = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(s), ConvBlock(cin, channels, kernel=1)) for s in self.scales
        )
        self.up = Resample("nearest")
        self.bottleneck = ConvBlock(cin + len(self.scales) * channels, channels)

    def pooled(self, x: Tensor) -> List[Tensor]:
        """The adaptive-average-pooled maps before their 1x1 convs."""
        return [branch[0](x) for branch in self.branches]

    def forward(self, x: Tensor) -> Tensor:
        size = x.shape[-2:]
        too_big = [s for s in self.scales if s > min(size)]
        if too_big:
            raise ShapeError(f"PPM scales {too_big} exceed the {tuple(size)} input")
        outs = [x] + [self.up(branch(x), size) for branch in self.branches]
        return self.bottleneck(torch.cat(outs, dim=1))


class FPNFuse(nn.Module):
    """Laterals, nearest-neighbour top-down pathway, per-level 3x3 blocks and final fusion.

    The coarsest level passes through the PPM in place of its lateral.
    """

    def __init__(self, in_dims: Sequence[int], channels: int, ppm_scales: Sequence[int]):
        super().__init__()
        self.ppm = PPM(in_dims[-1], ppm_scales, channels)
        self.laterals = nn.ModuleList(ConvBlock(c, channels, kernel=1) for c in in_dims[:-1])
        self.fpn_convs = nn.ModuleList(ConvBlock(channels, channels) for _ in in_dims[:-1])
        self.up = Resample("nearest")
        self.fuse = ConvBlock(len(in_dims) * channels, channels)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        feats = pyramid.levels
        if len(feats) != len(self.laterals) + 1:
            raise ShapeError(f"decoder built for {len(self.laterals) + 1} levels, got {len(feats)}")
        for fine, coarse in zip(feats, feats[1:]):
            if fine.shape[-1] != 2 * coarse.shape[-1] or fine.shape[-2] != 2 * coarse.shape[-2]:
                raise ShapeError(f"level sizes {tuple(fine.shape[-2:])} -> {tuple(coarse.shape[-2:])} are not a 2x step")
        lat = [conv(f) for conv, f in zip(self.laterals, feats[:-1])] + [self.ppm(feats[-1])]
        for i in range(len(lat) - 1, 0, -1):
            lat[i - 1] = lat[i - 1] + self.up(lat[i], lat[i - 1].shape[-2:])
        outs = [conv(x) for conv, x in zip(self.fpn_convs, lat[:-1])] + [lat[-1]]
        size = outs[0].shape[-2:]
        outs = [outs[0]] + [self.up(o, size) for o in outs[1:]]
        return self.fuse(torch.cat(outs, dim=1))


class DeconvUnit(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = ConvBlock(cin, cout)
        self.deconv = nn.ConvTranspose2d(cout, cout, kernel_size=2, stride=2)

    def forward(self, x):
        return self.deconv(self.block(x))


class DeconvHead(nn.Module):
    """log2(factor) units of ConvBlock + stride-2 transposed conv."""

    def __init__(self, cin: int, channels: int, factor: int):
        super().__init__()
        if factor not in (2, 4):
            raise ValueError(f"deconv head supports factors 2 and 4, got {factor}")
        n = factor.bit_length() - 1
        self.factor = factor
        self.units = nn.Sequential(*[DeconvUnit(cin if i == 0 else channels, channels) for i in range(n)])

    def forward(self, x):
        return self.units(x)


class InputSkip(nn.Module):
    """image -> ConvBlock, add to the decoder map, then a 3x3 conv."""

    def __init__(self, in_chans: int, channels: int):
        super().__init__()
        self.image_block = ConvBlock(in_chans, channels)
        self.merge = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, image: Tensor, decoder_map: Tensor) -> Tensor:
        if image.shape[-2:] != decoder_map.shape[-2:]:
            raise ShapeError(
                f"skip merge needs matching sizes, image {tuple(image.shape[-2:])} vs map {tuple(decoder_map.shape[-2:])}"
            )
        return self.merge(self.image_block(image) + decoder_map)


class UPerNetDecoder(nn.Module):
    def __init__(self, in_dims: Sequence[int], strides: Sequence[int], cfg: DecoderConfig):
        super().__init__()
        cfg.check_pyramid(strides[0])
        self.cfg = cfg
        self.finest_stride = strides[0]
        C = cfg.fpn_channels
        self.fpn = FPNFuse(in_dims, C, cfg.ppm_scales)
        self.upsample: Optional[Resample] = None
        self.deconv: Optional[DeconvHead] = None
        width = C
        if cfg.head == "bilinear":
            self.upsample = Resample("bilinear")
        elif cfg.head == "deconv":
            self.deconv = DeconvHead(C, cfg.head_channels, self.finest_stride)
            width = cfg.head_channels
        self.skip = InputSkip(cfg.in_chans, width) if cfg.input_skip else None
        self.classifier = nn.Conv2d(width, cfg.num_classes, 1)

    def forward(self, pyramid: FeaturePyramid, image: Tensor) -> Tensor:
        out_size = image.shape[-2:]
        x = self.fpn(pyramid)
        if self.cfg.head == "bilinear":
            if self.skip is None:
                return self.upsample(self.classifier(x), out_size)
            x = self.upsample(x, out_size)
        elif self.cfg.head == "deconv":
            x = self.deconv(x)
        if self.skip is not None:
            x = self.skip(image, x)
        logits = self.classifier(x)
        if logits.shape[-2:] != out_size:
            raise ShapeError(f"decoder produced {tuple(logits.shape[-2:])}, expected {tuple(out_size)}")
        return logits


def decode(pyramid: FeaturePyramid, image: Tensor, decoder: UPerNetDecoder) -> Tensor:
    return decoder(pyramid, image)
