"""Named model variants: Swin-UPerNet and its modifications plus U-Net / UNETR-2D baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch
from torch import Tensor, nn

from .swin import SwinEncoder, SwinEncoderConfig, stage_plan
from .unet import UNet
from .unetr import UNETR2D
from .upernet import DecoderConfig, UPerNetDecoder

VARIANTS = ("UNet", "UNETR2D", "SwinS", "SwinB", "SwinS_PS2", "SwinS_Conv", "SwinS_TB", "SwinS_TB_Skip",
            "SwinS_Pyramid")
SWIN_VARIANTS = VARIANTS[2:]
ABLATION_VARIANTS = ("SwinS", "SwinS_PS2", "SwinS_Conv", "SwinS_Pyramid", "SwinS_TB", "SwinS_TB_Skip")
SCALES = ("paper", "tiny")


@dataclass(frozen=True)
class VariantSpec:
    name: str
    patch_size: int = 4
    deconv_head: bool = False
    input_skip: bool = False
    extra_stages: int = 0
    scale: str = "paper"

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValueError(f"unknown variant {self.name!r}; valid names: {', '.join(VARIANTS)}")
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}; valid: {SCALES}")


# one row per Swin-UPerNet modification (plus Swin-B and the baselines)
_FLAGS: Dict[str, dict] = {
    "UNet": dict(patch_size=1),
    "UNETR2D": dict(patch_size=16),
    "SwinS": dict(patch_size=4),
    "SwinB": dict(patch_size=4),
    "SwinS_PS2": dict(patch_size=2),
    "SwinS_Conv": dict(patch_size=4, deconv_head=True, input_skip=True),
    "SwinS_Pyramid": dict(patch_size=1, input_skip=True, extra_stages=2),
    "SwinS_TB": dict(patch_size=2, deconv_head=True, extra_stages=1),
    "SwinS_TB_Skip": dict(patch_size=2, deconv_head=True, input_skip=True, extra_stages=1),
}


def variant_spec(name: str, scale: str = "paper") -> VariantSpec:
    if name not in _FLAGS:
        raise ValueError(f"unknown variant {name!r}; valid names: {', '.join(VARIANTS)}")
    return VariantSpec(name, scale=scale, **_FLAGS[name])


def encoder_config(spec: VariantSpec, in_chans: int = 3) -> SwinEncoderConfig:
    tiny = spec.scale == "tiny"
    if spec.name == "SwinB":
        dims, heads, depths, window = (128, 256, 512, 1024), (4, 8, 16, 32), (2, 2, 18, 2), 12
    elif tiny:
        dims, heads, depths, window = (16, 32, 64, 128), (1, 2, 4, 8), (1, 1, 2, 1), 2
    else:
        dims, heads, depths, window = (96, 192, 384, 768), (3, 6, 12, 24), (2, 2, 18, 2), 7
    if spec.name == "SwinB" and tiny:
        dims, heads, depths, window = (24, 48, 96, 192), (1, 2, 4, 8), (1, 1, 2, 1), 2
    dims, heads, depths = list(dims), list(heads), list(depths)
    if spec.extra_stages == 1:
        # same-resolution stage ahead of the standard four; see README "Extra-stage layout"
        dims, heads, depths = [dims[0]] + dims, [heads[0]] + heads, [2] + depths
    elif spec.extra_stages == 2:
        d0 = dims[0]
        dims = [d0 // 4, d0 // 2] + dims
        heads = ([1, 1] if tiny else [1, 2]) + heads
        depths = [2, 2] + depths
    return SwinEncoderConfig(
        patch_size=spec.patch_size,
        embed_dim=dims[0],
        stages=stage_plan(depths, heads, dims, window),
        mlp_ratio=4.0,
        in_chans=in_chans,
        drop_path_rate=0.0 if tiny else 0.2,
    )


def decoder_config(spec: VariantSpec, num_classes: int = 1, in_chans: int = 3) -> DecoderConfig:
    tiny = spec.scale == "tiny"
    if spec.deconv_head:
        head = "deconv"
    elif spec.name == "SwinS_Pyramid":
        head = "pyramid_native"
    else:
        head = "bilinear"
    return DecoderConfig(
        fpn_channels=16 if tiny else 512,
        ppm_scales=(1, 2) if tiny else (1, 2, 3, 6),
        head=head,
        input_skip=spec.input_skip,
        num_classes=num_classes,
        head_channels=8 if tiny else 128,
        in_chans=in_chans,
    )


class SwinUPerNet(nn.Module):
    def __init__(self, enc_cfg: SwinEncoderConfig, dec_cfg: DecoderConfig):
        super().__init__()
        self.encoder = SwinEncoder(enc_cfg)
        self.decoder = UPerNetDecoder(self.encoder.dims, self.encoder.strides, dec_cfg)
        self.size_multiple = enc_cfg.size_multiple

    def forward(self, image: Tensor) -> Tensor:
        return self.decoder(self.encoder(image), image)


def build(spec, num_classes: int = 1, in_chans: int = 3, seed: Optional[int] = None) -> nn.Module:
    """Construct a model for a :class:`VariantSpec` (or variant name, paper scale)."""
    if isinstance(spec, str):
        spec = variant_spec(spec)
    if seed is not None:
        torch.manual_seed(seed)
    tiny = spec.scale == "tiny"
    if spec.name == "UNet":
        model = UNet(in_chans, num_classes, (8, 16, 32, 64, 128) if tiny else (64, 128, 256, 512, 1024))
    elif spec.name == "UNETR2D":
        if tiny:
            model = UNETR2D(in_chans, num_classes, dim=32, depth=4, heads=2, taps=(1, 2, 3, 4),
                            channels=(32, 16, 8, 8))
        else:
            model = UNETR2D(in_chans, num_classes, channels=(512, 256, 256, 128))
    else:
        model = SwinUPerNet(encoder_config(spec, in_chans), decoder_config(spec, num_classes, in_chans))
    model.spec = spec
    model.num_classes = num_classes
    model.in_chans = in_chans
    return model
