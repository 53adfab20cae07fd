"""2-D UNETR: a ViT encoder with hidden states tapped into a convolutional decoder."""
from __future__ import annotations

from typing import Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .swin import ShapeError, init_weights


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        B, N, C = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ResBlock(nn.Module):
    """Two 3x3 conv/BN layers with a (projected) identity path."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm1 = nn.BatchNorm2d(cout)
        self.act1 = nn.LeakyReLU(0.01)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.BatchNorm2d(cout)
        self.proj = None
        if cin != cout:
            self.proj = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))
        self.act2 = nn.LeakyReLU(0.01)

    def forward(self, x):
        res = x if self.proj is None else self.proj(x)
        y = self.norm2(self.conv2(self.act1(self.norm1(self.conv1(x)))))
        return self.act2(y + res)


def _up(cin, cout):
    return nn.ConvTranspose2d(cin, cout, kernel_size=2, stride=2, bias=False)


class ProjectUp(nn.Module):
    """Hidden-state skip path: an initial 2x transposed conv, then ``n`` (deconv + ResBlock) units."""

    def __init__(self, cin: int, cout: int, n: int):
        super().__init__()
        self.init = _up(cin, cout)
        self.blocks = nn.Sequential(*[nn.Sequential(_up(cout, cout), ResBlock(cout, cout)) for _ in range(n)])

    def forward(self, x):
        return self.blocks(self.init(x))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = _up(cin, cout)
        self.block = ResBlock(2 * cout, cout)

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x), skip], dim=1))


class UNETR2D(nn.Module):
    def __init__(self, in_chans: int = 3, num_classes: int = 1, img_size: int = 224, patch: int = 16,
                 dim: int = 768, depth: int = 12, heads: int = 12, taps: Sequence[int] = (3, 6, 9, 12),
                 channels: Tuple[int, int, int, int] = (512, 256, 128, 64)):
        super().__init__()
        if len(taps) != 4 or max(taps) > depth:
            raise ValueError(f"need four tap layers within depth {depth}, got {taps}")
        if patch != 16:
            raise ValueError("the decoder upsamples by 16; patch must be 16")
        self.patch = patch
        self.taps = tuple(taps)
        self.size_multiple = patch
        grid = img_size // patch
        self.patch_embed = nn.Conv2d(in_chans, dim, patch, stride=patch)
        self.pos_embed = nn.Parameter(torch.zeros(1, dim, grid, grid))
        self.layers = nn.ModuleList(TransformerLayer(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        c8, c4, c2, c1 = channels
        self.encoder1 = ResBlock(in_chans, c1)
        self.encoder2 = ProjectUp(dim, c2, 2)
        self.encoder3 = ProjectUp(dim, c4, 1)
        self.encoder4 = ProjectUp(dim, c8, 0)
        self.decoder5 = UpBlock(dim, c8)
        self.decoder4 = UpBlock(c8, c4)
        self.decoder3 = UpBlock(c4, c2)
        self.decoder2 = UpBlock(c2, c1)
        self.out = nn.Conv2d(c1, num_classes, 1)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, image: Tensor) -> Tensor:
        H, W = image.shape[-2:]
        if H % self.patch or W % self.patch:
            raise ShapeError(f"UNETR input {H}x{W} must be a multiple of {self.patch}")
        x = self.patch_embed(image)
        gh, gw = x.shape[-2:]
        pos = self.pos_embed
        if pos.shape[-2:] != (gh, gw):
            pos = F.interpolate(pos, size=(gh, gw), mode="bilinear", align_corners=False)
        x = (x + pos).flatten(2).transpose(1, 2)
        hidden = []
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x)
            if i in self.taps:
                hidden.append(x)
        hidden[-1] = self.norm(hidden[-1])
        z3, z6, z9, z12 = (h.transpose(1, 2).reshape(h.shape[0], -1, gh, gw) for h in hidden)
        enc1 = self.encoder1(image)
        enc2 = self.encoder2(z3)
        enc3 = self.encoder3(z6)
        enc4 = self.encoder4(z9)
        d = self.decoder5(z12, enc4)
        d = self.decoder4(d, enc3)
        d = self.decoder3(d, enc2)
        d = self.decoder2(d, enc1)
        return self.out(d)
