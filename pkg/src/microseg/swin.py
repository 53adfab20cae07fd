"""Hierarchical Swin Transformer encoder.

Tokens are kept channels-last (B, H, W, C) inside the encoder; pyramid levels
are emitted channels-first (B, C, H, W) for the convolutional decoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

MASK_VALUE = -100.0


class ShapeError(ValueError):
    """Raised when a tensor violates a divisibility or shape precondition."""


@dataclass
class SwinStageConfig:
    depth: int
    heads: int
    dim: int
    window: int

    def __post_init__(self):
        if self.depth < 1 or self.heads < 1 or self.dim < 1 or self.window < 1:
            raise ValueError(f"stage fields must be positive: {self}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


@dataclass
class SwinEncoderConfig:
    patch_size: int
    embed_dim: int
    stages: List[SwinStageConfig]
    mlp_ratio: float = 4.0
    in_chans: int = 3
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if self.patch_size not in (1, 2, 4):
            raise ValueError(f"patch_size must be 1, 2 or 4, got {self.patch_size}")
        if not self.stages:
            raise ValueError("encoder needs at least one stage")
        if self.stages[0].dim != self.embed_dim:
            raise ValueError("first stage dim must equal embed_dim")
        for prev, nxt in zip(self.stages, self.stages[1:]):
            # equal dims: an extra stage at the same resolution (no merge)
            if nxt.dim not in (prev.dim, 2 * prev.dim):
                raise ValueError(f"stage dims must double (or repeat): {prev.dim} -> {nxt.dim}")

    @property
    def merges(self) -> List[bool]:
        """Whether a patch merge precedes each stage."""
        return [False] + [n.dim == 2 * p.dim for p, n in zip(self.stages, self.stages[1:])]

    @property
    def level_strides(self) -> List[int]:
        strides, s = [], self.patch_size
        for merged in self.merges:
            s *= 2 if merged else 1
            strides.append(s)
        return strides

    @property
    def tapped(self) -> List[bool]:
        """A stage is emitted as a pyramid level unless the next stage keeps its resolution."""
        merges = self.merges
        return [i == len(self.stages) - 1 or merges[i + 1] for i in range(len(self.stages))]

    @property
    def size_multiple(self) -> int:
        """Side multiple needed so every stage sees whole windows and even merges."""
        return max(s.window for s in self.stages) * self.level_strides[-1]


def stage_plan(depths: Sequence[int], heads: Sequence[int], dims: Sequence[int], window: int):
    return [SwinStageConfig(d, h, c, window) for d, h, c in zip(depths, heads, dims)]


@dataclass
class TokenGrid:
    """Channels-last activations plus the pixel stride of one token."""

    tokens: Tensor
    stride: int

    @property
    def height(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    @property
    def channels(self) -> int:
        return self.tokens.shape[3]


@dataclass
class FeaturePyramid:
    levels: List[Tensor]
    strides: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ValueError("one stride per level required")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ValueError(f"pyramid strides must double between levels, got {self.strides}")

    def __len__(self):
        return len(self.levels)

    @property
    def dims(self) -> List[int]:
        return [lvl.shape[1] for lvl in self.levels]


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * nW, window*window, C), windows row-major, tokens row-major."""
    B, H, W, C = x.shape
    if H % window or W % window:
        raise ShapeError(f"grid {H}x{W} is not divisible by window {window}")
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: Tensor, height: int, width: int, window: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if height % window or width % window:
        raise ShapeError(f"grid {height}x{width} is not divisible by window {window}")
    n_win = (height // window) * (width // window)
    if windows.dim() != 3 or windows.shape[1] != window * window or windows.shape[0] % n_win:
        raise ShapeError(
            f"windows of shape {tuple(windows.shape)} do not tile a {height}x{width} grid with window {window}"
        )
    B = windows.shape[0] // n_win
    C = windows.shape[2]
    x = windows.view(B, height // window, width // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, height, width, C)


def relative_position_index(window: int) -> Tensor:
    """(M², M²) index into a (2M-1)² table for every token pair in a window."""
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class RelativePositionBias(nn.Module):
    def __init__(self, window: int, heads: int):
        super().__init__()
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.heads = heads
        self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("index", relative_position_index(window), persistent=False)

    def forward(self) -> Tensor:
        n = self.window * self.window
        bias = self.table[self.index.reshape(-1)].view(n, n, self.heads)
        return bias.permute(2, 0, 1).contiguous()


class WindowAttention(nn.Module):
    """Multi-head self-attention inside each window with relative position bias."""

    def __init__(self, dim: int, heads: int, window: int, qkv_bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = RelativePositionBias(window, heads)

    def attention_probs(self, windows: Tensor, mask: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Return (softmax weights (nW*B, heads, N, N), values (nW*B, heads, N, d))."""
        Bw, N, C = windows.shape
        if C != self.dim:
            raise ShapeError(f"expected {self.dim} channels, got {C}")
        qkv = self.qkv(windows).reshape(Bw, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.rel_bias().unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.heads, N, N) + mask[None, :, None]
            attn = attn.view(Bw, self.heads, N, N)
        return attn.softmax(dim=-1), v

    def forward(self, windows: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        attn, v = self.attention_probs(windows, mask)
        Bw, N, C = windows.shape
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


def shifted_window_mask(height: int, width: int, window: int, shift: int, device=None) -> Tensor:
    """Additive (nW, M², M²) mask: MASK_VALUE between tokens from different shifted regions."""
    region = torch.zeros(1, height, width, 1, device=device)
    cnt = 0
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in bounds:
        for ws in bounds:
            region[:, hs, ws, :] = cnt
            cnt += 1
    ids = window_partition(region, window).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, MASK_VALUE)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        noise = x.new_empty((x.shape[0],) + (1,) * (x.dim() - 1)).bernoulli_(keep)
        return x * noise / keep


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm block: x + W-MSA(LN(x)), then + MLP(LN(.)).

    Grids whose sides are not a multiple of the window are zero-padded on the
    right/bottom before partitioning and cropped afterwards.
    """

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: float = 4.0,
                 drop_path: float = 0.0):
        super().__init__()
        self.dim = dim
        self.window = window
        self.shift = window // 2 if shifted else 0
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.attn = WindowAttention(dim, heads, window)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def _attend(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        M = self.window
        pad_b, pad_r = (-H) % M, (-W) % M
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        Hp, Wp = H + pad_b, W + pad_r
        mask = None
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
            mask = shifted_window_mask(Hp, Wp, M, self.shift, device=x.device).to(x.dtype)
        out = window_reverse(self.attn(window_partition(x, M), mask), Hp, Wp, M)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift, self.shift), dims=(1, 2))
        return out[:, :H, :W, :]

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.drop_path(self._attend(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchEmbed(nn.Module):
    """Non-overlapping PxP linear projection followed by LayerNorm."""

    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim, eps=1e-5)

    def forward(self, image: Tensor) -> Tensor:
        H, W = image.shape[-2:]
        for axis, n in (("height", H), ("width", W)):
            if n % self.patch_size:
                raise ShapeError(f"image {axis} {n} is not divisible by patch size {self.patch_size}")
        x = self.proj(image).permute(0, 2, 3, 1)
        return self.norm(x)


class PatchMerging(nn.Module):
    """Concatenate 2x2 neighbourhoods (4C), LayerNorm, project to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim, eps=1e-5)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[1:3]
        for axis, n in (("height", H), ("width", W)):
            if n % 2:
                raise ShapeError(f"cannot merge patches: grid {axis} {n} is odd")
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        return self.reduction(self.norm(torch.cat([x0, x1, x2, x3], dim=-1)))


class SwinStage(nn.Module):
    def __init__(self, cfg: SwinStageConfig, mlp_ratio: float, drop_paths: Sequence[float],
                 merge_from: Optional[int] = None):
        super().__init__()
        self.downsample = PatchMerging(merge_from) if merge_from is not None else None
        self.blocks = nn.ModuleList(
            SwinBlock(cfg.dim, cfg.heads, cfg.window, shifted=bool(i % 2), mlp_ratio=mlp_ratio,
                      drop_path=drop_paths[i])
            for i in range(cfg.depth)
        )

    def forward(self, x: Tensor) -> Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(nn.Module):
    def __init__(self, cfg: SwinEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_chans, cfg.embed_dim)
        total = sum(s.depth for s in cfg.stages)
        rates = [cfg.drop_path_rate * i / max(total - 1, 1) for i in range(total)]
        self.stages = nn.ModuleList()
        self.out_norms = nn.ModuleDict()
        start = 0
        for i, (stage, merged) in enumerate(zip(cfg.stages, cfg.merges)):
            merge_from = cfg.stages[i - 1].dim if merged else None
            self.stages.append(SwinStage(stage, cfg.mlp_ratio, rates[start:start + stage.depth], merge_from))
            start += stage.depth
            if cfg.tapped[i]:
                self.out_norms[str(i)] = nn.LayerNorm(stage.dim, eps=1e-5)
        self.apply(init_weights)

    @property
    def strides(self) -> List[int]:
        return [s for s, t in zip(self.cfg.level_strides, self.cfg.tapped) if t]

    @property
    def dims(self) -> List[int]:
        return [s.dim for s, t in zip(self.cfg.stages, self.cfg.tapped) if t]

    def forward(self, image: Tensor) -> FeaturePyramid:
        x = self.patch_embed(image)
        levels = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if str(i) in self.out_norms:
                levels.append(self.out_norms[str(i)](x).permute(0, 3, 1, 2).contiguous())
        return FeaturePyramid(levels, self.strides)


def init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, RelativePositionBias):
        nn.init.zeros_(m.table)


def encode(image: Tensor, encoder: SwinEncoder) -> FeaturePyramid:
    return encoder(image)
