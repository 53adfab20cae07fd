"""Full-size prediction (padding and tiling) and prompt extraction from masks."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from torch import Tensor

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class TilingConfig:
    tile: int = 224
    overlap: int = 32
    blend: str = "mean"

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile:
            raise ValueError(f"overlap {self.overlap} must be in [0, tile={self.tile})")
        if self.blend != "mean":
            raise ValueError(f"unsupported blend rule {self.blend!r}")

    @property
    def stride(self) -> int:
        return self.tile - self.overlap


@dataclass(frozen=True)
class CropBack:
    height: int
    width: int

    def __call__(self, x):
        return x[..., : self.height, : self.width]


def _multiple(requirement) -> int:
    return int(requirement if isinstance(requirement, int) else requirement.size_multiple)


def _reflect_pad(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    while pad_h or pad_w:
        H, W = x.shape[-2:]
        ph, pw = min(pad_h, H - 1), min(pad_w, W - 1)
        if (pad_h and ph == 0) or (pad_w and pw == 0):
            return F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        pad_h, pad_w = pad_h - ph, pad_w - pw
    return x


def pad_to_valid(image: Tensor, requirement) -> Tuple[Tensor, CropBack]:
    """Reflect-pad the bottom/right of a (..., H, W) tensor to the model's side multiple."""
    m = _multiple(requirement)
    H, W = image.shape[-2:]
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    x = _reflect_pad(x, (-H) % m, (-W) % m)
    return (x.squeeze(0) if squeeze else x), CropBack(H, W)


def valid_size(n: int, requirement) -> int:
    m = _multiple(requirement)
    return -(-n // m) * m


def tile_starts(n: int, tile: int, stride: int) -> List[int]:
    """Tile origins along one axis; the last tile is shifted inward to end at ``n``."""
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def tile_grid(height: int, width: int, cfg: TilingConfig) -> List[Tuple[int, int]]:
    return [(y, x) for y in tile_starts(height, cfg.tile, cfg.stride) for x in tile_starts(width, cfg.tile, cfg.stride)]


def coverage(height: int, width: int, cfg: TilingConfig) -> np.ndarray:
    """Number of tiles covering each pixel."""
    counts = np.zeros((height, width), dtype=np.int64)
    for y, x in tile_grid(height, width, cfg):
        counts[y:y + cfg.tile, x:x + cfg.tile] += 1
    return counts


def _run(model, x: Tensor) -> Tensor:
    """Model logits for a (1, C, h, w) batch, padded to the model's multiple if it declares one."""
    if hasattr(model, "size_multiple"):
        xp, crop = pad_to_valid(x, model)
        return crop(model(xp))
    return model(x)


@torch.no_grad()
def predict_full(model, image: Tensor, activation: Optional[str] = "sigmoid") -> Tensor:
    """Whole-image prediction through pad_to_valid; returns (classes, H, W)."""
    logits = _run(model, image.unsqueeze(0))[0]
    return torch.sigmoid(logits) if activation == "sigmoid" else logits


@torch.no_grad()
def predict_tiled(model: Callable, image: Tensor, cfg: Optional[TilingConfig] = None,
                  activation: Optional[str] = "sigmoid") -> Tensor:
    """Overlapping-tile prediction with per-pixel mean of logits; returns (classes, H, W).

    Images smaller than a tile are reflect-padded to one tile and cropped back.
    """
    cfg = cfg or TilingConfig()
    C, H, W = image.shape
    x = image.unsqueeze(0)
    crop = CropBack(H, W)
    if H < cfg.tile or W < cfg.tile:
        x = _reflect_pad(x, max(cfg.tile - H, 0), max(cfg.tile - W, 0))
    Hp, Wp = x.shape[-2:]
    acc = None
    count = torch.zeros(1, Hp, Wp, dtype=torch.float64)
    for y0, x0 in tile_grid(Hp, Wp, cfg):
        out = _run(model, x[..., y0:y0 + cfg.tile, x0:x0 + cfg.tile])[0].to(torch.float64)
        if acc is None:
            acc = torch.zeros(out.shape[0], Hp, Wp, dtype=torch.float64)
        acc[:, y0:y0 + cfg.tile, x0:x0 + cfg.tile] += out
        count[:, y0:y0 + cfg.tile, x0:x0 + cfg.tile] += 1
    logits = crop((acc / count).to(image.dtype))
    return torch.sigmoid(logits) if activation == "sigmoid" else logits


# ---------------------------------------------------------------- prompts

@dataclass
class PromptSet:
    """SAM-style prompts: boxes (B, 4) as x_min, y_min, x_max, y_max; points (B, N, 2) as x, y."""

    boxes: np.ndarray
    points: np.ndarray

    def to_dict(self) -> dict:
        return {"boxes": self.boxes.tolist(), "points": self.points.tolist(),
                "format": {"boxes": "x_min,y_min,x_max,y_max", "points": "x,y", "origin": "top-left"}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PromptSet":
        d = json.loads(Path(path).read_text())
        boxes = np.asarray(d["boxes"], dtype=np.int64).reshape(-1, 4)
        points = np.asarray(d["points"], dtype=np.int64)
        if points.size == 0:
            points = points.reshape(0, 0, 2)
        return cls(boxes, points)


def _components(mask) -> List[np.ndarray]:
    """Pixel coordinates (row, col) of each 4-connected component, ordered by (y_min, x_min)."""
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=FOUR_CONNECTED)
    comps = []
    for i in range(1, n + 1):
        comps.append(np.argwhere(labels == i))
    comps.sort(key=lambda c: (c[:, 0].min(), c[:, 1].min()))
    return comps


def extract_boxes(mask) -> np.ndarray:
    comps = _components(mask)
    boxes = [(c[:, 1].min(), c[:, 0].min(), c[:, 1].max(), c[:, 0].max()) for c in comps]
    return np.asarray(boxes, dtype=np.int64).reshape(-1, 4)


def extract_points(mask, n_points: int = 1, seed: int = 0) -> np.ndarray:
    """First point: component pixel closest to the centroid. The rest are sampled from the component."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    comps = _components(mask)
    out = np.zeros((len(comps), n_points, 2), dtype=np.int64)
    for b, c in enumerate(comps):
        centroid = c.mean(axis=0)
        first = c[np.argmin(((c - centroid) ** 2).sum(axis=1))]
        out[b, 0] = first[::-1]
        if n_points > 1:
            idx = rng.choice(len(c), size=n_points - 1, replace=len(c) < n_points)
            out[b, 1:] = c[idx][:, ::-1]
    return out


def extract_prompts(mask, n_points: int = 1, seed: int = 0) -> PromptSet:
    return PromptSet(extract_boxes(mask), extract_points(mask, n_points, seed))


# ---------------------------------------------------------------- overlays

def contour(mask) -> np.ndarray:
    m = np.asarray(mask) > 0
    return m & ~ndimage.binary_erosion(m, structure=FOUR_CONNECTED, border_value=0)


def render_overlay(image: np.ndarray, pred_mask, gt_mask, path=None, color=(0, 200, 0),
                   alpha: float = 0.45) -> np.ndarray:
    """Predicted mask as a translucent colour layer, ground-truth outline in white."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.dtype != np.uint8:
        lo, hi = float(img.min()), float(img.max())
        img = ((img - lo) / (hi - lo if hi > lo else 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img[..., :3].copy()
    pred = np.asarray(pred_mask) > 0
    if rgb.shape[:2] != pred.shape or pred.shape != np.asarray(gt_mask).shape:
        raise ValueError("image, prediction and ground truth must share spatial dims")
    out = rgb.astype(np.float64)
    out[pred] = (1 - alpha) * out[pred] + alpha * np.asarray(color, dtype=np.float64)
    out = np.rint(out).astype(np.uint8)
    out[contour(gt_mask)] = 255
    if path is not None:
        Image.fromarray(out).save(path, format="PNG")
    return out
