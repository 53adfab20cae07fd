"""Paired image/mask datasets, normalisation, augmentation, epoch sampling and synthetic data."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
MASK_SUFFIXES = (".png",)
STATS_FILE = "stats.json"


@dataclass
class SampleRecord:
    image_path: Path
    mask_path: Path
    size: Tuple[int, int]
    channels: int

    @property
    def name(self) -> str:
        return self.image_path.stem


class ScanResult(list):
    """Records in lexicographic order; ``skipped`` lists files without a partner."""

    def __init__(self, records=(), skipped=()):
        super().__init__(records)
        self.skipped: List[str] = list(skipped)


def load_image(path) -> np.ndarray:
    """H x W x C array in the file's native integer dtype."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 0).astype(np.uint8)


def save_png(path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG", compress_level=6)


def _files(d: Path, suffixes) -> dict:
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in suffixes}


def scan_dataset(root, tile: Optional[int] = None) -> ScanResult:
    """Pair ``root/images/*`` with ``root/masks/*`` by file stem.

    With ``tile`` set, images are first cut into a non-overlapping grid of
    ``tile``-sided pieces (see :func:`tile_dataset`) and the tiled copy is scanned.
    """
    root = Path(root)
    if tile:
        return scan_dataset(tile_dataset(root, root / f"tiles_{tile}", tile))
    images = _files(root / "images", IMAGE_SUFFIXES)
    masks = _files(root / "masks", MASK_SUFFIXES)
    records, skipped = [], []
    for stem in sorted(images):
        if stem not in masks:
            skipped.append(f"images/{images[stem].name}: no mask")
            continue
        with Image.open(images[stem]) as im:
            w, h = im.size
            channels = len(im.getbands())
        with Image.open(masks[stem]) as mk:
            if mk.size != (w, h):
                skipped.append(f"images/{images[stem].name}: mask size {mk.size} != image size {(w, h)}")
                continue
        records.append(SampleRecord(images[stem], masks[stem], (h, w), channels))
    for stem in sorted(set(masks) - set(images)):
        skipped.append(f"masks/{masks[stem].name}: no image")
    for msg in skipped:
        log.warning("scan_dataset: %s", msg)
    return ScanResult(records, skipped)


def tile_dataset(src, dst, tile: int = 512) -> Path:
    """Cut every pair into a ``tile`` grid; edge tiles are reflection-padded."""
    dst = Path(dst)
    (dst / "images").mkdir(parents=True, exist_ok=True)
    (dst / "masks").mkdir(parents=True, exist_ok=True)
    for rec in scan_dataset(src):
        img, mask = load_image(rec.image_path), load_mask(rec.mask_path)
        H, W = mask.shape
        for ty in range(0, H, tile):
            for tx in range(0, W, tile):
                ci = reflect_pad(img[ty:ty + tile, tx:tx + tile], tile)
                cm = reflect_pad(mask[ty:ty + tile, tx:tx + tile], tile)
                stem = f"{rec.name}_{ty:05d}_{tx:05d}"
                save_png(dst / "images" / f"{stem}.png", ci.squeeze(-1) if ci.shape[-1] == 1 else ci)
                save_png(dst / "masks" / f"{stem}.png", cm * 255)
    return dst


def reflect_pad(arr: np.ndarray, size) -> np.ndarray:
    """Reflect-pad bottom/right up to ``size`` (int or (h, w)), repeating for tiny inputs."""
    th, tw = (size, size) if isinstance(size, int) else size
    while arr.shape[0] < th or arr.shape[1] < tw:
        ph, pw = max(th - arr.shape[0], 0), max(tw - arr.shape[1], 0)
        if min(arr.shape[:2]) > 1:
            ph, pw = min(ph, arr.shape[0] - 1), min(pw, arr.shape[1] - 1)
            mode = "reflect"
        else:
            mode = "edge"
        arr = np.pad(arr, [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2), mode=mode)
    return arr


# ---------------------------------------------------------------- normalisation

@dataclass
class DatasetStats:
    mean: List[float]
    std: List[float]
    count: int
    clamped: List[int] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "DatasetStats":
        C = arrays[0].shape[-1]
        s = np.zeros(C)
        ss = np.zeros(C)
        n = 0
        for a in arrays:
            flat = a.reshape(-1, C).astype(np.float64)
            s += flat.sum(0)
            ss += (flat ** 2).sum(0)
            n += flat.shape[0]
        mean = s / n
        std = np.sqrt(np.maximum(ss / n - mean ** 2, 0.0))
        clamped = [int(c) for c in np.nonzero(std < 1e-8)[0]]
        if clamped:
            log.warning("zero-variance channels %s: std clamped to 1", clamped)
            std[clamped] = 1.0
        return cls(mean.tolist(), std.tolist(), int(n), clamped)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"mean": self.mean, "std": self.std, "count": self.count,
                                          "clamped": self.clamped}, indent=2))

    @classmethod
    def load(cls, path) -> "DatasetStats":
        d = json.loads(Path(path).read_text())
        return cls(d["mean"], d["std"], d["count"], d.get("clamped", []))


def dataset_stats(root, records: Sequence[SampleRecord], recompute: bool = False) -> DatasetStats:
    """Per-channel statistics, persisted as ``root/stats.json`` and reused on later calls."""
    path = Path(root) / STATS_FILE
    if path.exists() and not recompute:
        return DatasetStats.load(path)
    stats = DatasetStats.from_arrays([load_image(r.image_path) for r in records])
    stats.save(path)
    return stats


def normalize(image: np.ndarray, stats: Optional[DatasetStats] = None) -> np.ndarray:
    """(x - mean) / std per channel, float32. Without ``stats`` the image's own statistics are used."""
    if image.ndim == 2:
        image = image[..., None]
    if stats is None:
        stats = DatasetStats.from_arrays([image])
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    std = np.where(std < 1e-8, 1.0, std)
    return ((image.astype(np.float64) - mean) / std).astype(np.float32)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotations: Tuple[int, ...] = (0, 90, 180, 270)
    crop: Tuple[int, int] = (224, 224)
    seed: int = 0

    def __post_init__(self):
        self.rotations = tuple(self.rotations)
        self.crop = tuple(self.crop)
        if any(r % 90 for r in self.rotations):
            raise ValueError("only right-angle rotations are supported")


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool
    vflip: bool
    quarter_turns: int
    top: int
    left: int
    in_shape: Tuple[int, int]
    crop: Tuple[int, int]

    def map_point(self, y: int, x: int) -> Optional[Tuple[int, int]]:
        """Where input pixel (y, x) lands in the output, or None if cropped away.

        Points in the padded margin are not tracked; only original pixels are mapped.
        """
        H, W = self.in_shape
        if self.hflip:
            x = W - 1 - x
        if self.vflip:
            y = H - 1 - y
        for _ in range(self.quarter_turns):
            # np.rot90 (counter-clockwise): (y, x) in H x W -> (W - 1 - x, y) in W x H
            y, x, H, W = W - 1 - x, y, W, H
        y, x = y - self.top, x - self.left
        if 0 <= y < self.crop[0] and 0 <= x < self.crop[1]:
            return y, x
        return None


def sample_augment(shape: Tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    hflip = bool(rng.random() < cfg.hflip_p)
    vflip = bool(rng.random() < cfg.vflip_p)
    turns = int(cfg.rotations[rng.integers(len(cfg.rotations))]) // 90 % 4
    H, W = shape
    if turns % 2:
        H, W = W, H
    H, W = max(H, cfg.crop[0]), max(W, cfg.crop[1])
    top = int(rng.integers(H - cfg.crop[0] + 1))
    left = int(rng.integers(W - cfg.crop[1] + 1))
    return AugmentParams(hflip, vflip, turns, top, left, tuple(shape), cfg.crop)


def apply_augment(arr: np.ndarray, p: AugmentParams) -> np.ndarray:
    if arr.shape[:2] != p.in_shape:
        raise ValueError(f"array {arr.shape[:2]} does not match sampled shape {p.in_shape}")
    if p.hflip:
        arr = arr[:, ::-1]
    if p.vflip:
        arr = arr[::-1]
    arr = np.rot90(arr, k=p.quarter_turns, axes=(0, 1))
    arr = reflect_pad(arr, p.crop)
    return np.ascontiguousarray(arr[p.top:p.top + p.crop[0], p.left:p.left + p.crop[1]])


def augment(image: np.ndarray, mask: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Random flips, a right-angle rotation and a crop, applied identically to image and mask."""
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")
    p = sample_augment(mask.shape[:2], cfg, rng)
    return apply_augment(image, p), apply_augment(mask, p)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample index), so worker count never matters."""
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------- epoch sampling

@dataclass
class EpochPlan:
    samples_per_epoch: int = 500
    epochs: int = 150
    batch: int = 16
    seed: int = 0


def plan_indices(n_records: int, plan: EpochPlan, epoch: int) -> np.ndarray:
    if n_records == 0:
        raise ValueError("cannot plan an epoch over an empty dataset")
    rng = np.random.default_rng([plan.seed, epoch])
    return rng.integers(0, n_records, size=plan.samples_per_epoch)


def plan_epoch(records: Sequence[SampleRecord], plan: EpochPlan, epoch: int) -> List[SampleRecord]:
    """``plan.samples_per_epoch`` records drawn uniformly with replacement."""
    return [records[i] for i in plan_indices(len(records), plan, epoch)]


# ---------------------------------------------------------------- synthetic data

def _render(size: int, density: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    g = rng.uniform(-1, 1, size=2)
    image = 50 + 15 * (g[0] * yy + g[1] * xx) / size
    mask = np.zeros((size, size), dtype=bool)
    r_lo, r_hi = size / 40, size / 14
    target = density * size * size
    filled = 0
    for _ in range(2000):
        gap = target - filled
        if gap <= 0:
            break
        cy, cx = rng.uniform(0, size, size=2)
        a, b = rng.uniform(r_lo, r_hi, size=2)
        theta = rng.uniform(0, np.pi)
        r = int(np.ceil(max(a, b))) + 1
        y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, size)
        x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, size)
        dy, dx = yy[y0:y1, x0:x1] - cy, xx[y0:y1, x0:x1] - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        r2 = u * u + v * v
        blob = r2 <= 1.0
        added = int((blob & ~mask[y0:y1, x0:x1]).sum())
        if added == 0 or added - gap > gap:
            # would overshoot the target by more than it closes the gap
            continue
        shade = rng.uniform(150, 210) - 40 * r2 + 10 * (u * g[0] + v * g[1])
        image[y0:y1, x0:x1] = np.where(blob, shade, image[y0:y1, x0:x1])
        mask[y0:y1, x0:x1] |= blob
        filled += added
    image = image + rng.normal(0, 8, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return np.repeat(image[..., None], 3, axis=-1), mask.astype(np.uint8)


def synth_generate(out_dir, n: int, size: int = 256, seed: int = 0, density: float = 0.2) -> Path:
    """Write ``n`` synthetic nucleus-like image/mask pairs in the scan_dataset layout."""
    if size < 64:
        raise ValueError("synthetic images must be at least 64 pixels per side")
    if not 0 <= density < 1:
        raise ValueError("density must lie in [0, 1)")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        if density == 0:
            image = np.zeros((size, size, 3), np.uint8)
            mask = np.zeros((size, size), np.uint8)
        else:
            image, mask = _render(size, density, np.random.default_rng([seed, i]))
        save_png(out / "images" / f"synth_{i:04d}.png", image)
        save_png(out / "masks" / f"synth_{i:04d}.png", mask * 255)
    return out
