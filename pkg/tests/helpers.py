"""Shared oracles for the test suite."""
from __future__ import annotations

from collections import deque
from typing import Callable, Iterable, List, Tuple

import numpy as np
import torch


def central_difference_check(fn: Callable[[], torch.Tensor], tensors: Iterable[torch.Tensor],
                             eps: float = 1e-6) -> float:
    """Worst per-tensor relative gradient error of ``fn`` against central differences.

    For each tensor the error is max|g_auto - g_fd| / max|g_fd| (so entries whose
    gradient is tiny compared to the tensor's scale do not dominate).
    """
    tensors = [t for t in tensors if t.requires_grad]
    for t in tensors:
        t.grad = None
    fn().backward()
    auto = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, auto):
            flat = t.view(-1)
            num = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = fn().item()
                flat[i] = orig - eps
                minus = fn().item()
                flat[i] = orig
                num[i] = (plus - minus) / (2 * eps)
            scale = num.abs().max().item()
            err = (g.view(-1) - num).abs().max().item()
            if scale > 0:
                worst = max(worst, err / scale)
            else:
                worst = max(worst, err)
    return worst


def flood_fill_components(mask: np.ndarray) -> List[List[Tuple[int, int]]]:
    """4-connected components by breadth-first search (independent of scipy)."""
    m = np.asarray(mask) > 0
    seen = np.zeros_like(m)
    H, W = m.shape
    comps = []
    for y in range(H):
        for x in range(W):
            if not m[y, x] or seen[y, x]:
                continue
            comp, queue = [], deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < H and 0 <= nx < W and m[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(comp)
    return comps


def coverage_oracle(n: int, tile: int, overlap: int) -> np.ndarray:
    """Per-position tile count along one axis from closed-form grid arithmetic."""
    if n <= tile:
        starts = [0]
    else:
        stride = tile - overlap
        k = (n - tile) // stride          # index of the last regular start
        starts = [i * stride for i in range(k + 1)]
        if k * stride + tile < n:
            starts.append(n - tile)
    counts = np.zeros(n, dtype=np.int64)
    for s in starts:
        counts[s:s + tile] += 1
    return counts


def random_blob_mask(rng: np.random.Generator, size: int = 48, n_blobs: int = 6) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        a, b = rng.uniform(1, size / 6, 2)
        mask |= (((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1).astype(np.uint8)
    return mask
