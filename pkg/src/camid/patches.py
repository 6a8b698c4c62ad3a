"""Patch selection and input normalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATCH = 64
SCALE = 0.0125
SAT_HIGH = 254
SAT_LOW = 1


@dataclass
class Patch:
    pixels: np.ndarray  # 64 x 64 x 3 uint8
    row: int  # grid row index
    col: int  # grid column index
    score: float
    source: str = ""


@dataclass
class PatchSet:
    """Selected patches of one image; ``shortfall`` > 0 when fewer than K qualified."""

    patches: list[Patch]
    requested: int
    candidates: int

    @property
    def shortfall(self) -> int:
        return max(0, self.requested - len(self.patches))

    @property
    def empty(self) -> bool:
        return not self.patches

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def stack(self) -> np.ndarray:
        if not self.patches:
            return np.empty((0, PATCH, PATCH, 3), dtype=np.uint8)
        return np.stack([p.pixels for p in self.patches])


def patch_quality(pixels) -> tuple[bool, float]:
    """Eligibility (no pixel at either rail) and closeness of the mean to mid-range."""
    pixels = np.asarray(pixels)
    eligible = not bool(((pixels >= SAT_HIGH) | (pixels <= SAT_LOW)).any())
    return eligible, -abs(float(pixels.mean(dtype=np.float64)) - 127.5)


def grid_blocks(image, size: int = PATCH):
    """Non-overlapping ``size`` x ``size`` blocks on the top-left anchored grid.

    Returns an array of shape rows x cols x size x size x C (a view).
    """
    image = np.asarray(image)
    rows, cols = image.shape[0] // size, image.shape[1] // size
    trimmed = image[: rows * size, : cols * size]
    return trimmed.reshape(rows, size, cols, size, -1).swapaxes(1, 2)


def extract_patches(image, k: int, source: str = "") -> PatchSet:
    """Up to ``k`` unsaturated grid patches, best quality first.

    Ranking is by score descending, then (row, col) ascending, so the result is
    a deterministic function of the pixels.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    if image.shape[0] < PATCH or image.shape[1] < PATCH:
        raise ValueError(f"image {image.shape[0]}x{image.shape[1]} smaller than {PATCH}x{PATCH}")
    if k < 1:
        raise ValueError("k must be >= 1")
    blocks = grid_blocks(image)
    rows, cols = blocks.shape[:2]
    flat = blocks.reshape(rows, cols, -1)
    saturated = ((flat >= SAT_HIGH) | (flat <= SAT_LOW)).any(axis=2)
    scores = -np.abs(flat.mean(axis=2, dtype=np.float64) - 127.5)
    cand = [(-scores[r, c], r, c) for r in range(rows) for c in range(cols) if not saturated[r, c]]
    cand.sort()
    chosen = [Patch(np.ascontiguousarray(blocks[r, c]), r, c, -neg, source) for neg, r, c in cand[:k]]
    return PatchSet(chosen, k, rows * cols)


def compute_mean_patch(patches) -> np.ndarray:
    """Pixel-wise average of a stack of 8-bit patches (float32)."""
    patches = np.asarray(patches)
    if patches.ndim != 4 or len(patches) == 0:
        raise ValueError("need a non-empty N x 64 x 64 x 3 stack of patches")
    return patches.mean(axis=0, dtype=np.float64).astype(np.float32)


def preprocess(patches, mean) -> np.ndarray:
    """``(pixels - mean) * 0.0125`` as float32; works for one patch or a stack."""
    if mean is None:
        raise ValueError("no mean patch available")
    patches = np.asarray(patches)
    mean = np.asarray(mean, dtype=np.float32)
    if patches.shape[-3:] != mean.shape:
        raise ValueError(f"patch shape {patches.shape[-3:]} != mean patch shape {mean.shape}")
    return (patches.astype(np.float32) - mean) * np.float32(SCALE)
