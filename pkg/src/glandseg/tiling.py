"""Non-overlapping patch tiling with padding, and the inverse merge."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_PATCH_SIZE = 256
PAD_MODES = ("reflect", "zero")


@dataclass(frozen=True)
class PatchGrid:
    """Tiling decomposition of one image into a rows x cols patch grid."""

    orig_h: int
    orig_w: int
    patch_size: int
    pad_h: int
    pad_w: int
    rows: int
    cols: int
    pad_mode: str

    def __post_init__(self):
        assert self.orig_h + self.pad_h == self.rows * self.patch_size
        assert self.orig_w + self.pad_w == self.cols * self.patch_size


def split(image: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE,
          pad_mode: str = "reflect") -> tuple[PatchGrid, list[np.ndarray]]:
    """Cut an (H, W[, C]) array into non-overlapping patches, row-major.

    The image is padded on the bottom/right up to the next patch multiple,
    either by reflection or with zeros.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) array, got shape {image.shape}")
    if patch_size < 32:
        raise ValueError(f"patch_size must be >= 32, got {patch_size}")
    if pad_mode not in PAD_MODES:
        raise ValueError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")

    h, w = image.shape[:2]
    rows = math.ceil(h / patch_size)
    cols = math.ceil(w / patch_size)
    pad_h = rows * patch_size - h
    pad_w = cols * patch_size - w
    grid = PatchGrid(h, w, patch_size, pad_h, pad_w, rows, cols, pad_mode)

    pad_spec = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (image.ndim - 2)
    if pad_mode == "reflect":
        canvas = np.pad(image, pad_spec, mode="reflect")
    else:
        canvas = np.pad(image, pad_spec, mode="constant", constant_values=0)

    patches = []
    for r in range(rows):
        for c in range(cols):
            y, x = r * patch_size, c * patch_size
            patches.append(np.ascontiguousarray(canvas[y:y + patch_size, x:x + patch_size]))
    return grid, patches


def merge(grid: PatchGrid, patches: list[np.ndarray]) -> np.ndarray:
    """Reassemble patches row-major and crop back to the original size."""
    expected = grid.rows * grid.cols
    if len(patches) != expected:
        raise ValueError(f"expected {expected} patches, got {len(patches)}")
    ps = grid.patch_size
    first = np.asarray(patches[0])
    for i, p in enumerate(patches):
        p = np.asarray(p)
        if p.shape[:2] != (ps, ps) or p.ndim != first.ndim:
            raise ValueError(f"patch {i} has shape {p.shape}, expected ({ps}, {ps}, ...)")

    canvas_shape = (grid.rows * ps, grid.cols * ps) + first.shape[2:]
    canvas = np.empty(canvas_shape, dtype=first.dtype)
    for r in range(grid.rows):
        for c in range(grid.cols):
            y, x = r * ps, c * ps
            canvas[y:y + ps, x:x + ps] = patches[r * grid.cols + c]
    return canvas[:grid.orig_h, :grid.orig_w]
