"""Fusion of gland/contour probability maps into labeled gland instances."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .network import ProbabilityPair

# min_object_px is calibrated at the full-resolution dataset frame and scales
# with image area for other sizes.
REFERENCE_AREA = 775 * 522

_CONN4 = ndimage.generate_binary_structure(2, 1)
_CONN8 = ndimage.generate_binary_structure(2, 2)


@dataclass
class FusionConfig:
    tau_gland: float = 0.5
    tau_contour: float = 0.5
    min_object_px: int = 500       # at REFERENCE_AREA; scaled by image area
    fill_holes: bool = True
    restore_dilate_px: int = 2     # grow-back after contour subtraction

    def __post_init__(self):
        for name in ("tau_gland", "tau_contour"):
            tau = getattr(self, name)
            if not 0.0 < tau < 1.0:
                raise ValueError(f"{name} must be strictly inside (0, 1), got {tau}")
        if self.min_object_px < 0:
            raise ValueError(f"min_object_px must be >= 0, got {self.min_object_px}")
        if self.restore_dilate_px < 0:
            raise ValueError(f"restore_dilate_px must be >= 0, got {self.restore_dilate_px}")


@dataclass
class InstanceResult:
    binary_mask: np.ndarray  # (H, W) uint8
    labels: np.ndarray       # (H, W) int32, contiguous 1..K
    object_count: int


def _relabel_row_major(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 1..K by the row-major position of each first pixel."""
    flat = labels.ravel()
    n = int(flat.max())
    if n == 0:
        return labels.astype(np.int32)
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[labels]


def label_components(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Connected-component labeling with deterministic row-major label order."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _CONN4 if connectivity == 4 else _CONN8
    raw, _ = ndimage.label(np.asarray(mask).astype(bool), structure=structure)
    return _relabel_row_major(raw)


def constrained_dilate(labels: np.ndarray, px: int) -> np.ndarray:
    """Grow every labeled component by ``px`` (Chebyshev) without merging.

    A pixel reachable from two different labels in the same round becomes a
    permanent barrier, which keeps grown components separated by construction.
    """
    labels = labels.astype(np.int32).copy()
    barrier = np.zeros(labels.shape, dtype=bool)
    sentinel = np.iinfo(np.int32).max
    for _ in range(px):
        occupied = labels > 0
        hi = ndimage.maximum_filter(labels, size=3)
        lo = ndimage.minimum_filter(np.where(occupied, labels, sentinel), size=3)
        candidate = ~occupied & ~barrier & (hi > 0)
        agree = candidate & (hi == lo)
        labels[agree] = hi[agree]
        barrier |= candidate & (hi != lo)
    return labels


def fuse(probs: ProbabilityPair, cfg: FusionConfig | None = None) -> InstanceResult:
    """Threshold-fuse the two probability maps into labeled gland instances.

    Seed pixels are confident gland minus confident contour; components are
    labeled (8-connectivity), small ones dropped, holes filled, and the
    subtracted contour band grown back without merging neighbors.
    """
    cfg = cfg or FusionConfig()
    if probs.gland.shape != probs.contour.shape:
        raise ValueError(
            f"gland shape {probs.gland.shape} != contour shape {probs.contour.shape}"
        )
    h, w = probs.gland.shape
    seed = (probs.gland >= cfg.tau_gland) & ~(probs.contour >= cfg.tau_contour)
    labels = label_components(seed, connectivity=8)

    min_px = int(round(cfg.min_object_px * (h * w) / REFERENCE_AREA))
    if labels.max() > 0 and min_px > 0:
        sizes = np.bincount(labels.ravel())
        keep = sizes >= min_px
        keep[0] = False
        labels = np.where(keep[labels], labels, 0)

    if cfg.fill_holes:
        for k in np.unique(labels):
            if k == 0:
                continue
            filled = ndimage.binary_fill_holes(labels == k)
            labels[filled & (labels == 0)] = k

    labels = constrained_dilate(labels, cfg.restore_dilate_px)
    labels = _relabel_row_major(labels)
    return InstanceResult((labels > 0).astype(np.uint8), labels, int(labels.max()))


# ---------------------------------------------------------------------------
# output images
# ---------------------------------------------------------------------------

def write_probability_png(path, prob: np.ndarray) -> None:
    Image.fromarray(np.rint(np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8)).save(Path(path))


def write_instance_png(path, labels: np.ndarray) -> None:
    """Instance map as 16-bit grayscale PNG, label = pixel value."""
    if labels.max() > np.iinfo(np.uint16).max:
        raise ValueError("more instances than a 16-bit PNG can hold")
    Image.fromarray(labels.astype(np.uint16)).save(Path(path))


def read_instance_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im).astype(np.int32)


def write_overlay_png(path, image: np.ndarray, labels: np.ndarray) -> None:
    """Source image with gland interiors tinted and boundaries drawn green."""
    overlay = image.astype(np.int32).copy()
    inside = labels > 0
    boundary = inside & (ndimage.minimum_filter(labels, size=3) != labels)
    overlay[inside] = (0.7 * overlay[inside] + 0.3 * np.array([0, 200, 0])).astype(np.int32)
    overlay[boundary] = (0, 255, 0)
    Image.fromarray(np.clip(overlay, 0, 255).astype(np.uint8)).save(Path(path))
