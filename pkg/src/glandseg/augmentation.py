"""Joint geometric augmentation of images and their target masks.

One affine transform (shift, rotation, zoom, flips) is drawn per copy and
applied identically to the image (bilinear) and to both masks
(nearest-neighbor, re-binarized). The training set is materialized ahead of
training, ``factor`` copies per sample with the first copy untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .dataset_io import DatasetSplit, TargetPair, derive_targets, stable_id_hash
from .dataset_io import DEFAULT_BAND_WIDTH


@dataclass
class AugmentConfig:
    factor: int = 10
    shift_frac: float = 0.1            # max |shift| per axis, fraction of side
    rot_deg: float = 20.0              # rotation drawn from [-rot_deg, rot_deg]
    zoom_range: tuple[float, float] = (0.9, 1.1)
    flip_h: float = 0.5                # probability of horizontal flip
    flip_v: float = 0.5
    fill_mode: str = "reflect"
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")
        lo, hi = self.zoom_range
        if not (lo <= 1.0 <= hi):
            raise ValueError(f"zoom_range must contain 1.0, got {self.zoom_range}")
        for name in ("flip_h", "flip_v"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.fill_mode != "reflect":
            raise ValueError(f"unsupported fill_mode: {self.fill_mode!r}")


@dataclass(frozen=True)
class GeomTransform:
    """An affine map: flip, then zoom, then rotate, then shift, about center."""

    shift: tuple[float, float] = (0.0, 0.0)  # (dy, dx) as fractions of H, W
    angle_deg: float = 0.0
    zoom: float = 1.0
    flip_h: bool = False
    flip_v: bool = False
    fill_mode: str = "reflect"

    def _inverse_args(self, shape):
        h, w = shape[:2]
        theta = np.deg2rad(self.angle_deg)
        sy = self.zoom * (-1.0 if self.flip_v else 1.0)
        sx = self.zoom * (-1.0 if self.flip_h else 1.0)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        fwd = rot @ np.diag([sy, sx])
        center = (np.array([h, w], dtype=float) - 1.0) / 2.0
        t = np.array([self.shift[0] * h, self.shift[1] * w])
        inv = np.linalg.inv(fwd)
        offset = center - inv @ (center + t)
        return inv, offset

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        """Warp an (H, W, 3) uint8 image with bilinear interpolation."""
        matrix, offset = self._inverse_args(image.shape)
        out = np.empty_like(image)
        work = image.astype(np.float64)
        for ch in range(image.shape[2]):
            warped = ndimage.affine_transform(
                work[..., ch], matrix, offset=offset, order=1, mode=self.fill_mode)
            out[..., ch] = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
        return out

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        """Warp a 2D array with nearest-neighbor lookup (dtype preserved)."""
        matrix, offset = self._inverse_args(mask.shape)
        return ndimage.affine_transform(
            mask, matrix, offset=offset, order=0, mode=self.fill_mode)


def identity_transform() -> GeomTransform:
    return GeomTransform()


def draw_transform(cfg: AugmentConfig, rng: np.random.Generator) -> GeomTransform:
    """Draw one random transform from the configured ranges."""
    dy = rng.uniform(-cfg.shift_frac, cfg.shift_frac)
    dx = rng.uniform(-cfg.shift_frac, cfg.shift_frac)
    angle = rng.uniform(-cfg.rot_deg, cfg.rot_deg)
    zoom = rng.uniform(*cfg.zoom_range)
    flip_h = bool(rng.random() < cfg.flip_h)
    flip_v = bool(rng.random() < cfg.flip_v)
    return GeomTransform((dy, dx), angle, zoom, flip_h, flip_v, cfg.fill_mode)


def augment_sample(image: np.ndarray, targets: TargetPair,
                   transform: GeomTransform) -> tuple[np.ndarray, TargetPair]:
    """Apply one transform to an image and its gland/contour masks."""
    out_image = transform.apply_image(image)
    gland = (transform.apply_mask(targets.gland).astype(np.float32) > 0.5).astype(np.uint8)
    contour = (transform.apply_mask(targets.contour).astype(np.float32) > 0.5).astype(np.uint8)
    return out_image, replace(targets, gland=gland, contour=contour)


@dataclass
class TrainingSample:
    """One training unit: an image with its derived target masks."""

    id: str
    image: np.ndarray
    targets: TargetPair


def build_augmented_set(split: DatasetSplit, cfg: AugmentConfig,
                        band_width: int = DEFAULT_BAND_WIDTH) -> list[TrainingSample]:
    """Enlarge the train split ``factor`` times.

    Copy 0 of each sample is the untouched original. The RNG stream of copy k
    depends only on (cfg.seed, sample id, k), so the output is reproducible
    and order-independent.
    """
    out: list[TrainingSample] = []
    for sample in split.train:
        targets = derive_targets(sample, band_width)
        out.append(TrainingSample(f"{sample.id}/aug0", sample.image.copy(), targets))
        for k in range(1, cfg.factor):
            rng = np.random.default_rng([cfg.seed, stable_id_hash(sample.id), k])
            transform = draw_transform(cfg, rng)
            image, warped = augment_sample(sample.image, targets, transform)
            out.append(TrainingSample(f"{sample.id}/aug{k}", image, warped))
    return out
