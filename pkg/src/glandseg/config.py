"""Flat key-value run configuration shared by all CLI commands."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .augmentation import AugmentConfig
from .dataset_io import DEFAULT_BAND_WIDTH
from .network import NetworkConfig
from .postprocess import FusionConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values or invalid settings."""


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    """Union of the module configs plus the paths a run touches."""

    dataset_root: Path | None = None
    out_dir: Path = Path("runs/out")
    checkpoint: Path | None = None
    split_manifest: Path | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    band_width: int = DEFAULT_BAND_WIDTH
    pad_mode: str = "reflect"
    synth_train_n: int = 16
    synth_test_n: int = 8
    synth_h: int = 256
    synth_w: int = 256


# key -> (section attribute or None for top level, field name, parser)
_KEYS = {
    "dataset_root": (None, "dataset_root", Path),
    "out_dir": (None, "out_dir", Path),
    "checkpoint": (None, "checkpoint", Path),
    "split_manifest": (None, "split_manifest", Path),
    "depth": ("network", "depth", int),
    "base_filters": ("network", "base_filters", int),
    "kernel": ("network", "kernel", int),
    "input_size": ("network", "input_size", int),
    "channels_in": ("network", "channels_in", int),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "lr", float),
    "rho": ("train", "rho", float),
    "eps": ("train", "eps", float),
    "dice_smooth": ("train", "dice_smooth", float),
    "head_weight_gland": ("train", "_head_weight_gland", float),
    "head_weight_contour": ("train", "_head_weight_contour", float),
    "seed": (None, "_seed", int),
    "factor": ("augment", "factor", int),
    "shift_frac": ("augment", "shift_frac", float),
    "rot_deg": ("augment", "rot_deg", float),
    "zoom_min": ("augment", "_zoom_min", float),
    "zoom_max": ("augment", "_zoom_max", float),
    "flip_h": ("augment", "flip_h", float),
    "flip_v": ("augment", "flip_v", float),
    "band_width": (None, "band_width", int),
    "pad_mode": (None, "pad_mode", str),
    "tau_gland": ("fusion", "tau_gland", float),
    "tau_contour": ("fusion", "tau_contour", float),
    "min_object_px": ("fusion", "min_object_px", int),
    "fill_holes": ("fusion", "fill_holes", _parse_bool),
    "restore_dilate_px": ("fusion", "restore_dilate_px", int),
    "synth_train_n": (None, "synth_train_n", int),
    "synth_test_n": (None, "synth_test_n", int),
    "synth_h": (None, "synth_h", int),
    "synth_w": (None, "synth_w", int),
}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines ('#' comments); unknown keys are rejected."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        raw[key] = value

    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {"network": {}, "train": {}, "augment": {}, "fusion": {}}
    for key, value in raw.items():
        section, attr, parser = _KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from exc
        (top if section is None else sections[section])[attr] = parsed

    seed = top.pop("_seed", None)
    if seed is not None:
        sections["train"]["seed"] = seed
        sections["augment"]["seed"] = seed
    wg = sections["train"].pop("_head_weight_gland", None)
    wc = sections["train"].pop("_head_weight_contour", None)
    if wg is not None or wc is not None:
        default = TrainConfig()
        sections["train"]["head_weights"] = (
            wg if wg is not None else default.head_weights[0],
            wc if wc is not None else default.head_weights[1],
        )
    zmin = sections["augment"].pop("_zoom_min", None)
    zmax = sections["augment"].pop("_zoom_max", None)
    if zmin is not None or zmax is not None:
        default = AugmentConfig()
        sections["augment"]["zoom_range"] = (
            zmin if zmin is not None else default.zoom_range[0],
            zmax if zmax is not None else default.zoom_range[1],
        )

    try:
        cfg = RunConfig(
            network=NetworkConfig(**sections["network"]),
            train=TrainConfig(**sections["train"]),
            augment=AugmentConfig(**sections["augment"]),
            fusion=FusionConfig(**sections["fusion"]),
            **top,
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if cfg.pad_mode not in ("reflect", "zero"):
        raise ConfigError(f"{source}: pad_mode must be 'reflect' or 'zero', got {cfg.pad_mode!r}")
    if cfg.band_width < 1:
        raise ConfigError(f"{source}: band_width must be >= 1, got {cfg.band_width}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def config_keys() -> list[str]:
    """The documented flat key names, for help output."""
    return sorted(_KEYS)


def write_config(path, **values) -> Path:
    """Write a config file from keyword values (convenience for tests/tools)."""
    path = Path(path)
    unknown = set(values) - set(_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    lines = [f"{key} = {values[key]}" for key in values]
    path.write_text("\n".join(lines) + "\n")
    return path
