"""Dual-decoder U-Net pipeline for mucous gland segmentation in histology images."""

from .augmentation import AugmentConfig, GeomTransform, TrainingSample, build_augmented_set
from .dataset_io import (DatasetError, DatasetSplit, ImageSample, TargetPair,
                         derive_targets, generate_synthetic, load_dataset, save_dataset)
from .evaluation import MetricsReport, evaluate_pairs, object_dice, object_f1, pixel_dice
from .network import (DualDecoderUNet, NetworkConfig, ProbabilityPair,
                      load_checkpoint, save_checkpoint)
from .postprocess import FusionConfig, InstanceResult, fuse, label_components
from .tiling import PatchGrid, merge, split
from .training import TrainConfig, TrainResult, bce, head_loss, rmsprop_step, soft_dice, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "GeomTransform", "TrainingSample", "build_augmented_set",
    "DatasetError", "DatasetSplit", "ImageSample", "TargetPair",
    "derive_targets", "generate_synthetic", "load_dataset", "save_dataset",
    "MetricsReport", "evaluate_pairs", "object_dice", "object_f1", "pixel_dice",
    "DualDecoderUNet", "NetworkConfig", "ProbabilityPair",
    "load_checkpoint", "save_checkpoint",
    "FusionConfig", "InstanceResult", "fuse", "label_components",
    "PatchGrid", "merge", "split",
    "TrainConfig", "TrainResult", "bce", "head_loss", "rmsprop_step", "soft_dice", "train",
]
