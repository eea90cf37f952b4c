"""Command-line entry points: train / predict / evaluate / synth.

All numeric settings come from a flat key-value config file; flags cover only
paths and verbosity. Exit codes: 0 success, 1 runtime failure, 2 usage or
input error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
from pathlib import Path

import numpy as np

from . import augmentation, dataset_io, evaluation, postprocess, tiling
from .config import ConfigError, RunConfig, config_keys, load_config
from .dataset_io import DatasetError
from .network import DualDecoderUNet, ProbabilityPair, forward_infer, load_checkpoint
from .training import CHECKPOINT_NAME, TrainingDiverged, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2

LOCK_NAME = ".glandseg.lock"


@contextlib.contextmanager
def output_lock(directory: Path):
    """Guard an output directory against concurrent writers."""
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {directory} is locked by another command "
            f"(remove {lock_path} if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _load_run_config(config_path, out_dir=None) -> RunConfig:
    cfg = load_config(config_path)
    if out_dir is not None:
        cfg.out_dir = Path(out_dir)
    return cfg


def _require_dataset_root(cfg: RunConfig) -> Path:
    if cfg.dataset_root is None:
        raise ConfigError("config must set dataset_root")
    if not Path(cfg.dataset_root).is_dir():
        raise DatasetError(f"dataset directory not found: {cfg.dataset_root}")
    return Path(cfg.dataset_root)


def _patchify(samples, patch_size, pad_mode):
    """Cut augmented samples into aligned image/mask training patches."""
    patches = []
    for s in samples:
        grid, image_patches = tiling.split(s.image, patch_size, pad_mode)
        _, gland_patches = tiling.split(s.targets.gland, patch_size, pad_mode)
        _, contour_patches = tiling.split(s.targets.contour, patch_size, pad_mode)
        for j in range(grid.rows * grid.cols):
            targets = dataset_io.TargetPair(gland_patches[j], contour_patches[j],
                                            s.targets.band_width)
            patches.append(augmentation.TrainingSample(f"{s.id}#p{j}",
                                                       image_patches[j], targets))
    return patches


def predict_probability_maps(model: DualDecoderUNet, image: np.ndarray,
                             pad_mode: str = "reflect",
                             batch_size: int = 4) -> ProbabilityPair:
    """Patch-wise inference: split, run the network per batch, merge maps."""
    grid, patches = tiling.split(image, model.cfg.input_size, pad_mode)
    gland_patches, contour_patches = [], []
    for start in range(0, len(patches), batch_size):
        batch = np.stack(patches[start:start + batch_size])
        for pair in forward_infer(model, batch):
            gland_patches.append(pair.gland)
            contour_patches.append(pair.contour)
    return ProbabilityPair(tiling.merge(grid, gland_patches),
                           tiling.merge(grid, contour_patches))


def _predict_one(model, cfg: RunConfig, image_id: str, image: np.ndarray) -> None:
    probs = predict_probability_maps(model, image, cfg.pad_mode, cfg.train.batch_size)
    result = postprocess.fuse(probs, cfg.fusion)
    out = Path(cfg.out_dir)
    postprocess.write_probability_png(out / f"{image_id}_gland_prob.png", probs.gland)
    postprocess.write_probability_png(out / f"{image_id}_contour_prob.png", probs.contour)
    postprocess.write_instance_png(out / f"{image_id}_instances.png", result.labels)
    postprocess.write_overlay_png(out / f"{image_id}_overlay.png", image, result.labels)
    log.info("predicted %s: %d gland instances", image_id, result.object_count)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(config_path, out_dir=None) -> int:
    try:
        cfg = _load_run_config(config_path, out_dir)
        root = _require_dataset_root(cfg)
        split = dataset_io.load_dataset(root, cfg.split_manifest)
        augmented = augmentation.build_augmented_set(split, cfg.augment, cfg.band_width)
        patches = _patchify(augmented, cfg.network.input_size, cfg.pad_mode)
        log.info("training on %d patches from %d augmented samples",
                 len(patches), len(augmented))
        with output_lock(Path(cfg.out_dir)):
            train(patches, cfg.network, cfg.train, out_dir=cfg.out_dir)
    except (ConfigError, DatasetError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        log.error("%s (last checkpoint retained)", exc)
        return EXIT_RUNTIME
    except Exception as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_predict(config_path, image_paths=(), out_dir=None) -> int:
    try:
        cfg = _load_run_config(config_path, out_dir)
        ckpt = cfg.checkpoint or (Path(cfg.out_dir) / CHECKPOINT_NAME)
        if not Path(ckpt).exists():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        inputs: list[tuple[str, np.ndarray]] = []
        if image_paths:
            for p in image_paths:
                p = Path(p)
                if not p.exists():
                    raise ConfigError(f"input image not found: {p}")
                inputs.append((p.stem, dataset_io.read_image(p)))
        else:
            split = dataset_io.load_dataset(_require_dataset_root(cfg), cfg.split_manifest)
            inputs = [(s.id, s.image) for s in split.test]
            if not inputs:
                raise DatasetError("dataset has no test images to predict on")
        with output_lock(Path(cfg.out_dir)):
            for image_id, image in inputs:
                _predict_one(model, cfg, image_id, image)
    except (ConfigError, DatasetError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(config_path, out_dir=None) -> int:
    try:
        cfg = _load_run_config(config_path, out_dir)
        split = dataset_io.load_dataset(_require_dataset_root(cfg), cfg.split_manifest)
        gt = {s.id: s.instance_mask for s in split.test}
        out = Path(cfg.out_dir)
        pred_ids = {p.name[:-len("_instances.png")]
                    for p in out.glob("*_instances.png")}
        missing_pred = sorted(set(gt) - pred_ids)
        missing_gt = sorted(pred_ids - set(gt))
        if missing_pred or missing_gt:
            for image_id in missing_pred:
                log.error("no prediction for ground-truth image %s", image_id)
            for image_id in missing_gt:
                log.error("no ground truth for prediction %s", image_id)
            return EXIT_INPUT
        pairs = [(i, postprocess.read_instance_png(out / f"{i}_instances.png"), gt[i])
                 for i in sorted(gt)]
        # referenced relative to the report location
        overlays = {i: f"{i}_overlay.png"
                    for i in sorted(gt) if (out / f"{i}_overlay.png").exists()}
        with output_lock(out):
            report = evaluation.evaluate_pairs(pairs, overlay_paths=overlays)
            evaluation.write_report(report, out)
        print(report.format_table())
    except (ConfigError, DatasetError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_synth(config_path, out_dir=None) -> int:
    try:
        cfg = _load_run_config(config_path, out_dir)
        if cfg.dataset_root is None:
            raise ConfigError("config must set dataset_root (destination for synth)")
        if cfg.synth_train_n < 1:
            raise ConfigError(f"synth_train_n must be >= 1, got {cfg.synth_train_n}")
        split = dataset_io.generate_synthetic(cfg.synth_train_n, cfg.synth_h, cfg.synth_w,
                                              cfg.train.seed, n_test=cfg.synth_test_n)
        with output_lock(Path(cfg.dataset_root)):
            dataset_io.save_dataset(split, cfg.dataset_root)
        log.info("wrote %d train + %d test synthetic samples to %s",
                 len(split.train), len(split.test), cfg.dataset_root)
    except (ConfigError, DatasetError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="glandseg",
        description="Gland segmentation pipeline: train, predict, evaluate, synth.",
        epilog="Config keys: " + ", ".join(config_keys()),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "augment, patch and train; writes checkpoints and a loss CSV"),
        ("predict", "run patch-wise inference and fusion on images"),
        ("evaluate", "score predictions against ground truth"),
        ("synth", "generate a synthetic dataset on disk"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--out", help="override the configured output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "predict":
            p.add_argument("images", nargs="*",
                           help="image files (default: the dataset test split)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        return cmd_train(args.config, out_dir=args.out)
    if args.command == "predict":
        return cmd_predict(args.config, image_paths=args.images, out_dir=args.out)
    if args.command == "evaluate":
        return cmd_evaluate(args.config, out_dir=args.out)
    return cmd_synth(args.config, out_dir=args.out)


if __name__ == "__main__":
    raise SystemExit(main())
