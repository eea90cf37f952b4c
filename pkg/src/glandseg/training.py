"""Composite BCE + Dice loss, RMSprop and the epoch training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import TrainingSample
from .evaluation import pixel_dice
from .network import DualDecoderUNet, NetworkConfig, init_params, normalize_patches
from .network import save_checkpoint

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
CHECKPOINT_NAME = "checkpoint.pt"
LOSS_LOG_NAME = "loss_log.csv"
LOSS_LOG_FIELDS = ("epoch", "step", "loss_total", "loss_gland", "loss_contour", "pixel_dice")


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; the last checkpoint survives."""


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 4
    lr: float = 1e-3
    rho: float = 0.9            # decay of the squared-gradient running average
    eps: float = 1e-8
    dice_smooth: float = 1.0
    head_weights: tuple[float, float] = (1.0, 1.0)  # (gland, contour)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be > 0, got {self.dice_smooth}")


def _require_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy; predictions clamped away from {0, 1}."""
    _require_same_shape(pred, target)
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def soft_dice(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Differentiable overlap score (2*sum(p*t) + s) / (sum(p) + sum(t) + s)."""
    _require_same_shape(pred, target)
    inter = (pred * target).sum()
    return (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def head_loss(pred: torch.Tensor, target: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Per-head loss: BCE plus the Dice complement (both vanish at a perfect fit)."""
    return bce(pred, target) + (1.0 - soft_dice(pred, target, cfg.dice_smooth))


def total_loss(gland_pred, gland_target, contour_pred, contour_target, cfg: TrainConfig):
    """Weighted sum of the gland-head and contour-head losses."""
    loss_g = head_loss(gland_pred, gland_target, cfg)
    loss_c = head_loss(contour_pred, contour_target, cfg)
    w_g, w_c = cfg.head_weights
    return w_g * loss_g + w_c * loss_c, loss_g, loss_c


@dataclass
class OptimizerState:
    """Per-parameter running average of squared gradients."""

    square_avg: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor]) -> "OptimizerState":
        return cls({name: torch.zeros_like(p) for name, p in params.items()})


def rmsprop_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
                 state: OptimizerState, cfg: TrainConfig):
    """One RMSprop update, in place:

    v <- rho*v + (1-rho)*g^2;  p <- p - lr * g / (sqrt(v) + eps)
    """
    state.step += 1
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            v = state.square_avg[name]
            v.mul_(cfg.rho).addcmul_(g, g, value=1.0 - cfg.rho)
            p.addcdiv_(g, v.sqrt().add(cfg.eps), value=-cfg.lr)
    return params, state


@dataclass
class StepLog:
    epoch: int
    step: int
    loss_total: float
    loss_gland: float
    loss_contour: float
    pixel_dice: float


@dataclass
class TrainResult:
    model: DualDecoderUNet
    log: list[StepLog] = field(default_factory=list)


def _batch_tensors(images, glands, contours, idx):
    x = normalize_patches(images[idx])
    tg = torch.from_numpy(glands[idx]).to(torch.float32)
    tc = torch.from_numpy(contours[idx]).to(torch.float32)
    return x, tg, tc


def train(samples: list[TrainingSample], net_cfg: NetworkConfig, cfg: TrainConfig,
          out_dir=None, max_steps: int | None = None) -> TrainResult:
    """Train the dual-decoder network on pre-patched samples.

    Runs ``epochs`` x ceil(N / batch_size) optimizer steps (capped by
    ``max_steps`` when given), fully determined by ``cfg.seed``. When
    ``out_dir`` is set, a rolling checkpoint is written after every epoch and
    a per-step loss CSV alongside it; on divergence the loop aborts and the
    last completed epoch's checkpoint stays on disk.
    """
    if not samples:
        raise ValueError("no training samples")
    size = net_cfg.input_size
    for s in samples:
        if s.image.shape != (size, size, 3):
            raise ValueError(f"sample {s.id}: expected {size}x{size}x3 patch, got {s.image.shape}")

    images = np.stack([s.image for s in samples])
    glands = np.stack([s.targets.gland for s in samples]).astype(np.float32)
    contours = np.stack([s.targets.contour for s in samples]).astype(np.float32)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)

    model = init_params(DualDecoderUNet(net_cfg), cfg.seed)
    params = dict(model.named_parameters())
    state = OptimizerState.for_params(params)

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / LOSS_LOG_NAME, "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(LOSS_LOG_FIELDS)

    result = TrainResult(model)
    global_step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            model.train()
            epoch_losses, epoch_dices = [], []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x, tg, tc = _batch_tensors(images, glands, contours, idx)
                gland, contour = model(x)
                loss, loss_g, loss_c = total_loss(gland, tg, contour, tc, cfg)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch} step {global_step + 1}"
                    )
                model.zero_grad()
                loss.backward()
                grads = {name: p.grad for name, p in params.items()}
                rmsprop_step(params, grads, state, cfg)

                with torch.no_grad():
                    dice = pixel_dice(gland.detach().numpy() >= 0.5, glands[idx] >= 0.5)
                global_step += 1
                row = StepLog(epoch, global_step, loss.item(), loss_g.item(),
                              loss_c.item(), float(dice))
                result.log.append(row)
                epoch_losses.append(row.loss_total)
                epoch_dices.append(row.pixel_dice)
                if writer is not None:
                    writer.writerow([row.epoch, row.step, repr(row.loss_total),
                                     repr(row.loss_gland), repr(row.loss_contour),
                                     repr(row.pixel_dice)])
                if max_steps is not None and global_step >= max_steps:
                    break
            log.info("epoch %d/%d: mean loss %.4f, mean pixel dice %.4f",
                     epoch, cfg.epochs, np.mean(epoch_losses), np.mean(epoch_dices))
            if out_dir is not None:
                if csv_file is not None:
                    csv_file.flush()
                    os.fsync(csv_file.fileno())
                save_checkpoint(out_dir / CHECKPOINT_NAME, model)
            if max_steps is not None and global_step >= max_steps:
                break
    finally:
        if csv_file is not None:
            csv_file.close()
    return result
