"""Dual-decoder U-Net: one shared contracting path, two expansive paths.

The gland decoder and the contour decoder consume the same encoder skip
tensors and each ends in a 1x1 convolution to 2 channels (background /
foreground) with a per-channel sigmoid; the foreground channel is the
probability map handed downstream.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-3
BN_MOMENTUM = 0.01  # running stats decay by 0.99 per batch
FOREGROUND_CHANNEL = 1
CHECKPOINT_FORMAT = 1


@dataclass
class NetworkConfig:
    depth: int = 4          # number of contracting stages
    base_filters: int = 32  # filters at full resolution, doubled per stage
    kernel: int = 3
    input_size: int = 256
    channels_in: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.input_size % (2 ** self.depth) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^depth = {2 ** self.depth}"
            )


@dataclass
class ProbabilityPair:
    """Per-pixel gland and contour probability maps for one image."""

    gland: np.ndarray    # (H, W) float32 in [0, 1]
    contour: np.ndarray

    def __post_init__(self):
        if self.gland.shape != self.contour.shape:
            raise ValueError(
                f"gland shape {self.gland.shape} != contour shape {self.contour.shape}"
            )


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations in {where}")


class ConvBlock(nn.Module):
    """Two successive [conv -> batch norm -> relu] stages with same padding."""

    def __init__(self, in_channels: int, filters: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(in_channels, filters, kernel, padding=pad)
        self.bn1 = nn.BatchNorm2d(filters, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(filters, filters, kernel, padding=pad)
        self.bn2 = nn.BatchNorm2d(filters, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        _check_finite(x, f"ConvBlock({self.conv1.in_channels}->{self.conv2.out_channels})")
        return x


class UpconvBlock(nn.Module):
    """Nearest x2 upsample -> 2x2 conv -> BN -> relu -> concat skip -> ConvBlock."""

    def __init__(self, in_channels: int, skip_channels: int, filters: int, kernel: int = 3):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        # 2x2 kernel needs one asymmetric pad (bottom/right) to keep the size
        self.pad = nn.ZeroPad2d((0, 1, 0, 1))
        self.conv = nn.Conv2d(in_channels, filters, 2)
        self.bn = nn.BatchNorm2d(filters, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.block = ConvBlock(filters + skip_channels, filters, kernel)

    def forward(self, x, skip):
        expected = (2 * x.shape[-2], 2 * x.shape[-1])
        if tuple(skip.shape[-2:]) != expected:
            raise ValueError(
                f"skip spatial dims {tuple(skip.shape[-2:])} != 2x input dims {expected}"
            )
        up = F.relu(self.bn(self.conv(self.pad(self.upsample(x)))))
        return self.block(torch.cat([up, skip], dim=1))


class DualDecoderUNet(nn.Module):
    """U-Net with two independent expansive paths (gland and contour heads)."""

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        c = self.cfg
        self.pool = nn.MaxPool2d(2)
        self.encoder = nn.ModuleList()
        in_ch = c.channels_in
        for i in range(c.depth):
            filters = c.base_filters * 2 ** i
            self.encoder.append(ConvBlock(in_ch, filters, c.kernel))
            in_ch = filters
        self.bottleneck = ConvBlock(in_ch, c.base_filters * 2 ** c.depth, c.kernel)
        self.gland_decoder = self._make_decoder()
        self.contour_decoder = self._make_decoder()
        self.gland_head = nn.Conv2d(c.base_filters, 2, 1)
        self.contour_head = nn.Conv2d(c.base_filters, 2, 1)

    def _make_decoder(self) -> nn.ModuleList:
        c = self.cfg
        stages = nn.ModuleList()
        in_ch = c.base_filters * 2 ** c.depth
        for i in reversed(range(c.depth)):
            filters = c.base_filters * 2 ** i
            stages.append(UpconvBlock(in_ch, filters, filters, c.kernel))
            in_ch = filters
        return stages

    def forward(self, x):
        """Map a normalized (B, C, S, S) batch to two (B, S, S) probability maps."""
        c = self.cfg
        if x.ndim != 4 or x.shape[1] != c.channels_in or x.shape[-2:] != (c.input_size,) * 2:
            raise ValueError(
                f"expected (B, {c.channels_in}, {c.input_size}, {c.input_size}) input, "
                f"got {tuple(x.shape)}"
            )
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        maps = []
        for decoder, head in ((self.gland_decoder, self.gland_head),
                              (self.contour_decoder, self.contour_head)):
            y = x
            for stage, skip in zip(decoder, reversed(skips)):
                y = stage(y, skip)
            maps.append(torch.sigmoid(head(y))[:, FOREGROUND_CHANNEL])
        return maps[0], maps[1]


def init_params(model: DualDecoderUNet, seed: int) -> DualDecoderUNet:
    """Deterministic init: truncated normal, std 1/sqrt(fan_in); BN identity."""
    torch.manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            std = 1.0 / math.sqrt(fan_in)
            nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            module.reset_parameters()
            module.reset_running_stats()
    return model


def normalize_patches(patches: np.ndarray) -> torch.Tensor:
    """Convert (B, S, S, 3) uint8 patches to normalized (B, 3, S, S) floats."""
    x = torch.from_numpy(np.ascontiguousarray(patches)).to(torch.float32)
    return x.permute(0, 3, 1, 2) / 255.0


def forward_infer(model: DualDecoderUNet, patches: np.ndarray) -> list[ProbabilityPair]:
    """Run infer-mode forward on a batch of uint8 patches."""
    model.eval()
    with torch.no_grad():
        gland, contour = model(normalize_patches(patches))
    g = gland.numpy().astype(np.float32)
    c = contour.numpy().astype(np.float32)
    return [ProbabilityPair(g[i], c[i]) for i in range(g.shape[0])]


def output_gradients(model: DualDecoderUNet,
                     outputs: tuple[torch.Tensor, torch.Tensor],
                     grad_outputs: tuple[torch.Tensor, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Backpropagate gradients w.r.t. the two output maps to all parameters.

    BN running statistics are buffers, not parameters, and receive no
    gradient.
    """
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(outputs, params, grad_outputs=grad_outputs)
    return dict(zip(names, grads))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: DualDecoderUNet) -> None:
    """Atomically write config + all tensors (params and BN running stats)."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "state": model.state_dict(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> DualDecoderUNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format in {path}")
    model = DualDecoderUNet(NetworkConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
