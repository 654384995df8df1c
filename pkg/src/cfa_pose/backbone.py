"""Single-stage hourglass backbone: stem, residual encoder trunk, deconv head.

The stage is split into three parts so a cascade can tap them individually:
the stem downsamples the image 4x, the trunk encodes down to a bottleneck at
1/32 resolution while capturing skip tensors, and the head upsamples back to
1/4 resolution with skip additions and predicts one channel per joint.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn as nn

# Downsampling factors: stride-4 stem, then three stride-2 encoder groups.
STEM_STRIDE = 4
TRUNK_STRIDE = 8
TOTAL_STRIDE = STEM_STRIDE * TRUNK_STRIDE

# Residual-branch output is damped at init (final norm scale 0.1) so fresh
# stages start near identity while every weight still receives gradient.
RESIDUAL_NORM_SCALE = 0.1

PRESETS = {
    "mini": dict(stem_channels=8, block_channels=(16, 32, 64), blocks_per_stage=(1, 1, 1), stem_blocks=1),
    "resnet50-like": dict(stem_channels=64, block_channels=(128, 256, 512), blocks_per_stage=(4, 6, 3), stem_blocks=3),
    "resnet101-like": dict(stem_channels=64, block_channels=(128, 256, 512), blocks_per_stage=(4, 23, 3), stem_blocks=3),
    "resnet152-like": dict(stem_channels=64, block_channels=(128, 256, 512), blocks_per_stage=(8, 36, 3), stem_blocks=3),
}


class ShapeError(ValueError):
    """Tensor shape incompatible with the configured architecture."""


@dataclass(frozen=True)
class BackboneConfig:
    """Channel and depth layout of one stage."""

    stem_channels: int
    block_channels: tuple[int, int, int]
    blocks_per_stage: tuple[int, int, int]
    deconv_kernel: int = 4
    num_joints: int = 16
    stem_blocks: int = 1
    preset: str | None = None

    def __post_init__(self):
        if self.stem_channels < 1 or any(c < 1 for c in self.block_channels):
            raise ValueError("channel counts must be positive")
        if len(self.block_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ValueError("expected three encoder groups")
        if any(b < 1 for b in self.blocks_per_stage) or self.stem_blocks < 1:
            raise ValueError("block counts must be positive")
        if self.deconv_kernel < 2 or self.deconv_kernel % 2 != 0:
            raise ValueError("deconv kernel must be an even integer >= 2")
        if self.num_joints < 1:
            raise ValueError("num_joints must be positive")

    @classmethod
    def from_preset(cls, name: str, num_joints: int = 16) -> "BackboneConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(num_joints=num_joints, preset=name, **PRESETS[name])


@dataclass(frozen=True, eq=False)
class StageFeatures:
    """The three taps a stage exposes to the next one."""

    low: torch.Tensor  # [C1, H/4, W/4] trunk input
    bottleneck: torch.Tensor  # [C4, H/32, W/32]
    heatmaps: torch.Tensor  # [p, H/4, W/4]


@contextmanager
def seed_scope(seed: int | None):
    """Run module construction under a private RNG stream when seeded."""
    if seed is None:
        yield
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            yield


def init_parameters(module: nn.Module) -> None:
    """He fan-in init for (de)convolutions, zeros for biases, unit norm scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, ResidualBlock):
            nn.init.constant_(m.norm2.weight, RESIDUAL_NORM_SCALE)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.norm1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=False)
        if stride != 1 or in_channels != out_channels:
            self.project = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.project = None

    def forward(self, x):
        identity = x if self.project is None else self.project(x)
        branch = self.norm2(self.conv2(self.relu(self.norm1(self.conv1(x)))))
        return self.relu(identity + branch)


def _residual_group(in_channels, out_channels, blocks, stride):
    layers = [ResidualBlock(in_channels, out_channels, stride)]
    layers += [ResidualBlock(out_channels, out_channels) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class _UpLevel(nn.Module):
    """Deconv 2x upsampling plus a 1x1-projected skip addition."""

    def __init__(self, in_channels, out_channels, skip_channels, kernel):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(
            in_channels, out_channels, kernel, stride=2, padding=(kernel - 2) // 2, bias=False
        )
        self.norm = nn.BatchNorm2d(out_channels)
        self.skip_proj = nn.Conv2d(skip_channels, out_channels, 1)
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x, skip):
        up = self.norm(self.deconv(x))
        lateral = self.skip_proj(skip)
        if up.shape != lateral.shape:
            raise ShapeError(
                f"skip tensor {tuple(skip.shape)} maps to {tuple(lateral.shape)}, "
                f"expected {tuple(up.shape)}"
            )
        return self.relu(up + lateral)


class HourglassBackbone(nn.Module):
    """One encoder-decoder stage; later cascade stages drop the stem."""

    def __init__(self, config: BackboneConfig, include_stem: bool = True, seed: int | None = None):
        super().__init__()
        self.config = config
        c1 = config.stem_channels
        c2, c3, c4 = config.block_channels
        b2, b3, b4 = config.blocks_per_stage
        k = config.deconv_kernel
        with seed_scope(seed):
            if include_stem:
                self.stem = nn.Sequential(
                    nn.Conv2d(3, c1, 7, stride=2, padding=3, bias=False),
                    nn.BatchNorm2d(c1),
                    nn.ReLU(inplace=False),
                    nn.MaxPool2d(kernel_size=2, stride=2),
                    *[ResidualBlock(c1, c1) for _ in range(config.stem_blocks)],
                )
            else:
                self.stem = None
            self.group2 = _residual_group(c1, c2, b2, stride=2)
            self.group3 = _residual_group(c2, c3, b3, stride=2)
            self.group4 = _residual_group(c3, c4, b4, stride=2)
            self.up1 = _UpLevel(c4, c3, skip_channels=c3, kernel=k)
            self.up2 = _UpLevel(c3, c2, skip_channels=c2, kernel=k)
            self.up3 = _UpLevel(c2, c1, skip_channels=c1, kernel=k)
            self.predict = nn.Conv2d(c1, config.num_joints, 1)
            init_parameters(self)
            # Small prediction-layer init: outputs start near zero so Adam's
            # moment estimates are not poisoned by a mis-scaled first phase.
            nn.init.normal_(self.predict.weight, std=0.01)
            nn.init.zeros_(self.predict.bias)
        self._verify_wiring()

    def _verify_wiring(self):
        # Construction-time check that predictions land at the stem resolution.
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                if self.stem is not None:
                    low = self.stem_forward(torch.zeros(1, 3, TOTAL_STRIDE, TOTAL_STRIDE))
                else:
                    low = torch.zeros(1, self.config.stem_channels, TRUNK_STRIDE, TRUNK_STRIDE)
                maps = self.head_forward(*self.trunk_forward(low))
            if maps.shape[-2:] != low.shape[-2:] or maps.shape[-3] != self.config.num_joints:
                raise ShapeError(
                    f"head produces {tuple(maps.shape[1:])}, expected "
                    f"[{self.config.num_joints}, {low.shape[-2]}, {low.shape[-1]}]"
                )
        finally:
            self.train(was_training)

    def stem_forward(self, image: torch.Tensor) -> torch.Tensor:
        """Image [*, 3, H, W] -> low-level features at 1/4 resolution."""
        if self.stem is None:
            raise RuntimeError("this stage was built without a stem")
        h, w = image.shape[-2:]
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise ShapeError(f"input {h}x{w} must be divisible by {TOTAL_STRIDE}")
        return self.stem(image)

    def trunk_forward(self, low: torch.Tensor):
        """Low-level features -> (bottleneck, skips at 1/4, 1/8, 1/16)."""
        if low.shape[-3] != self.config.stem_channels:
            raise ShapeError(
                f"trunk expects {self.config.stem_channels} channels, got {low.shape[-3]}"
            )
        r8 = self.group2(low)
        r16 = self.group3(r8)
        bottleneck = self.group4(r16)
        return bottleneck, (low, r8, r16)

    def head_forward(self, bottleneck: torch.Tensor, skips) -> torch.Tensor:
        """Bottleneck + captured skips -> raw per-joint maps at 1/4 resolution."""
        low, r8, r16 = skips
        x = self.up1(bottleneck, r16)
        x = self.up2(x, r8)
        x = self.up3(x, low)
        return self.predict(x)

    def forward(self, image: torch.Tensor) -> StageFeatures:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        low = self.stem_forward(image)
        bottleneck, skips = self.trunk_forward(low)
        maps = self.head_forward(bottleneck, skips)
        if squeeze:
            low, bottleneck, maps = low[0], bottleneck[0], maps[0]
        return StageFeatures(low=low, bottleneck=bottleneck, heatmaps=maps)
