"""Multi-stage cascade: cross-stage input aggregation, heatmap recurrence,
window fusion, and progressive stage growth.

Stage 1 runs a full hourglass on the image. Every later stage has no stem:
its trunk input is the sum of three learnable maps of the previous stage's
taps (low-level features, bottleneck, heatmaps), and its prediction adds a
rectified 1x1 map of the previous stage's heatmaps so confident peaks carry
forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import (
    BackboneConfig,
    HourglassBackbone,
    ShapeError,
    StageFeatures,
    init_parameters,
    seed_scope,
)
from .heatmaps import FUSION_MODES, fuse_heatmaps

# The previous-stage heatmap map starts as a small positive constant: near
# enough to a zero map that stage outputs begin at the raw prediction, while
# keeping the rectifier active so its weights receive gradient.
BOOST_BIAS_INIT = 1e-2


@dataclass(frozen=True)
class CascadeConfig:
    """Per-stage backbone configs plus fusion settings."""

    stage_configs: tuple[BackboneConfig, ...]
    fusion_window: int
    fusion_mode: str = "eq5"
    rectified_boost: bool = True

    def __post_init__(self):
        if len(self.stage_configs) < 1:
            raise ValueError("at least one stage is required")
        if not 1 <= self.fusion_window <= len(self.stage_configs):
            raise ValueError(
                f"fusion window {self.fusion_window} outside [1, {len(self.stage_configs)}]"
            )
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        joints = {cfg.num_joints for cfg in self.stage_configs}
        if len(joints) != 1:
            raise ValueError(f"stages disagree on joint count: {sorted(joints)}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_configs)

    @property
    def num_joints(self) -> int:
        return self.stage_configs[0].num_joints

    @classmethod
    def of(
        cls,
        num_stages: int,
        first_preset: str = "resnet101-like",
        rest_preset: str = "resnet50-like",
        num_joints: int = 16,
        fusion_window: int | None = None,
        fusion_mode: str = "eq5",
        rectified_boost: bool = True,
    ) -> "CascadeConfig":
        """Default ladder: a deeper first stage, shallower later stages."""
        configs = [BackboneConfig.from_preset(first_preset, num_joints)]
        configs += [
            BackboneConfig.from_preset(rest_preset, num_joints) for _ in range(num_stages - 1)
        ]
        if fusion_window is None:
            fusion_window = min(3, num_stages)
        return cls(tuple(configs), fusion_window, fusion_mode, rectified_boost)


@dataclass(eq=False)
class CascadeOutput:
    """Per-stage heatmaps plus the fused map of the trailing window."""

    stage_heatmaps: list[torch.Tensor]
    fused: torch.Tensor


class StageAggregator(nn.Module):
    """Learnable maps feeding one stage from the previous stage's taps.

    low_proj       1x1 on low-level features (identity at init when square)
    bottleneck_up  deconv chain lifting the bottleneck to low resolution
    heatmap_proj   1x1 lifting heatmap channels to feature channels
    heatmap_boost  rectified 1x1 heatmap-to-heatmap refinement term
    """

    def __init__(
        self,
        prev_low_channels: int,
        prev_bottleneck_channels: int,
        num_joints: int,
        out_channels: int,
        upsample_steps: int = 3,
        deconv_kernel: int = 4,
        rectified: bool = True,
    ):
        super().__init__()
        self.rectified = rectified
        self.low_proj = nn.Conv2d(prev_low_channels, out_channels, 1)
        chain = []
        channels = prev_bottleneck_channels
        for _ in range(upsample_steps):
            chain += [
                nn.ConvTranspose2d(
                    channels, out_channels, deconv_kernel,
                    stride=2, padding=(deconv_kernel - 2) // 2, bias=False,
                ),
                nn.BatchNorm2d(out_channels),
                nn.ReLU(inplace=False),
            ]
            channels = out_channels
        chain.append(nn.Conv2d(out_channels, out_channels, 1))
        self.bottleneck_up = nn.Sequential(*chain)
        self.heatmap_proj = nn.Conv2d(num_joints, out_channels, 1)
        self.heatmap_boost = nn.Conv2d(num_joints, num_joints, 1)
        init_parameters(self)
        if prev_low_channels == out_channels:
            with torch.no_grad():
                self.low_proj.weight.copy_(
                    torch.eye(out_channels).view(out_channels, out_channels, 1, 1)
                )
        nn.init.zeros_(self.heatmap_boost.weight)
        nn.init.constant_(self.heatmap_boost.bias, BOOST_BIAS_INIT)

    def aggregate_inputs(self, prev: StageFeatures) -> torch.Tensor:
        """Sum of the three mapped sources; the next stage's trunk input."""
        low = self.low_proj(prev.low)
        mid = self.bottleneck_up(prev.bottleneck)
        high = self.heatmap_proj(prev.heatmaps)
        if mid.shape != low.shape:
            raise ShapeError(
                f"bottleneck_up produced {tuple(mid.shape)}, expected {tuple(low.shape)}"
            )
        if high.shape != low.shape:
            raise ShapeError(
                f"heatmap_proj produced {tuple(high.shape)}, expected {tuple(low.shape)}"
            )
        return low + mid + high

    def boost(self, prev_heatmaps: torch.Tensor) -> torch.Tensor:
        """Nonnegative (when rectified) additive term from previous heatmaps."""
        out = self.heatmap_boost(prev_heatmaps)
        return torch.relu(out) if self.rectified else out


def combine_stage_heatmaps(
    raw: torch.Tensor,
    prev: torch.Tensor | None,
    aggregator: StageAggregator | None,
) -> torch.Tensor:
    """Stage heatmap recurrence: the first stage passes its raw prediction
    through, later stages add the boosted previous-stage heatmaps."""
    if prev is None:
        return raw
    if aggregator is None:
        raise ValueError("an aggregator is required when previous heatmaps are given")
    if prev.shape != raw.shape:
        raise ShapeError(f"previous heatmaps {tuple(prev.shape)} vs raw {tuple(raw.shape)}")
    return raw + aggregator.boost(prev)


class CascadePose(nn.Module):
    """The full multi-stage model."""

    def __init__(self, config: CascadeConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        with seed_scope(seed):
            self.stages = nn.ModuleList(
                HourglassBackbone(cfg, include_stem=(j == 0))
                for j, cfg in enumerate(config.stage_configs)
            )
            self.aggregators = nn.ModuleList(
                StageAggregator(
                    prev_low_channels=prev.stem_channels,
                    prev_bottleneck_channels=prev.block_channels[-1],
                    num_joints=config.num_joints,
                    out_channels=cur.stem_channels,
                    deconv_kernel=cur.deconv_kernel,
                    rectified=config.rectified_boost,
                )
                for prev, cur in zip(config.stage_configs, config.stage_configs[1:])
            )

    @property
    def num_stages(self) -> int:
        return self.config.num_stages

    def forward(self, image: torch.Tensor) -> CascadeOutput:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        feats = self.stages[0](image)
        heatmaps = [feats.heatmaps]
        for stage, aggregator in zip(self.stages[1:], self.aggregators):
            low = aggregator.aggregate_inputs(feats)
            bottleneck, skips = stage.trunk_forward(low)
            raw = stage.head_forward(bottleneck, skips)
            maps = combine_stage_heatmaps(raw, heatmaps[-1], aggregator)
            feats = StageFeatures(low=low, bottleneck=bottleneck, heatmaps=maps)
            heatmaps.append(maps)
        fused = fuse_heatmaps(heatmaps[-self.config.fusion_window :], self.config.fusion_mode)
        if squeeze:
            heatmaps = [m[0] for m in heatmaps]
            fused = fused[0]
        return CascadeOutput(stage_heatmaps=heatmaps, fused=fused)


def grow_cascade(
    model: CascadePose,
    new_stage_config: BackboneConfig,
    seed: int | None = None,
) -> CascadePose:
    """Return an (M+1)-stage cascade: stages 1..M keep their exact parameters
    (and normalization statistics), the appended stage starts fresh.

    Because stage outputs depend only on earlier stages, the grown model's
    first M heatmaps are bitwise identical to the original's.
    """
    if new_stage_config.num_joints != model.config.num_joints:
        raise ShapeError(
            f"new stage predicts {new_stage_config.num_joints} joints, "
            f"cascade uses {model.config.num_joints}"
        )
    config = CascadeConfig(
        stage_configs=model.config.stage_configs + (new_stage_config,),
        fusion_window=model.config.fusion_window,
        fusion_mode=model.config.fusion_mode,
        rectified_boost=model.config.rectified_boost,
    )
    grown = CascadePose(config, seed=seed)
    missing, unexpected = grown.load_state_dict(model.state_dict(), strict=False)
    fresh_prefixes = (f"stages.{model.num_stages}.", f"aggregators.{model.num_stages - 1}.")
    assert not unexpected, unexpected
    assert all(key.startswith(fresh_prefixes) for key in missing), missing
    grown.train(model.training)
    return grown
