"""Training and evaluation loops: per-stage supervised MSE on heatmaps,
Adam with a stepped learning-rate schedule, flip-test evaluation, and
trailing-window fusion before decoding.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .cascade import CascadeOutput, CascadePose
from .heatmaps import HeatmapGeometry, decode_heatmaps, encode_heatmaps, flip_average, fuse_heatmaps
from .metrics import PCKhReport, pckh
from .schema import PersonAnnotation, PoseSample, PredictionRecord, SkeletonSpec, mpii_skeleton
from .synth import AugmentRanges, augment, sample_augment_params, worker_count


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 5e-4
    lr_decay_factor: float = 0.3
    lr_decay_epochs: tuple[int, ...] = (6, 10, 13)
    epochs: int = 15
    optimizer: str = "adam"
    stage_loss_weights: tuple[float, ...] | None = None  # None: all ones
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.stage_loss_weights is not None:
            if any(w < 0 for w in self.stage_loss_weights) or not any(
                w > 0 for w in self.stage_loss_weights
            ):
                raise ValueError("stage weights must be >= 0 with at least one > 0")


@dataclass(frozen=True)
class EvalConfig:
    use_flip_test: bool = True
    fusion_window: int | None = None  # None: the model's own setting
    fusion_mode: str | None = None
    alpha: float = 0.5


@dataclass
class TrainLog:
    entries: list[tuple[int, int, float, float]] = field(default_factory=list)  # epoch, iter, lr, loss

    def record(self, epoch: int, iteration: int, lr: float, loss: float):
        self.entries.append((epoch, iteration, lr, loss))

    def epoch_mean(self, epoch: int) -> float:
        losses = [loss for e, _, _, loss in self.entries if e == epoch]
        return sum(losses) / len(losses)

    def lines(self) -> list[str]:
        return [f"{e},{i},{lr:.10g},{loss:.10g}" for e, i, lr, loss in self.entries]


def heatmap_loss(
    output: CascadeOutput | list[torch.Tensor],
    target: torch.Tensor,
    visibility,
    stage_weights=None,
) -> torch.Tensor:
    """Weighted sum of per-stage MSE against the target heatmaps.

    The mean runs over visible-joint channels and cells only; the fused map
    is never part of the loss.
    """
    stage_maps = output.stage_heatmaps if isinstance(output, CascadeOutput) else list(output)
    if stage_weights is None:
        stage_weights = [1.0] * len(stage_maps)
    if len(stage_weights) != len(stage_maps):
        raise ValueError(f"{len(stage_weights)} weights for {len(stage_maps)} stages")
    if not any(w > 0 for w in stage_weights):
        raise ValueError("at least one stage weight must be positive")

    first = stage_maps[0]
    target = torch.as_tensor(target, dtype=first.dtype)
    vis = torch.as_tensor(visibility, dtype=torch.bool)
    if first.dim() == 3:
        stage_maps = [m.unsqueeze(0) for m in stage_maps]
        target = target.unsqueeze(0)
        vis = vis.unsqueeze(0) if vis.dim() == 1 else vis
    if target.shape != stage_maps[0].shape:
        raise ValueError(f"target {tuple(target.shape)} vs maps {tuple(stage_maps[0].shape)}")
    mask = vis.to(first.dtype)[:, :, None, None]
    cells = target.shape[-2] * target.shape[-1]
    denom = mask.sum() * cells
    if denom.item() == 0:
        raise ValueError("no visible joints to supervise")

    total = stage_maps[0].new_zeros(())
    for weight, maps in zip(stage_weights, stage_maps):
        squared = (maps - target) ** 2
        total = total + weight * (squared * mask).sum() / denom
    return total


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise-constant rate; the decay takes effect after each listed
    (1-indexed) epoch finishes."""
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    steps = sum(1 for boundary in cfg.lr_decay_epochs if boundary < epoch)
    return cfg.lr * cfg.lr_decay_factor**steps


def _encode_target(sample: PoseSample, geom: HeatmapGeometry):
    ann = sample.annotation
    target = encode_heatmaps(ann.keypoints, ann.visibility, geom)
    vis = torch.tensor(ann.visibility, dtype=torch.bool)
    return target, vis


def _prepare_batch(samples, geom, augment_fn, workers):
    if augment_fn is not None:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                samples = list(pool.map(augment_fn, samples))
        else:
            samples = [augment_fn(s) for s in samples]
    images = torch.stack([s.image for s in samples])
    encoded = [_encode_target(s, geom) for s in samples]
    targets = torch.stack([t for t, _ in encoded])
    vis = torch.stack([v for _, v in encoded])
    return images, targets, vis


def train(
    model: CascadePose,
    samples: list[PoseSample],
    cfg: TrainConfig,
    geom: HeatmapGeometry,
    skel: SkeletonSpec | None = None,
    augment_ranges: AugmentRanges | None = None,
    epoch_callback=None,
) -> tuple[CascadePose, TrainLog]:
    """Adam training with per-stage supervision.

    Deterministic given cfg.seed: sample order and per-sample augmentation
    derive from (seed, epoch, sample index), so results do not depend on
    batch assembly order. ``epoch_callback(epoch, model)`` may return True
    to stop early.
    """
    if not samples:
        raise ValueError("dataset is empty")
    skel = skel or mpii_skeleton()
    log = TrainLog()
    if cfg.epochs == 0:
        return model, log

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    order_rng = np.random.default_rng([cfg.seed, 104729])
    workers = worker_count()
    weights = cfg.stage_loss_weights
    model.train()

    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_for_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = order_rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            if augment_ranges is not None:
                def augment_sample(pair, _ranges=augment_ranges, _epoch=epoch):
                    idx, sample = pair
                    rng = np.random.default_rng([cfg.seed, 7919, _epoch, int(idx)])
                    return augment(sample, sample_augment_params(rng, _ranges), skel)

                batch = [(int(i), samples[int(i)]) for i in batch_idx]
                images, targets, vis = _prepare_batch(batch, geom, augment_sample, workers)
            else:
                batch = [samples[int(i)] for i in batch_idx]
                images, targets, vis = _prepare_batch(batch, geom, None, workers)

            output = model(images)
            loss = heatmap_loss(output, targets, vis, weights)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, iteration {iteration}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            iteration += 1
            log.record(epoch, iteration, lr, loss.item())
        if epoch_callback is not None and epoch_callback(epoch, model):
            break
    return model, log


def fused_from_stage_maps(stage_maps, window: int, mode: str) -> torch.Tensor:
    """The trailing-window fusion evaluation uses before decoding."""
    if not 1 <= window <= len(stage_maps):
        raise ValueError(f"fusion window {window} outside [1, {len(stage_maps)}]")
    return fuse_heatmaps(stage_maps[-window:], mode)


def _records_from_maps(maps, geom, image_ids) -> list[PredictionRecord]:
    records = []
    for b, image_id in enumerate(image_ids):
        keypoints, scores = decode_heatmaps(maps[b], geom)
        records.append(
            PredictionRecord(
                image_id=image_id,
                keypoints=tuple((float(x), float(y)) for x, y in keypoints),
                scores=tuple(max(0.0, float(s)) for s in scores),
            )
        )
    return records


@dataclass
class EvalResult:
    stage_reports: list[PCKhReport]
    fused_report: PCKhReport
    records: list[PredictionRecord]  # decoded from the fused maps
    stage_records: list[list[PredictionRecord]]


def predict_maps(model, images: torch.Tensor, use_flip_test: bool, skel: SkeletonSpec):
    """Per-stage heatmaps for a batch, flip-averaged when requested."""
    output = model(images)
    stage_maps = [m.detach() for m in output.stage_heatmaps]
    if use_flip_test:
        flipped_out = model(torch.flip(images, dims=[-1]))
        stage_maps = [
            flip_average(m, f.detach(), skel)
            for m, f in zip(stage_maps, flipped_out.stage_heatmaps)
        ]
    return stage_maps


def evaluate(
    model,
    samples: list[PoseSample],
    cfg: EvalConfig,
    geom: HeatmapGeometry,
    skel: SkeletonSpec | None = None,
    batch_size: int = 8,
) -> EvalResult:
    """Per-stage and fused PCKh on a dataset, plus final prediction records."""
    if not samples:
        raise ValueError("dataset is empty")
    skel = skel or mpii_skeleton()
    model.eval()

    stage_records: list[list[PredictionRecord]] = []
    fused_records: list[PredictionRecord] = []
    annotations: list[PersonAnnotation] = [s.annotation for s in samples]

    model_config = getattr(model, "config", None)
    window = cfg.fusion_window
    if window is None and model_config is not None:
        window = model_config.fusion_window
    mode = cfg.fusion_mode
    if mode is None:
        mode = model_config.fusion_mode if model_config is not None else "eq5"

    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            images = torch.stack([s.image for s in batch])
            ids = [s.annotation.image_id for s in batch]
            stage_maps = predict_maps(model, images, cfg.use_flip_test, skel)
            if not stage_records:
                stage_records = [[] for _ in stage_maps]
            fused = fused_from_stage_maps(stage_maps, window or len(stage_maps), mode)
            for j, maps in enumerate(stage_maps):
                stage_records[j].extend(_records_from_maps(maps, geom, ids))
            fused_records.extend(_records_from_maps(fused, geom, ids))

    stage_reports = [
        pckh(records, annotations, skel, cfg.alpha) for records in stage_records
    ]
    fused_report = pckh(fused_records, annotations, skel, cfg.alpha)
    return EvalResult(
        stage_reports=stage_reports,
        fused_report=fused_report,
        records=fused_records,
        stage_records=stage_records,
    )
