"""Gaussian heatmap targets, argmax decoding, multi-map fusion, flip averaging.

A heatmap is a [p, H, W] tensor (optionally with a leading batch axis), one
channel per joint. Target channels peak at exactly 1.0 on the keypoint cell;
fusion and flip averaging operate on raw network outputs as well.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .schema import SkeletonSpec

# Gaussian tail below this is clamped to zero in encoded targets.
TARGET_FLOOR = 1e-4

FUSION_MODES = ("eq5", "mean")


@dataclass(frozen=True)
class HeatmapGeometry:
    """Heatmap grid size, its stride relative to the image, and target width."""

    height: int
    width: int
    stride: int  # image pixels per heatmap cell
    sigma: float  # Gaussian std, in heatmap cells

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("heatmap dimensions must be positive")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def image_height(self) -> int:
        return self.height * self.stride

    @property
    def image_width(self) -> int:
        return self.width * self.stride

    @classmethod
    def for_image(cls, image_size: int, stride: int = 4, sigma: float = 2.0) -> "HeatmapGeometry":
        if image_size % stride != 0:
            raise ValueError(f"image size {image_size} not divisible by stride {stride}")
        side = image_size // stride
        return cls(height=side, width=side, stride=stride, sigma=sigma)


def encode_heatmaps(
    keypoints,
    visibility,
    geom: HeatmapGeometry,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Render one Gaussian channel per joint, peak 1.0 at the keypoint cell.

    Invisible joints produce an all-zero channel. Visible keypoints must lie
    inside [0, image_width) x [0, image_height).
    """
    kps = np.asarray(keypoints, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    if kps.shape != (len(vis), 2):
        raise ValueError(f"expected {len(vis)} (x, y) keypoints, got shape {kps.shape}")

    vv, uu = np.mgrid[0 : geom.height, 0 : geom.width]
    maps = np.zeros((len(vis), geom.height, geom.width), dtype=np.float64)
    for j, ((x, y), visible) in enumerate(zip(kps, vis)):
        if not visible:
            continue
        if not (0 <= x < geom.image_width and 0 <= y < geom.image_height):
            raise ValueError(f"visible keypoint {j} at ({x}, {y}) outside image bounds")
        cu = int(np.floor(x / geom.stride))
        cv = int(np.floor(y / geom.stride))
        g = np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2.0 * geom.sigma**2))
        g[g < TARGET_FLOOR] = 0.0
        maps[j] = g
    return torch.from_numpy(maps).to(dtype)


def decode_heatmaps(maps, geom: HeatmapGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel argmax decode to image-pixel keypoints and peak scores.

    Ties break to the smallest row, then the smallest column. The keypoint is
    the center of the winning cell: ((u + 0.5) * stride, (v + 0.5) * stride).
    """
    if isinstance(maps, torch.Tensor):
        maps = maps.detach().cpu().numpy()
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ValueError(f"expected [p, H, W] heatmaps, got shape {maps.shape}")
    p, height, width = maps.shape
    flat = maps.reshape(p, -1)
    idx = flat.argmax(axis=1)  # first occurrence: smallest row, then column
    v, u = np.divmod(idx, width)
    keypoints = np.stack([(u + 0.5) * geom.stride, (v + 0.5) * geom.stride], axis=1)
    scores = flat[np.arange(p), idx]
    return keypoints.astype(np.float64), scores.astype(np.float64)


def _stack_window(window) -> torch.Tensor:
    if len(window) == 0:
        raise ValueError("fusion window is empty")
    tensors = [torch.as_tensor(m) for m in window]
    shape = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if t.shape != shape:
            raise ValueError(f"window member {i} has shape {tuple(t.shape)}, expected {tuple(shape)}")
    return torch.stack(tensors, dim=0)


def fuse_heatmaps(window, mode: str = "eq5") -> torch.Tensor:
    """Combine the heatmaps of a trailing window of stages into one map.

    ``eq5``: sqrt(sum of squares) / n.  ``mean``: plain arithmetic mean.
    The reduction runs over value-sorted operands so that reordering the
    window cannot change the result, and it is differentiable.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    stacked = _stack_window(window)
    n = stacked.shape[0]
    if mode == "mean":
        ordered = torch.sort(stacked, dim=0).values
        return ordered.sum(dim=0) / n
    squares = torch.sort(stacked * stacked, dim=0).values
    # 1e-30 is below one float64 ulp of any realistic activation; it only
    # keeps the sqrt gradient finite where every stage is exactly zero.
    return torch.sqrt(squares.sum(dim=0) + 1e-30) / n


def flip_average(original, from_flipped, skel: SkeletonSpec) -> torch.Tensor:
    """Average a heatmap with one predicted from the mirrored image.

    The second map is mirrored back horizontally and its channels are
    permuted by the skeleton's left/right pairs before averaging.
    """
    original = torch.as_tensor(original)
    from_flipped = torch.as_tensor(from_flipped)
    if original.shape != from_flipped.shape:
        raise ValueError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(from_flipped.shape)}"
        )
    if original.dim() < 3:
        raise ValueError("expected [..., p, H, W] heatmaps")
    perm = torch.as_tensor(skel.flip_permutation(), device=original.device)
    unflipped = from_flipped.index_select(original.dim() - 3, perm).flip(-1)
    return (original + unflipped) / 2


def save_heatmap_dump(maps, geom: HeatmapGeometry, path) -> None:
    """Debug dump: 4 little-endian int32 (p, H, W, stride), then float32 values."""
    if isinstance(maps, torch.Tensor):
        maps = maps.detach().cpu().numpy()
    maps = np.ascontiguousarray(maps, dtype="<f4")
    p, height, width = maps.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4i", p, height, width, geom.stride))
        fh.write(maps.tobytes())


def load_heatmap_dump(path) -> tuple[np.ndarray, int]:
    """Read a dump written by :func:`save_heatmap_dump`; returns (values, stride)."""
    raw = Path(path).read_bytes()
    p, height, width, stride = struct.unpack_from("<4i", raw)
    values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(p, height, width)
    return values.astype(np.float32), stride
