"""Deterministic synthetic stick-figure dataset plus keypoint-aware
augmentation (rotation, flip, scale, color jitter).

Every sample is a pure function of (seed, index): an articulated 16-joint
figure with per-limb colors (mirror-symmetric between left and right so a
flipped figure looks like its mirror twin), a head circle whose diameter is
the metric normalizer, optional occluder rectangles, and one of three
background styles.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .backbone import TOTAL_STRIDE
from .schema import (
    SENTINEL_XY,
    PersonAnnotation,
    PoseSample,
    SkeletonSpec,
    mpii_skeleton,
    load_annotations,
    save_annotations,
)

BACKGROUNDS = ("plain", "noise", "clutter")

# Segment lengths in torso units (pelvis->thorax = 1).
_NECK_LEN = 0.25
_HEAD_LEN = 0.34
_SHOULDER_HALF = 0.34
_HIP_HALF = 0.19
_UPPER_ARM = 0.45
_FOREARM = 0.42
_THIGH = 0.62
_SHIN = 0.58

# Joint indices of the default skeleton.
_R_ANKLE, _R_KNEE, _R_HIP, _L_HIP, _L_KNEE, _L_ANKLE = 0, 1, 2, 3, 4, 5
_PELVIS, _THORAX, _NECK, _HEAD_TOP = 6, 7, 8, 9
_R_WRIST, _R_ELBOW, _R_SHOULDER, _L_SHOULDER, _L_ELBOW, _L_WRIST = 10, 11, 12, 13, 14, 15

# Left/right twins share colors so mirrored figures stay consistent.
_LIMB_COLORS = {
    (_NECK, _HEAD_TOP): (250, 220, 60),
    (_THORAX, _NECK): (240, 150, 50),
    (_PELVIS, _THORAX): (230, 90, 60),
    (_THORAX, _R_SHOULDER): (60, 200, 220),
    (_THORAX, _L_SHOULDER): (60, 200, 220),
    (_R_SHOULDER, _R_ELBOW): (70, 130, 245),
    (_L_SHOULDER, _L_ELBOW): (70, 130, 245),
    (_R_ELBOW, _R_WRIST): (150, 90, 240),
    (_L_ELBOW, _L_WRIST): (150, 90, 240),
    (_PELVIS, _R_HIP): (240, 80, 170),
    (_PELVIS, _L_HIP): (240, 80, 170),
    (_R_HIP, _R_KNEE): (90, 220, 110),
    (_L_HIP, _L_KNEE): (90, 220, 110),
    (_R_KNEE, _R_ANKLE): (190, 240, 80),
    (_L_KNEE, _L_ANKLE): (190, 240, 80),
}
_JOINT_COLORS = {
    _R_ANKLE: (250, 250, 250), _L_ANKLE: (250, 250, 250),
    _R_KNEE: (250, 60, 60), _L_KNEE: (250, 60, 60),
    _R_HIP: (60, 250, 60), _L_HIP: (60, 250, 60),
    _PELVIS: (60, 60, 250),
    _THORAX: (250, 250, 60),
    _NECK: (250, 60, 250),
    _HEAD_TOP: (60, 250, 250),
    _R_WRIST: (255, 160, 40), _L_WRIST: (255, 160, 40),
    _R_ELBOW: (160, 255, 40), _L_ELBOW: (160, 255, 40),
    _R_SHOULDER: (40, 160, 255), _L_SHOULDER: (40, 160, 255),
}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    count: int = 16
    image_size: int = 96
    occlusion_prob: float = 0.0
    limb_width: int = 3
    pose_jitter: float = 0.25  # radians std per limb angle
    background: str = "plain"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.image_size % TOTAL_STRIDE != 0:
            raise ValueError(f"image_size must be divisible by {TOTAL_STRIDE}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")


@dataclass(frozen=True)
class AugmentParams:
    """One concrete augmentation; the defaults are the identity."""

    rotation: float = 0.0  # radians about the image center
    flip: bool = False
    scale: float = 1.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0  # fraction of the full hue circle

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class AugmentRanges:
    """Sampling ranges for random augmentation."""

    max_rotation: float = math.pi / 6
    scale_range: tuple[float, float] = (0.75, 1.25)
    flip_prob: float = 0.5
    color_jitter: float = 0.2
    hue_jitter: float = 0.05


def sample_augment_params(rng: np.random.Generator, ranges: AugmentRanges) -> AugmentParams:
    return AugmentParams(
        rotation=float(rng.uniform(-ranges.max_rotation, ranges.max_rotation)),
        flip=bool(rng.random() < ranges.flip_prob),
        scale=float(rng.uniform(*ranges.scale_range)),
        brightness=float(rng.uniform(1 - ranges.color_jitter, 1 + ranges.color_jitter)),
        contrast=float(rng.uniform(1 - ranges.color_jitter, 1 + ranges.color_jitter)),
        saturation=float(rng.uniform(1 - ranges.color_jitter, 1 + ranges.color_jitter)),
        hue=float(rng.uniform(-ranges.hue_jitter, ranges.hue_jitter)),
    )


def _direction(angle: float) -> np.ndarray:
    # angle 0 points straight down in image coordinates, positive leans to +x
    return np.array([math.sin(angle), math.cos(angle)])


def _sample_pose(rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Forward kinematics for one figure, in torso units, y downward."""
    joints = np.zeros((16, 2))
    lean = rng.normal(0.0, 0.3 * jitter + 1e-9)
    up = -_direction(lean)
    right = np.array([up[1], -up[0]])

    joints[_PELVIS] = (0.0, 0.0)
    joints[_THORAX] = joints[_PELVIS] + up
    joints[_NECK] = joints[_THORAX] + _NECK_LEN * -_direction(lean + jitter * rng.normal())
    joints[_HEAD_TOP] = joints[_NECK] + _HEAD_LEN * -_direction(lean + 0.5 * jitter * rng.normal())

    joints[_R_SHOULDER] = joints[_THORAX] - _SHOULDER_HALF * right
    joints[_L_SHOULDER] = joints[_THORAX] + _SHOULDER_HALF * right
    joints[_R_HIP] = joints[_PELVIS] - _HIP_HALF * right
    joints[_L_HIP] = joints[_PELVIS] + _HIP_HALF * right

    for shoulder, elbow, wrist, side in (
        (_R_SHOULDER, _R_ELBOW, _R_WRIST, -1.0),
        (_L_SHOULDER, _L_ELBOW, _L_WRIST, 1.0),
    ):
        upper = side * rng.uniform(0.1, 1.1) + jitter * rng.normal()
        bend = upper + side * rng.uniform(-0.2, 1.0) + jitter * rng.normal()
        joints[elbow] = joints[shoulder] + _UPPER_ARM * _direction(upper)
        joints[wrist] = joints[elbow] + _FOREARM * _direction(bend)

    for hip, knee, ankle, side in (
        (_R_HIP, _R_KNEE, _R_ANKLE, -1.0),
        (_L_HIP, _L_KNEE, _L_ANKLE, 1.0),
    ):
        thigh = side * rng.uniform(0.0, 0.45) + jitter * rng.normal()
        shin = thigh - side * rng.uniform(0.0, 0.5) + 0.5 * jitter * rng.normal()
        joints[knee] = joints[hip] + _THIGH * _direction(thigh)
        joints[ankle] = joints[knee] + _SHIN * _direction(shin)

    return joints


def _fit_to_frame(joints: np.ndarray, rng: np.random.Generator, size: int, margin: float):
    """Scale and place the figure so every joint and the head circle stay
    at least ``margin`` pixels away from the border."""
    head_radius = np.linalg.norm(joints[_HEAD_TOP] - joints[_NECK]) / 2
    head_center = (joints[_HEAD_TOP] + joints[_NECK]) / 2
    lo = np.minimum(joints.min(axis=0), head_center - head_radius)
    hi = np.maximum(joints.max(axis=0), head_center + head_radius)
    usable = size - 2 * margin
    scale = rng.uniform(0.70, 0.95) * usable / max(hi - lo)
    lo, hi = lo * scale, hi * scale
    shift = np.array(
        [
            rng.uniform(margin - lo[0], size - margin - hi[0]),
            rng.uniform(margin - lo[1], size - margin - hi[1]),
        ]
    )
    return joints * scale + shift


def _draw_background(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    base = rng.integers(25, 80, size=3)
    img = np.full((size, size, 3), base, dtype=np.uint8)
    if kind == "noise":
        img = (img.astype(np.int16) + rng.integers(-20, 21, size=img.shape)).clip(0, 255)
        img = img.astype(np.uint8)
    elif kind == "clutter":
        for _ in range(int(rng.integers(4, 9))):
            color = tuple(int(c) for c in rng.integers(0, 120, size=3))
            x0, y0 = rng.integers(0, size, size=2)
            w, h = rng.integers(size // 10, size // 3, size=2)
            if rng.random() < 0.5:
                cv2.rectangle(img, (int(x0), int(y0)), (int(x0 + w), int(y0 + h)), color, -1)
            else:
                cv2.line(img, (int(x0), int(y0)), (int(x0 + w), int(y0 + h)), color,
                         thickness=int(rng.integers(1, 4)), lineType=cv2.LINE_AA)
    return img


_SHIFT = 4  # cv2 subpixel fixed-point bits


def _pt(xy) -> tuple[int, int]:
    return int(round(xy[0] * (1 << _SHIFT))), int(round(xy[1] * (1 << _SHIFT)))


def _draw_figure(img: np.ndarray, joints: np.ndarray, skel: SkeletonSpec, limb_width: int):
    head_center = (joints[_HEAD_TOP] + joints[_NECK]) / 2
    head_radius = np.linalg.norm(joints[_HEAD_TOP] - joints[_NECK]) / 2
    cv2.circle(img, _pt(head_center), int(round(head_radius * (1 << _SHIFT))),
               _LIMB_COLORS[(_NECK, _HEAD_TOP)], thickness=limb_width,
               lineType=cv2.LINE_AA, shift=_SHIFT)
    for parent, child in skel.limbs:
        color = _LIMB_COLORS.get((parent, child), (200, 200, 200))
        cv2.line(img, _pt(joints[parent]), _pt(joints[child]), color,
                 thickness=limb_width, lineType=cv2.LINE_AA, shift=_SHIFT)
    marker = max(2, limb_width - 1)
    for j, xy in enumerate(joints):
        cv2.circle(img, _pt(xy), marker * (1 << _SHIFT), _JOINT_COLORS[j],
                   thickness=-1, lineType=cv2.LINE_AA, shift=_SHIFT)


def _draw_occluders(img, joints, rng: np.random.Generator, size: int, prob: float):
    covered = np.zeros(len(joints), dtype=bool)
    for _ in range(int(rng.binomial(3, prob))):
        target = joints[int(rng.integers(0, len(joints)))]
        half_w = rng.uniform(0.04, 0.10) * size
        half_h = rng.uniform(0.04, 0.10) * size
        cx = target[0] + rng.uniform(-0.02, 0.02) * size
        cy = target[1] + rng.uniform(-0.02, 0.02) * size
        color = tuple(int(c) for c in rng.integers(90, 200, size=3))
        x0, y0 = cx - half_w, cy - half_h
        x1, y1 = cx + half_w, cy + half_h
        cv2.rectangle(img, (int(round(x0)), int(round(y0))), (int(round(x1)), int(round(y1))),
                      color, thickness=-1)
        inside = (
            (joints[:, 0] >= x0) & (joints[:, 0] <= x1)
            & (joints[:, 1] >= y0) & (joints[:, 1] <= y1)
        )
        covered |= inside
    return covered


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 HWC RGB -> float32 [3, H, W] in [0, 1]."""
    return torch.from_numpy(img.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """float [3, H, W] in [0, 1] -> uint8 HWC RGB."""
    arr = tensor.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def generate_sample(cfg: SynthConfig, index: int) -> PoseSample:
    """Render sample ``index``; a pure function of (cfg.seed, index)."""
    if not 0 <= index < cfg.count:
        raise IndexError(f"index {index} outside [0, {cfg.count})")
    rng = np.random.default_rng([cfg.seed, index])
    skel = mpii_skeleton()

    joints = _sample_pose(rng, cfg.pose_jitter)
    margin = cfg.limb_width + 3.0
    joints = _fit_to_frame(joints, rng, cfg.image_size, margin)
    head_length = float(np.linalg.norm(joints[_HEAD_TOP] - joints[_NECK]))

    img = _draw_background(rng, cfg.image_size, cfg.background)
    _draw_figure(img, joints, skel, cfg.limb_width)
    covered = _draw_occluders(img, joints, rng, cfg.image_size, cfg.occlusion_prob)

    visibility = tuple(bool(v) for v in ~covered)
    keypoints = tuple(
        (float(x), float(y)) if vis else SENTINEL_XY
        for (x, y), vis in zip(joints, visibility)
    )
    annotation = PersonAnnotation(
        image_id=f"synth_{cfg.seed}_{index:05d}",
        keypoints=keypoints,
        visibility=visibility,
        head_length=head_length,
    )
    return PoseSample(image=image_to_tensor(img), annotation=annotation)


def generate_dataset(cfg: SynthConfig) -> list[PoseSample]:
    return [generate_sample(cfg, i) for i in range(cfg.count)]


def _affine_matrix(params: AugmentParams, width: int, height: int) -> np.ndarray:
    """Forward 2x3 map: rotate by ``rotation`` and scale about the image
    center, then mirror horizontally when flipping."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    cos, sin = math.cos(params.rotation), math.sin(params.rotation)
    a = params.scale * np.array([[cos, -sin], [sin, cos]])
    t = np.array([cx, cy]) - a @ np.array([cx, cy])
    m = np.hstack([a, t[:, None]])
    if params.flip:
        m[0, :] *= -1
        m[0, 2] += width - 1
    return m


def _apply_color(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Color jitter on a float32 HWC image in [0, 1]; identity values are
    skipped exactly (the HSV round trip is not lossless)."""
    if params.brightness != 1.0:
        img = img * params.brightness
    if params.contrast != 1.0:
        mean = img.mean()
        img = (img - mean) * params.contrast + mean
    if params.saturation != 1.0:
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        img = gray[..., None] + (img - gray[..., None]) * params.saturation
    if params.hue != 0.0:
        hsv = cv2.cvtColor(np.clip(img, 0, 1).astype(np.float32), cv2.COLOR_RGB2HSV)
        hsv[..., 0] = (hsv[..., 0] + params.hue * 360.0) % 360.0
        img = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(sample: PoseSample, params: AugmentParams, skel: SkeletonSpec | None = None) -> PoseSample:
    """Similarity-transform the image and keypoints together, permute joints
    on flips, jitter colors, and scale the metric normalizer."""
    skel = skel or mpii_skeleton()
    _, height, width = sample.image.shape
    img = sample.image.permute(1, 2, 0).numpy().astype(np.float32, copy=True)

    geometric = params.rotation != 0.0 or params.scale != 1.0 or params.flip
    m = _affine_matrix(params, width, height)
    if params.flip and params.rotation == 0.0 and params.scale == 1.0:
        img = img[:, ::-1, :].copy()  # exact mirror, no resampling
    elif geometric:
        img = cv2.warpAffine(img, m, (width, height), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)

    ann = sample.annotation
    kps = ann.keypoints_array()
    vis = list(ann.visibility)
    if params.flip:
        perm = skel.flip_permutation()
        kps = kps[perm]
        vis = [vis[j] for j in perm]
    new_kps = []
    new_vis = []
    for (x, y), visible in zip(kps, vis):
        if not visible:
            new_kps.append(SENTINEL_XY)
            new_vis.append(False)
            continue
        tx, ty = m @ (x, y, 1.0)
        if 0 <= tx < width and 0 <= ty < height:
            new_kps.append((float(tx), float(ty)))
            new_vis.append(True)
        else:
            new_kps.append(SENTINEL_XY)
            new_vis.append(False)

    img = _apply_color(img, params)
    annotation = replace(
        ann,
        keypoints=tuple(new_kps),
        visibility=tuple(new_vis),
        head_length=ann.head_length * params.scale,
    )
    image = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))
    return PoseSample(image=image, annotation=annotation)


def write_ppm(img: np.ndarray, path) -> None:
    """Binary PPM (P6, maxval 255)."""
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected uint8 HxWx3 image")
    height, width = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos] in b" \t\r\n":
            pos += 1
        start = pos
        while pos < len(raw) and raw[pos] not in b" \t\r\n":
            pos += 1
        fields.append(int(raw[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=width * height * 3)
    return data.reshape(height, width, 3).copy()


def write_dataset(cfg: SynthConfig, out_dir) -> list[PoseSample]:
    """Write images (PPM) plus an annotation file; returns the samples."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(cfg)
    annotations = []
    for i, sample in enumerate(samples):
        rel = f"images/{sample.annotation.image_id}.ppm"
        write_ppm(tensor_to_image(sample.image), out / rel)
        annotations.append(replace(sample.annotation, image_path=rel))
    save_annotations(annotations, out / "annotations.json")
    return samples


def load_dataset(data_dir, skel: SkeletonSpec | None = None) -> list[PoseSample]:
    root = Path(data_dir)
    annotations = load_annotations(root / "annotations.json", skel)
    samples = []
    for ann in annotations:
        if ann.image_path is None:
            raise ValueError(f"{ann.image_id}: annotation has no image_path")
        img = read_ppm(root / ann.image_path)
        samples.append(PoseSample(image=image_to_tensor(img), annotation=ann))
    return samples


def worker_count() -> int:
    """Data-loading parallelism cap from the environment (default serial)."""
    value = os.environ.get("CFA_NUM_WORKERS", "")
    try:
        return max(1, int(value))
    except ValueError:
        return 1
