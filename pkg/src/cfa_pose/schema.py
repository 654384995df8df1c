"""Domain types, skeleton definition, and annotation/prediction file I/O.

Coordinates are (x, y) in image pixels, origin at the top-left corner,
x growing rightwards and y downwards. Joints with ``visibility=False``
carry the sentinel coordinates ``(-1.0, -1.0)`` and are excluded from
losses and metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SENTINEL_XY = (-1.0, -1.0)


class AnnotationError(ValueError):
    """Malformed annotation or prediction record."""


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint set, left/right pairing, limb connectivity, and metric pooling."""

    joint_names: tuple[str, ...]
    flip_pairs: tuple[tuple[int, int], ...]  # (left_index, right_index)
    limbs: tuple[tuple[int, int], ...]  # (parent_index, child_index)
    joint_groups: tuple[tuple[str, tuple[int, ...]], ...]  # metric pooling

    def __post_init__(self):
        p = self.num_joints
        seen = set()
        for left, right in self.flip_pairs:
            if not (0 <= left < p and 0 <= right < p):
                raise ValueError(f"flip pair ({left}, {right}) out of range for {p} joints")
            if left == right or left in seen or right in seen:
                raise ValueError(f"joint appears in more than one flip pair: ({left}, {right})")
            seen.update((left, right))
        for parent, child in self.limbs:
            if not (0 <= parent < p and 0 <= child < p):
                raise ValueError(f"limb ({parent}, {child}) out of range for {p} joints")
        for name, indices in self.joint_groups:
            for j in indices:
                if not (0 <= j < p):
                    raise ValueError(f"group {name!r} references joint {j} out of range")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def flip_permutation(self) -> list[int]:
        """Channel/joint permutation applied when an image is mirrored.

        Swapping left and right twice is the identity.
        """
        perm = list(range(self.num_joints))
        for left, right in self.flip_pairs:
            perm[left], perm[right] = right, left
        return perm


def mpii_skeleton() -> SkeletonSpec:
    """The 16-joint MPII body skeleton used throughout as the default."""
    names = (
        "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
        "pelvis", "thorax", "upper_neck", "head_top",
        "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    )
    flip_pairs = ((5, 0), (4, 1), (3, 2), (15, 10), (14, 11), (13, 12))
    limbs = (
        (8, 9), (7, 8), (6, 7),
        (7, 12), (12, 11), (11, 10),
        (7, 13), (13, 14), (14, 15),
        (6, 2), (2, 1), (1, 0),
        (6, 3), (3, 4), (4, 5),
    )
    groups = (
        ("Head", (8, 9)),
        ("Shoulder", (12, 13)),
        ("Elbow", (11, 14)),
        ("Wrist", (10, 15)),
        ("Hip", (2, 3)),
        ("Knee", (1, 4)),
        ("Ankle", (0, 5)),
    )
    return SkeletonSpec(names, flip_pairs, limbs, groups)


@dataclass(frozen=True)
class PersonAnnotation:
    """Ground-truth record for one person in one image."""

    image_id: str
    keypoints: tuple[tuple[float, float], ...]
    visibility: tuple[bool, ...]
    head_length: float  # metric normalizer, pixels
    bbox: tuple[float, float, float, float] | None = None  # (x, y, w, h)
    image_path: str | None = None

    def keypoints_array(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=np.float64)

    def visibility_array(self) -> np.ndarray:
        return np.asarray(self.visibility, dtype=bool)


@dataclass(frozen=True, eq=False)
class PoseSample:
    """One training/eval record: normalized image tensor plus annotation."""

    image: torch.Tensor  # [3, H, W], values in [0, 1]
    annotation: PersonAnnotation


@dataclass(frozen=True)
class PredictionRecord:
    """Predicted keypoints and their peak heatmap responses."""

    image_id: str
    keypoints: tuple[tuple[float, float], ...]
    scores: tuple[float, ...]


def validate_annotation(
    ann: PersonAnnotation,
    skel: SkeletonSpec,
    image_size: tuple[int, int] | None = None,
) -> list[str]:
    """Return all violated invariants; an empty list means the record is valid.

    ``image_size`` is (width, height); when supplied, visible keypoints must
    lie inside [0, width) x [0, height).
    """
    p = skel.num_joints
    violations = []
    if len(ann.keypoints) != p:
        violations.append(f"keypoint count: expected {p}, got {len(ann.keypoints)}")
    if len(ann.visibility) != p:
        violations.append(f"visibility count: expected {p}, got {len(ann.visibility)}")
    if not (math.isfinite(ann.head_length) and ann.head_length > 0):
        violations.append(f"head_length must be positive, got {ann.head_length}")
    if image_size is not None:
        width, height = image_size
        for j, ((x, y), vis) in enumerate(zip(ann.keypoints, ann.visibility)):
            if vis and not (0 <= x < width and 0 <= y < height):
                violations.append(f"out of bounds: joint {j} at ({x}, {y})")
    return violations


def _parse_annotation(record: dict, index: int, num_joints: int | None) -> PersonAnnotation:
    def fail(field: str, why: str):
        raise AnnotationError(f"record {index}: field {field!r} {why}")

    if not isinstance(record, dict):
        raise AnnotationError(f"record {index}: expected an object, got {type(record).__name__}")
    for key in ("image_id", "keypoints", "visibility", "head_length"):
        if key not in record:
            fail(key, "is missing")

    image_id = record["image_id"]
    if not isinstance(image_id, str):
        fail("image_id", "must be a string")

    raw_kps = record["keypoints"]
    if not isinstance(raw_kps, list) or any(
        not (isinstance(kp, list) and len(kp) == 2) for kp in raw_kps
    ):
        fail("keypoints", "must be an array of [x, y] pairs")
    keypoints = tuple((float(x), float(y)) for x, y in raw_kps)

    raw_vis = record["visibility"]
    if not isinstance(raw_vis, list) or len(raw_vis) != len(keypoints):
        fail("visibility", f"must be an array of {len(keypoints)} 0/1 flags")
    visibility = tuple(bool(v) for v in raw_vis)

    if num_joints is not None and len(keypoints) != num_joints:
        fail("keypoints", f"must have {num_joints} entries, got {len(keypoints)}")

    head_length = record["head_length"]
    if not isinstance(head_length, (int, float)) or not (
        math.isfinite(head_length) and head_length > 0
    ):
        fail("head_length", f"must be a positive number, got {head_length!r}")

    bbox = record.get("bbox")
    if bbox is not None:
        if not (isinstance(bbox, list) and len(bbox) == 4):
            fail("bbox", "must be [x, y, w, h]")
        bbox = tuple(float(v) for v in bbox)

    return PersonAnnotation(
        image_id=image_id,
        keypoints=keypoints,
        visibility=visibility,
        head_length=float(head_length),
        bbox=bbox,
        image_path=record.get("image_path"),
    )


def load_annotations(path, skel: SkeletonSpec | None = None) -> list[PersonAnnotation]:
    """Load an annotation file (JSON array, see README for the schema).

    When ``skel`` is given every record must match its joint count;
    otherwise all records must agree with the first one.
    """
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise AnnotationError("annotation file must contain a top-level array")
    num_joints = skel.num_joints if skel is not None else None
    anns = []
    for i, record in enumerate(raw):
        ann = _parse_annotation(record, i, num_joints)
        if num_joints is None:
            num_joints = len(ann.keypoints)
        anns.append(ann)
    return anns


def save_annotations(anns: list[PersonAnnotation], path) -> None:
    records = []
    for ann in anns:
        record = {
            "image_id": ann.image_id,
            "keypoints": [[x, y] for x, y in ann.keypoints],
            "visibility": [int(v) for v in ann.visibility],
            "head_length": ann.head_length,
        }
        if ann.bbox is not None:
            record["bbox"] = list(ann.bbox)
        if ann.image_path is not None:
            record["image_path"] = ann.image_path
        records.append(record)
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def load_predictions(path) -> list[PredictionRecord]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise AnnotationError("prediction file must contain a top-level array")
    records = []
    for i, record in enumerate(raw):
        if not isinstance(record, dict) or not {"image_id", "keypoints", "scores"} <= set(record):
            raise AnnotationError(f"record {i}: expected image_id, keypoints, scores")
        keypoints = tuple((float(x), float(y)) for x, y in record["keypoints"])
        scores = tuple(float(s) for s in record["scores"])
        if len(scores) != len(keypoints):
            raise AnnotationError(f"record {i}: field 'scores' length mismatch")
        records.append(PredictionRecord(record["image_id"], keypoints, scores))
    return records


def save_predictions(records: list[PredictionRecord], path) -> None:
    """Write predictions as a JSON array; loading reproduces coordinates exactly."""
    out = [
        {
            "image_id": r.image_id,
            "keypoints": [[x, y] for x, y in r.keypoints],
            "scores": list(r.scores),
        }
        for r in records
    ]
    Path(path).write_text(json.dumps(out, indent=2) + "\n")
