"""PCKh evaluation: per-joint-group and total correctness fractions.

A predicted joint is correct when its Euclidean distance to the ground truth
is at most alpha times that person's head segment length (boundary counts as
correct). Only visible ground-truth joints are evaluated. The total is
recomputed from raw joints, not averaged over groups, so joints outside every
group (pelvis, thorax in the default skeleton) still count toward it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .schema import PersonAnnotation, PredictionRecord, SkeletonSpec


@dataclass(frozen=True)
class PCKhReport:
    alpha: float
    per_joint: dict[str, float]  # joint group -> fraction correct
    counts: dict[str, int]  # joint group -> evaluated joints
    total: float
    total_count: int


def pckh(
    preds: list[PredictionRecord],
    gts: list[PersonAnnotation],
    skel: SkeletonSpec,
    alpha: float = 0.5,
) -> PCKhReport:
    by_id = {}
    for record in preds:
        if record.image_id in by_id:
            raise ValueError(f"duplicate prediction for image_id {record.image_id!r}")
        by_id[record.image_id] = record
    missing = sorted(ann.image_id for ann in gts if ann.image_id not in by_id)
    if missing:
        raise ValueError(f"no prediction for image_id(s): {', '.join(missing)}")

    group_correct = {name: 0 for name, _ in skel.joint_groups}
    group_count = {name: 0 for name, _ in skel.joint_groups}
    joint_to_groups = {}
    for name, indices in skel.joint_groups:
        for j in indices:
            joint_to_groups.setdefault(j, []).append(name)

    total_correct = 0
    total_count = 0
    for ann in gts:
        if not ann.head_length > 0:
            raise ValueError(f"{ann.image_id}: head_length must be positive")
        pred = by_id[ann.image_id]
        if len(pred.keypoints) != len(ann.keypoints):
            raise ValueError(f"{ann.image_id}: prediction has {len(pred.keypoints)} joints")
        threshold = alpha * ann.head_length
        for j, visible in enumerate(ann.visibility):
            if not visible:
                continue
            distance = math.dist(pred.keypoints[j], ann.keypoints[j])
            correct = distance <= threshold
            total_count += 1
            total_correct += correct
            for name in joint_to_groups.get(j, ()):
                group_count[name] += 1
                group_correct[name] += correct

    per_joint = {
        name: (group_correct[name] / group_count[name]) if group_count[name] else 0.0
        for name in group_correct
    }
    total = total_correct / total_count if total_count else 0.0
    return PCKhReport(
        alpha=alpha,
        per_joint=per_joint,
        counts=group_count,
        total=total,
        total_count=total_count,
    )


def format_report_table(
    reports: list[tuple[str, PCKhReport]],
    groups: list[str] | None = None,
) -> str:
    """Plain-text table: one row per labelled report, percentages to 2 decimals."""
    if groups is None:
        if reports:
            groups = list(reports[0][1].per_joint)
        else:
            from .schema import mpii_skeleton

            groups = [name for name, _ in mpii_skeleton().joint_groups]
    header = ["", *groups, "Total"]
    rows = [header]
    for label, report in reports:
        cells = [f"{100.0 * report.per_joint[g]:.2f}" for g in groups]
        rows.append([label, *cells, f"{100.0 * report.total:.2f}"])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def reports_to_json(reports: list[tuple[str, PCKhReport]]) -> str:
    """Machine-readable variant: array of {label, per_joint, total}."""
    payload = [
        {"label": label, "per_joint": report.per_joint, "total": report.total}
        for label, report in reports
    ]
    return json.dumps(payload, indent=2)
