"""Independent reference implementations used to check the library.

Everything here is deliberately written with explicit scalar loops or plain
finite differences, sharing no code with the package under test.
"""

import math

import numpy as np
import torch


def fuse_oracle(window, mode="eq5"):
    """Elementwise scalar-loop recomputation of window fusion."""
    arrays = [np.asarray(m, dtype=np.float64) for m in window]
    n = len(arrays)
    out = np.zeros_like(arrays[0])
    flat = [a.reshape(-1) for a in arrays]
    out_flat = out.reshape(-1)
    for i in range(out_flat.size):
        if mode == "eq5":
            total = 0.0
            for a in flat:
                total += a[i] * a[i]
            out_flat[i] = math.sqrt(total) / n
        else:
            total = 0.0
            for a in flat:
                total += a[i]
            out_flat[i] = total / n
    return out


def flip_average_oracle(original, from_flipped, perm):
    """Mirror horizontally, permute channels, average, all with loops."""
    original = np.asarray(original, dtype=np.float64)
    from_flipped = np.asarray(from_flipped, dtype=np.float64)
    p, height, width = original.shape
    out = np.zeros_like(original)
    for j in range(p):
        for v in range(height):
            for u in range(width):
                unflipped = from_flipped[perm[j], v, width - 1 - u]
                out[j, v, u] = (original[j, v, u] + unflipped) / 2.0
    return out


def pckh_brute_force(preds_by_id, gts, groups, alpha):
    """Loop-based PCKh; preds_by_id maps image_id -> list of (x, y)."""
    group_correct = {name: 0 for name, _ in groups}
    group_count = {name: 0 for name, _ in groups}
    total_correct = 0
    total_count = 0
    for ann in gts:
        pred = preds_by_id[ann.image_id]
        for j in range(len(ann.keypoints)):
            if not ann.visibility[j]:
                continue
            dx = pred[j][0] - ann.keypoints[j][0]
            dy = pred[j][1] - ann.keypoints[j][1]
            dist = math.sqrt(dx * dx + dy * dy)
            ok = dist <= alpha * ann.head_length
            total_count += 1
            total_correct += 1 if ok else 0
            for name, indices in groups:
                if j in indices:
                    group_count[name] += 1
                    group_correct[name] += 1 if ok else 0
    per_group = {
        name: group_correct[name] / group_count[name] if group_count[name] else 0.0
        for name, _ in groups
    }
    total = total_correct / total_count if total_count else 0.0
    return per_group, total


def loss_oracle(stage_maps, target, visibility, weights):
    """Scalar-loop recomputation of the per-stage supervised MSE."""
    target = np.asarray(target, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    if target.ndim == 3:
        target = target[None]
        visibility = visibility[None]
    maps = [np.asarray(m, dtype=np.float64) for m in stage_maps]
    maps = [m[None] if m.ndim == 3 else m for m in maps]
    batch, p, height, width = target.shape
    visible_cells = int(visibility.sum()) * height * width
    total = 0.0
    for weight, stage in zip(weights, maps):
        accum = 0.0
        for b in range(batch):
            for j in range(p):
                if not visibility[b, j]:
                    continue
                for v in range(height):
                    for u in range(width):
                        diff = stage[b, j, v, u] - target[b, j, v, u]
                        accum += diff * diff
        total += weight * accum / visible_cells
    return total


def elementwise_sum_oracle(terms):
    """Explicit loop addition of equally-shaped arrays."""
    arrays = [np.asarray(t, dtype=np.float64) for t in terms]
    out = np.zeros_like(arrays[0])
    flat = [a.reshape(-1) for a in arrays]
    out_flat = out.reshape(-1)
    for i in range(out_flat.size):
        total = 0.0
        for a in flat:
            total += a[i]
        out_flat[i] = total
    return out


def fd_relative_errors(loss_fn, picks, step_scale=1e-5, floor=1e-6):
    """Central finite differences against autograd for selected parameters.

    picks: list of (tensor, flat_index). Returns one relative error per pick,
    |analytic - fd| / max(|analytic|, |fd|, floor) with h = step_scale *
    max(1, |theta|).
    """
    params = {id(t): t for t, _ in picks}
    for t in params.values():
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    errors = []
    with torch.no_grad():
        for tensor, idx in picks:
            flat = tensor.reshape(-1)
            analytic = tensor.grad.reshape(-1)[idx].item()
            theta = flat[idx].item()
            h = step_scale * max(1.0, abs(theta))
            flat[idx] = theta + h
            f_plus = loss_fn().item()
            flat[idx] = theta - h
            f_minus = loss_fn().item()
            flat[idx] = theta
            fd = (f_plus - f_minus) / (2.0 * h)
            errors.append(abs(analytic - fd) / max(abs(analytic), abs(fd), floor))
    return errors


def pick_parameters(model, rng, groups, per_group=4, extra=20):
    """Sample (tensor, flat_index) picks covering every named group.

    groups: dict name -> substring that must appear in the parameter name.
    Returns (picks, covered) where covered maps group names to pick counts.
    """
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    picks = []
    covered = {}
    for group, token in groups.items():
        members = [(n, p) for n, p in named if token in n]
        assert members, f"no parameters match group {group!r} ({token!r})"
        covered[group] = 0
        for _ in range(per_group):
            name, tensor = members[rng.integers(len(members))]
            idx = int(rng.integers(tensor.numel()))
            picks.append((tensor, idx))
            covered[group] += 1
    for _ in range(extra):
        name, tensor = named[rng.integers(len(named))]
        picks.append((tensor, int(rng.integers(tensor.numel()))))
    return picks, covered
