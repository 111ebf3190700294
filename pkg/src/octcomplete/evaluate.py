"""Evaluation drivers: surface distance for completion, grid IoU for scenes."""

import numpy as np

from .data import shape_to_label_grid, voxelize_labels
from .errors import DomainError
from .losses import chamfer_distance, iou
from .network import CompletionNet, sample_points
from .octree import PointSet, build_octree


def identity_baseline(partial: PointSet, complete: PointSet, scale=128.0):
    """Distance of the raw partial input to the ground truth.

    A completion model should beat this number: it measures how much is
    missing when nothing is predicted at all.
    """
    return chamfer_distance(partial, complete, scale=scale)


def eval_completion_sample(
    net: CompletionNet,
    partial: PointSet,
    complete: PointSet,
    samples_per_node=4,
    seed=0,
    scale=128.0,
):
    octree = build_octree(partial, net.spec.input_depth)
    shape = net.complete(octree)
    out = {
        "baseline": identity_baseline(partial, complete, scale=scale),
        "nodes": int(len(shape.leaf_codes)),
    }
    if shape.empty:
        out["chamfer"] = float("inf")
        return out, None
    pred_points = sample_points(shape, samples_per_node=samples_per_node, seed=seed)
    out["chamfer"] = chamfer_distance(pred_points, complete, scale=scale)
    return out, pred_points


def eval_completion(net, pairs, samples_per_node=4, seed=0):
    """Mean metrics over (partial, complete) point-set pairs."""
    if not pairs:
        raise DomainError("nothing to evaluate")
    rows = []
    for i, (partial, complete) in enumerate(pairs):
        metrics, _ = eval_completion_sample(
            net, partial, complete, samples_per_node=samples_per_node, seed=seed + i
        )
        rows.append(metrics)
    return {
        "chamfer": float(np.mean([r["chamfer"] for r in rows])),
        "baseline": float(np.mean([r["baseline"] for r in rows])),
        "per_sample": rows,
    }


def eval_semantic_sample(net: CompletionNet, partial: PointSet, gt_grid):
    octree = build_octree(partial, net.spec.input_depth)
    shape = net.complete(octree)
    if shape.empty:
        pred_grid = np.full(np.asarray(gt_grid).shape, -1, dtype=np.int32)
    else:
        labels = np.argmax(shape.semantic_logits, axis=1)
        pred_grid = shape_to_label_grid(
            shape.leaf_codes, labels, shape.depth, dims=np.asarray(gt_grid).shape
        )
    return iou(pred_grid, gt_grid), pred_grid


def eval_semantic(net, items):
    """Mean IoU metrics over (partial_points, gt_grid) pairs."""
    if not items:
        raise DomainError("nothing to evaluate")
    rows = []
    for partial, gt_grid in items:
        metrics, _ = eval_semantic_sample(net, partial, gt_grid)
        rows.append(metrics)
    keys = ("mean_iou", "completion_precision", "completion_recall", "completion_iou")
    out = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    out["per_sample"] = rows
    return out


def grid_roundtrip_exact(points: PointSet, grid):
    """True when voxelizing the labeled points reproduces the grid exactly."""
    return bool(np.array_equal(voxelize_labels(points, np.asarray(grid).shape), grid))
