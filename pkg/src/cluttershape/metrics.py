"""Evaluation: mask mAP, shape Chamfer distance, and scene precision/recall.

Matching is greedy and one-to-one: predictions ordered by descending size
take the unmatched same-category ground truth with the highest IoU at or
above the threshold.  With no detector confidences available, size (point
count or box volume) is the deterministic stand-in.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    Aabb,
    PointCloud,
    RigidPose,
    TriangleMesh,
    aabb_iou,
    apply_pose,
    chamfer_distance,
    concat_clouds,
    sample_mesh_surface,
)
from .fusion import Partition
from .seeds import derive_seed
from .templates import CategoryTemplate, DeformationParams, predict_shape

SEGMENTATION_SWEEP = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
SCENE_SWEEP = tuple(np.round(np.arange(0.10, 0.551, 0.05), 2))


@dataclass(frozen=True)
class MatchReport:
    """Precision/recall per IoU threshold plus their sweep means.

    ``map``/``mar`` average over ``sweep`` (a subset of ``thresholds``);
    ``matches`` lists (pred id, gt id, IoU) pairs at the lowest threshold.
    """

    thresholds: tuple[float, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    sweep: tuple[float, ...]
    map: float
    mar: float
    f1: float
    matches: tuple[tuple[int, int, float], ...]
    named: dict

    def per_threshold(self) -> tuple[tuple[float, float, float], ...]:
        return tuple(zip(self.thresholds, self.precision, self.recall))

    def as_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "sweep": list(self.sweep),
            "mAP": self.map,
            "mAR": self.mar,
            "F1": self.f1,
            "matches": [list(m) for m in self.matches],
            "named": dict(self.named),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _greedy_matches(
    iou: np.ndarray, order: Sequence[int], threshold: float
) -> list[tuple[int, int, float]]:
    """One-to-one matching; ``iou`` is -1 where categories disagree."""
    taken = np.zeros(iou.shape[1], dtype=bool)
    matches = []
    for p in order:
        best_gt, best_iou = -1, -1.0
        for g in range(iou.shape[1]):
            value = iou[p, g]
            # strict > keeps the smallest gt index on exact ties
            if not taken[g] and value >= threshold and value > best_iou:
                best_gt, best_iou = g, value
        if best_gt >= 0:
            taken[best_gt] = True
            matches.append((int(p), int(best_gt), float(best_iou)))
    return matches


def _build_report(
    iou: np.ndarray,
    order: Sequence[int],
    thresholds: Sequence[float],
    sweep: Sequence[float],
    named_cuts: dict,
) -> MatchReport:
    n_pred, n_gt = iou.shape
    precision, recall = [], []
    matches_low: tuple = ()
    for i, threshold in enumerate(thresholds):
        matched = _greedy_matches(iou, order, threshold)
        if i == 0:
            matches_low = tuple(matched)
        if n_pred == 0:
            precision.append(1.0 if n_gt == 0 else 0.0)
        else:
            precision.append(len(matched) / n_pred)
        if n_gt == 0:
            recall.append(1.0 if n_pred == 0 else 0.0)
        else:
            recall.append(len(matched) / n_gt)
    by_thr = dict(zip(thresholds, zip(precision, recall)))
    mean_ap = float(np.mean([by_thr[t][0] for t in sweep]))
    mean_ar = float(np.mean([by_thr[t][1] for t in sweep]))
    named = {name: by_thr[cut][0] for name, cut in named_cuts.items() if cut in by_thr}
    return MatchReport(
        thresholds=tuple(float(t) for t in thresholds),
        precision=tuple(precision),
        recall=tuple(recall),
        sweep=tuple(float(t) for t in sweep),
        map=mean_ap,
        mar=mean_ar,
        f1=_f1(mean_ap, mean_ar),
        matches=matches_low,
        named=named,
    )


def point_mask_iou(pred: Partition, gt: Partition) -> float:
    """Jaccard overlap of the two partitions' fused-cloud index sets."""
    inter = len(np.intersect1d(pred.indices, gt.indices))
    union = len(np.union1d(pred.indices, gt.indices))
    return 0.0 if union == 0 else inter / union


def _partition_iou_matrix(preds: Sequence[Partition], gts: Sequence[Partition]) -> np.ndarray:
    iou = np.full((len(preds), len(gts)), -1.0)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.category == g.category:
                iou[i, j] = point_mask_iou(p, g)
    return iou


def segmentation_map(preds: Sequence[Partition], gts: Sequence[Partition]) -> MatchReport:
    """Mask mAP over the 0.5..0.95 IoU sweep, with AP_25/AP_50 cuts."""
    preds, gts = list(preds), list(gts)
    order = sorted(range(len(preds)), key=lambda i: (-len(preds[i]), preds[i].merge_id))
    iou = _partition_iou_matrix(preds, gts)
    thresholds = (0.25,) + SEGMENTATION_SWEEP
    return _build_report(
        iou, order, thresholds, SEGMENTATION_SWEEP, {"AP_25": 0.25, "AP_50": 0.5}
    )


def shape_cd(predicted: PointCloud, gt_mesh: TriangleMesh, n: int, seed: int) -> float:
    """Chamfer distance between a predicted cloud and ground-truth surface samples."""
    return chamfer_distance(predicted, sample_mesh_surface(gt_mesh, n, seed))


def reconstruct_scene(
    fits: Sequence[tuple[int, CategoryTemplate, DeformationParams, RigidPose]],
    n: int,
    seed: int,
) -> PointCloud:
    """Union of posed deformed-template samples, labeled by instance id.

    ``fits`` holds (instance id, template, params, pose) per instance; each
    instance gets its own sampling stream derived from (seed, instance id).
    """
    parts = []
    for instance_id, template, params, pose in fits:
        cloud = predict_shape(template, params, n, derive_seed(seed, int(instance_id)))
        parts.append(
            apply_pose(
                PointCloud(cloud.points, labels=np.full(n, int(instance_id))), pose
            )
        )
    return concat_clouds(parts)


def scene_pr(
    preds: Sequence[tuple[Aabb, str]],
    gts: Sequence[tuple[Aabb, str]],
    thresholds: Optional[Sequence[float]] = None,
) -> MatchReport:
    """Box-IoU precision/recall over the scene sweep (0.10..0.55 by default)."""
    thresholds = SCENE_SWEEP if thresholds is None else tuple(float(t) for t in thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    preds, gts = list(preds), list(gts)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0].volume(), i))
    iou = np.full((len(preds), len(gts)), -1.0)
    for i, (pbox, pcat) in enumerate(preds):
        for j, (gbox, gcat) in enumerate(gts):
            if pcat == gcat:
                iou[i, j] = aabb_iou(pbox, gbox)
    named_cuts = {"AP_10": 0.1, "AP_25": 0.25, "AP_50": 0.5}
    return _build_report(iou, order, thresholds, thresholds, named_cuts)


def format_report(report: MatchReport, title: str) -> str:
    """Aligned-column text table for one MatchReport."""
    lines = [title, "-" * len(title)]
    lines.append(f"{'IoU':>6} {'precision':>10} {'recall':>10}")
    for threshold, precision, recall in report.per_threshold():
        lines.append(f"{threshold:>6.2f} {precision:>10.4f} {recall:>10.4f}")
    lines.append(f"{'mean':>6} {report.map:>10.4f} {report.mar:>10.4f}")
    named = "  ".join(f"{k}={v:.4f}" for k, v in sorted(report.named.items()))
    lines.append(f"F1={report.f1:.4f}  {named}".rstrip())
    return "\n".join(lines) + "\n"
