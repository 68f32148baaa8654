"""Mask AP (COCO-style), relative drop and AND-efficiency."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, UndefinedMetricError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
EPS = 1e-8
MAX_DETECTIONS = 20


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    score: float  # exp(l), in (0, 1]
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if not self.score > 0:
            raise ContractError(f"detection score must be positive, got {self.score}")


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """IoU between (D, P) and (G, P) boolean masks."""
    d = dets.reshape(len(dets), -1).astype(np.float64)
    g = gts.reshape(len(gts), -1).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-sorted TP indicator vector."""
    if num_gt == 0:
        raise ContractError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def _group_by_image(detections: Iterable[DetectionRecord]) -> dict[str, list[DetectionRecord]]:
    out: dict[str, list[DetectionRecord]] = {}
    for d in detections:
        out.setdefault(d.image_id, []).append(d)
    return out


def match_detections(detections: Sequence[DetectionRecord], ground_truth: Mapping[str, np.ndarray],
                     threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching at one IoU threshold.

    Returns global scores (descending) and the matching TP indicator. Within an
    image each detection, in score order, takes the highest-IoU GT not yet
    matched with IoU >= threshold.
    """
    per_image = _group_by_image(detections)
    scores, tps = [], []
    for image_id, dets in per_image.items():
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)[:MAX_DETECTIONS]
        dets = [dets[i] for i in order]
        gts = np.asarray(ground_truth.get(image_id, np.zeros((0,) + dets[0].mask.shape, bool)))
        taken = np.zeros(len(gts), dtype=bool)
        ious = iou_matrix(np.stack([d.mask for d in dets]), gts) if len(gts) else None
        for i, d in enumerate(dets):
            hit = 0.0
            if ious is not None:
                cand = np.where(taken, -1.0, ious[i])
                j = int(np.argmax(cand))
                if cand[j] >= threshold:
                    taken[j] = True
                    hit = 1.0
            scores.append(d.score)
            tps.append(hit)
    scores = np.asarray(scores, dtype=np.float64)
    tps = np.asarray(tps, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return scores[order], tps[order]


def average_precision(detections: Sequence[DetectionRecord], ground_truth: Mapping[str, np.ndarray],
                      iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    """Mask AP in percent, averaged over IoU thresholds.

    ``ground_truth`` maps image id to a (G, H, W) mask stack. Returns NaN when
    there is no ground truth at all (the caller excludes it from averages).
    """
    num_gt = sum(len(g) for g in ground_truth.values())
    if num_gt == 0:
        return float("nan")
    detections = list(detections)
    aps = []
    for tau in iou_thresholds:
        _, tp = match_detections(detections, ground_truth, tau)
        aps.append(interpolated_ap(tp, num_gt))
    return 100.0 * float(np.mean(aps))


def relative_drop(ap_seen: float, ap_unseen: float) -> float:
    if ap_seen < 0 or ap_unseen < 0:
        raise ContractError("AP values must be non-negative")
    return 1.0 - ap_unseen / (ap_seen + EPS)


def and_efficiency(ap_unseen: float, per_group_ap: Mapping[str, float]) -> float:
    if not per_group_ap:
        raise ContractError("per-group AP map is empty")
    weakest = min(per_group_ap.values())
    if not weakest > 0:
        raise UndefinedMetricError(f"AND-Eff undefined: weakest group AP is {weakest}")
    return ap_unseen / weakest
