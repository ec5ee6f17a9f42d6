"""Rigid segmentation and motion evaluation (AP, PQ, F1, Pre, Rec, mIoU, RI, EPE3D)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geom import geodesic_angle

IOU_THRESHOLD = 0.5


@dataclass
class SegmentationEval:
    AP: float
    PQ: float
    F1: float
    Pre: float
    Rec: float
    mIoU: float
    RI: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MotionEval:
    EPE3D: float
    angular_error: float | None
    translation_error: float | None

    def as_dict(self) -> dict:
        return asdict(self)


def hard_mask(M) -> np.ndarray:
    """Per-point argmax slot; ties go to the lowest slot index."""
    return np.argmax(np.asarray(M), axis=1)


def instances(labels) -> tuple[np.ndarray, list[np.ndarray]]:
    """Non-empty label values and one boolean mask per value."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    return ids, [labels == i for i in ids]


def iou_matrix(pred: list[np.ndarray], gt: list[np.ndarray]) -> np.ndarray:
    P = np.array(pred, dtype=float).reshape(len(pred), -1)
    G = np.array(gt, dtype=float).reshape(len(gt), -1)
    inter = P @ G.T
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def hungarian(score: np.ndarray, maximize: bool = True) -> list[tuple[int, int]]:
    rows, cols = linear_sum_assignment(score, maximize=maximize)
    return list(zip(rows.tolist(), cols.tolist()))


def match_instances(pred: list[np.ndarray], gt: list[np.ndarray], threshold: float = IOU_THRESHOLD):
    """Maximum-IoU one-to-one matching; pairs with IoU <= threshold dropped.

    Returns ``(pairs, ious, iou_matrix)`` with ``pairs`` a list of
    ``(pred_index, gt_index)``.
    """
    if len(gt) == 0:
        raise ValueError("ground truth has no instances")
    iou = iou_matrix(pred, gt)
    if len(pred) == 0:
        return [], [], iou
    pairs = [(p, g) for p, g in hungarian(iou) if iou[p, g] > threshold]
    return pairs, [float(iou[p, g]) for p, g in pairs], iou


def rand_index(pred_labels, gt_labels) -> float:
    """Fraction of point pairs on which both partitions agree."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    n = len(gt_labels)
    if n < 2:
        return 1.0
    _, pi = np.unique(pred_labels, return_inverse=True)
    _, gi = np.unique(gt_labels, return_inverse=True)
    table = np.zeros((pi.max() + 1, gi.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, gi), 1)
    c2 = lambda x: int((x * (x - 1) // 2).sum())  # noqa: E731
    total = n * (n - 1) // 2
    both = c2(table)
    agree = total + 2 * both - c2(table.sum(1)) - c2(table.sum(0))
    return agree / total


def average_precision(confidences, is_tp, n_gt: int) -> float:
    """Area under the interpolated precision-recall curve."""
    if n_gt == 0:
        return float("nan")
    conf = np.asarray(confidences, dtype=float)
    tp = np.asarray(is_tp, dtype=float)
    if len(conf) == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp, conf = tp[order], conf[order]
    ctp = np.cumsum(tp)
    # one operating point per distinct confidence, so ties do not depend on order
    last = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    precision = ctp[last] / (last + 1)
    recall = ctp[last] / n_gt
    # envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def segmentation_scores(pred, gt_labels, confidences=None) -> SegmentationEval:
    """Score a prediction against ground-truth part labels.

    ``pred`` is either an N x S soft mask or an N-vector of labels.  With a
    soft mask, instance confidence is the mean mask weight of the instance's
    own slot over its points; labels alone give every instance confidence 1.
    """
    pred = np.asarray(pred)
    if pred.ndim == 2:
        labels = hard_mask(pred)
        ids, pmasks = instances(labels)
        confidences = [float(pred[m, i].mean()) for i, m in zip(ids, pmasks)]
    else:
        labels = pred
        ids, pmasks = instances(labels)
        if confidences is None:
            confidences = [1.0] * len(ids)
    _, gmasks = instances(gt_labels)
    pairs, ious, iou = match_instances(pmasks, gmasks)
    tp = len(pairs)
    n_pred, n_gt = len(pmasks), len(gmasks)
    pre = tp / n_pred if n_pred else 0.0
    rec = tp / n_gt
    f1 = 2 * pre * rec / (pre + rec) if pre + rec > 0 else 0.0
    denom = tp + 0.5 * (n_pred - tp) + 0.5 * (n_gt - tp)
    pq = float(np.sum(ious)) / denom if denom > 0 else 0.0
    matched = {p for p, _ in pairs}
    ap = average_precision(confidences, [p in matched for p in range(n_pred)], n_gt)
    # unmatched ground-truth parts count as IoU 0
    miou = float(np.sum(ious)) / n_gt
    return SegmentationEval(AP=ap, PQ=pq, F1=f1, Pre=pre, Rec=rec, mIoU=miou, RI=rand_index(labels, gt_labels))


def epe3d(flow_pred, flow_true) -> float:
    return float(np.linalg.norm(np.asarray(flow_pred) - np.asarray(flow_true), axis=1).mean())


def motion_scores(motions, flow_pred, scene, pred=None) -> MotionEval:
    """EPE3D of ``flow_pred`` plus rotation/translation errors of the slots
    matched (IoU > 0.5) to ground-truth parts.  ``pred`` is the soft mask or
    label vector used for matching; without it no parts are matched."""
    epe = epe3d(flow_pred, scene.flow_clean)
    if pred is None:
        return MotionEval(epe, None, None)
    pred = np.asarray(pred)
    labels = hard_mask(pred) if pred.ndim == 2 else pred
    ids, pmasks = instances(labels)
    _, gmasks = instances(scene.mask)
    gids = np.unique(scene.mask)
    pairs, _, _ = match_instances(pmasks, gmasks)
    if not pairs:
        return MotionEval(epe, None, None)
    ang, tr = [], []
    for p, g in pairs:
        s, part = int(ids[p]), int(gids[g])
        ang.append(geodesic_angle(motions.rotations[s], scene.rotations[part]))
        tr.append(float(np.linalg.norm(motions.translations[s] - scene.translations[part])))
    return MotionEval(epe, float(np.mean(ang)), float(np.mean(tr)))


def mean_of(rows: list[dict]) -> dict:
    """Column means ignoring missing (None/NaN) entries."""
    keys = rows[0].keys() if rows else []
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if r[k] is not None and not (isinstance(r[k], float) and math.isnan(r[k]))]
        out[k] = float(np.mean(vals)) if vals else None
    return out
