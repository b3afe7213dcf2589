"""Dice, MSE, Aggregated Jaccard Index and Panoptic Quality."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1."""
    _check(a, b)
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _check(a, b)
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.mean(d * d))


class Overlap(NamedTuple):
    gt_ids: np.ndarray
    pred_ids: np.ndarray
    inter: np.ndarray     # (n_gt, n_pred) pixel counts
    gt_area: np.ndarray
    pred_area: np.ndarray

    @property
    def union(self) -> np.ndarray:
        return self.gt_area[:, None] + self.pred_area[None, :] - self.inter

    @property
    def iou(self) -> np.ndarray:
        u = self.union
        return np.divide(self.inter, u, out=np.zeros(u.shape), where=u > 0)


def overlap(gt: np.ndarray, pred: np.ndarray) -> Overlap:
    """Joint pixel counts of every (gt label, pred label) pair in one pass."""
    _check(gt, pred)
    g = np.asarray(gt).ravel().astype(np.int64)
    p = np.asarray(pred).ravel().astype(np.int64)
    gt_ids, g_idx = np.unique(g, return_inverse=True)
    pred_ids, p_idx = np.unique(p, return_inverse=True)
    joint = np.bincount(g_idx * pred_ids.size + p_idx,
                        minlength=gt_ids.size * pred_ids.size).reshape(gt_ids.size, pred_ids.size)
    # drop the background row/column (label 0 is always the smallest id)
    gi = slice(1, None) if gt_ids.size and gt_ids[0] == 0 else slice(None)
    pi = slice(1, None) if pred_ids.size and pred_ids[0] == 0 else slice(None)
    return Overlap(
        gt_ids=gt_ids[gi],
        pred_ids=pred_ids[pi],
        inter=joint[gi, pi],
        gt_area=joint[gi].sum(axis=1),
        pred_area=joint[:, pi].sum(axis=0),
    )


def iou_matrix(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """IoU of every GT instance (rows) against every prediction (columns),
    both in ascending label order."""
    return overlap(gt, pred).iou


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard Index with one-to-one greedy matching.

    Ground-truth instances are visited in ascending label order. Each takes
    the still-unused prediction of highest IoU (smaller label on ties),
    provided it overlaps at all; otherwise it adds only its own area to the
    union. Unused predictions add their area to the union at the end.
    """
    ov = overlap(gt, pred)
    n_gt, n_pred = ov.inter.shape
    if n_gt == 0 and n_pred == 0:
        return 1.0
    iou = ov.iou
    used = np.zeros(n_pred, bool)
    c = u = 0
    for i in range(n_gt):
        cand = np.where(used, -1.0, iou[i])
        j = int(np.argmax(cand)) if n_pred else -1
        if j >= 0 and cand[j] > 0:
            used[j] = True
            c += int(ov.inter[i, j])
            u += int(ov.union[i, j])
        else:
            u += int(ov.gt_area[i])
    u += int(ov.pred_area[~used].sum())
    return c / u if u else 0.0


class PQResult(NamedTuple):
    pq: float
    dq: float
    sq: float


def pq(gt: np.ndarray, pred: np.ndarray, iou_threshold: float = 0.5) -> PQResult:
    """Panoptic quality for a single class; a match needs IoU > threshold.

    Thresholds below 0.5 would need an explicit assignment step and are
    rejected.
    """
    if iou_threshold < 0.5:
        raise ValueError("iou_threshold below 0.5 needs an assignment step; not supported")
    ov = overlap(gt, pred)
    n_gt, n_pred = ov.inter.shape
    if n_gt == 0 and n_pred == 0:
        return PQResult(1.0, 1.0, 1.0)
    iou = ov.iou
    gi, pj = np.nonzero(iou > iou_threshold)
    # two sets with IoU > 0.5 each cannot share a partner
    assert len(set(gi)) == len(gi) and len(set(pj)) == len(pj), "non-unique PQ match"
    tp = len(gi)
    fp = n_pred - tp
    fn = n_gt - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    iou_sum = float(iou[gi, pj].sum())
    sq = iou_sum / tp if tp else 0.0
    dq = tp / denom
    return PQResult(iou_sum / denom, dq, sq)


@dataclass
class MetricsReport:
    """One results row; metrics that do not apply to a branch stay None."""

    run_id: str
    branch: str
    method: str
    cr: int
    sparsity: float | None = None
    dice: float | None = None
    mse: float | None = None
    aji: float | None = None
    pq: float | None = None
    speedup: float | None = None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]
