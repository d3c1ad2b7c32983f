"""Mask/box average precision and merge/split failure counters."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .annotations import CellAnnotation
from .decode import InstancePrediction

RECALL_STEPS = 100


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: shapes differ {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ValueError("mask_iou: both masks are empty")
    return np.count_nonzero(a & b) / union


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        raise ValueError("box_iou: both boxes are empty")
    return inter / union


def _gt_mask(gt) -> np.ndarray:
    return gt.mask if isinstance(gt, CellAnnotation) else np.asarray(gt, dtype=bool)


def _gt_box(gt):
    if isinstance(gt, CellAnnotation):
        return gt.bbox
    from .annotations import tight_bbox
    return tight_bbox(np.asarray(gt, dtype=bool))


def _iou_matrix(preds: Sequence[InstancePrediction], gts, kind: str) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    if not preds or not len(gts):
        return out
    if kind == "mask":
        P = np.stack([p.mask.reshape(-1) for p in preds]).astype(np.float64)
        G = np.stack([_gt_mask(g).reshape(-1) for g in gts]).astype(np.float64)
        inter = P @ G.T
        union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
        return inter / union
    if kind == "box":
        for i, p in enumerate(preds):
            for j, g in enumerate(gts):
                out[i, j] = box_iou(p.box, _gt_box(g))
        return out
    raise ValueError(f"unknown IoU kind {kind!r}")


def match_image(preds: Sequence[InstancePrediction], gts, iou_thr: float,
                kind: str = "mask") -> list[tuple[float, bool]]:
    """Greedy matching in descending score: each prediction takes the
    unmatched ground truth of highest IoU at or above the threshold."""
    order = sorted(range(len(preds)), key=lambda k: -preds[k].score)
    ious = _iou_matrix(preds, gts, kind)
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for k in order:
        cand = np.where(taken, -1.0, ious[k]) if len(gts) else np.zeros(0)
        j = int(np.argmax(cand)) if cand.size else -1
        hit = j >= 0 and cand[j] >= iou_thr
        if hit:
            taken[j] = True
        out.append((float(preds[k].score), bool(hit)))
    return out


def average_precision(preds_per_image: Sequence[Sequence[InstancePrediction]], gts_per_image: Sequence,
                      iou_thr: float = 0.5, kind: str = "mask") -> float:
    """Interpolated AP over recall thresholds 0.01, 0.02, ..., 1.00.

    Predictions from all images are ranked together by score; tied scores
    form a single operating point so the result does not depend on image
    order.
    """
    if not 0.0 < iou_thr < 1.0:
        raise ValueError(f"iou_thr must lie in (0, 1), got {iou_thr}")
    if len(preds_per_image) != len(gts_per_image):
        raise ValueError("need one prediction list per image")
    n_gt = sum(len(g) for g in gts_per_image)
    if n_gt == 0:
        raise ValueError("average_precision: no ground-truth instances")
    matches = [m for preds, gts in zip(preds_per_image, gts_per_image) for m in match_image(preds, gts, iou_thr, kind)]
    if not matches:
        return 0.0
    scores = np.array([s for s, _ in matches])
    hits = np.array([h for _, h in matches], dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1 - hits)
    last_of_tie = np.r_[scores[1:] != scores[:-1], True]
    tp, fp = tp[last_of_tie], fp[last_of_tie]
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for step in range(1, RECALL_STEPS + 1):
        reach = np.flatnonzero(tp * RECALL_STEPS >= step * n_gt)
        if reach.size:
            total += envelope[reach[0]]
    return float(total / RECALL_STEPS)


def failure_mode_counts(preds_per_image, gts_per_image, iou_thr: float = 0.5,
                        cover: float = 0.5) -> tuple[int, int]:
    """(merge errors, split errors) summed over images.

    Merge: one prediction covering at least ``cover`` of each of two or more
    ground truths. Split: a ground truth covered at least ``cover`` by the
    union of two or more predictions that each lie mostly (``cover``) inside
    it and each stay below ``iou_thr`` IoU with it.
    """
    merges = splits = 0
    for preds, gts in zip(preds_per_image, gts_per_image):
        gmasks = [_gt_mask(g) for g in gts]
        for p in preds:
            covered = sum(np.count_nonzero(p.mask & g) >= cover * np.count_nonzero(g) for g in gmasks)
            merges += covered >= 2
        for g in gmasks:
            g_area = np.count_nonzero(g)
            frags = []
            for p in preds:
                inter = np.count_nonzero(p.mask & g)
                p_area = np.count_nonzero(p.mask)
                if inter and inter >= cover * p_area and mask_iou(p.mask, g) < iou_thr:
                    frags.append(p.mask)
            if len(frags) >= 2:
                union = np.logical_or.reduce(frags)
                splits += np.count_nonzero(union & g) >= cover * g_area
    return int(merges), int(splits)


@dataclass
class EvalResult:
    ap50: float
    ap75: float
    merge_errors: int
    split_errors: int
    num_images: int
    box_ap50: float = 0.0
    box_ap75: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(preds_per_image, gts_per_image, merge_split_thr: float = 0.5) -> EvalResult:
    merges, splits = failure_mode_counts(preds_per_image, gts_per_image, merge_split_thr)
    return EvalResult(
        ap50=average_precision(preds_per_image, gts_per_image, 0.5),
        ap75=average_precision(preds_per_image, gts_per_image, 0.75),
        merge_errors=merges,
        split_errors=splits,
        num_images=len(gts_per_image),
        box_ap50=average_precision(preds_per_image, gts_per_image, 0.5, kind="box"),
        box_ap75=average_precision(preds_per_image, gts_per_image, 0.75, kind="box"),
    )


def annotations_as_predictions(anns: Sequence[CellAnnotation]) -> list[InstancePrediction]:
    """Ground truth dressed up as predictions with score 1."""
    return [InstancePrediction(1.0, tuple(a.bbox), np.asarray(a.mask, dtype=bool)) for a in anns]
