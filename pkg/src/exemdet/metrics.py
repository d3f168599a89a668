"""Detection and alignment metrics: COCO-style average precision (101-point
interpolation, thresholds 0.50:0.05:0.95), pair classification accuracy, and
the bucketed before/after IoU improvement analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Detection, GtObject, iou

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

BUCKET_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

DetectionsByImage = dict[str, list[Detection]]
GroundTruthByImage = dict[str, list[GtObject]]


@dataclass(frozen=True)
class Stats:
    mean: float
    maximum: float
    minimum: float
    variance: float


@dataclass(frozen=True)
class BucketStats:
    """Per-bucket before/after IoU statistics; stats are None for empty buckets."""

    lo: float
    hi: float
    count: int
    before: Stats | None
    after: Stats | None
    mean_increment: float | None

    def to_dict(self) -> dict:
        def stats_dict(s: Stats | None):
            if s is None:
                return None
            return {"mean": s.mean, "max": s.maximum, "min": s.minimum, "variance": s.variance}

        return {"lo": self.lo, "hi": self.hi, "count": self.count,
                "before": stats_dict(self.before), "after": stats_dict(self.after),
                "mean_increment": self.mean_increment}


@dataclass(frozen=True)
class BucketReport:
    buckets: tuple[BucketStats, ...]

    @property
    def total_pairs(self) -> int:
        return sum(b.count for b in self.buckets)

    def to_dicts(self) -> list[dict]:
        return [b.to_dict() for b in self.buckets]


def _category_detections(dets_by_image: DetectionsByImage, category) -> list[tuple[str, Detection]]:
    rows = [(img, d) for img, dets in dets_by_image.items() for d in dets
            if d.category == category]
    # Input-order independent: ties on score break on image key then geometry.
    rows.sort(key=lambda r: (-r[1].score, r[0], r[1].box.cx, r[1].box.cy, r[1].box.w, r[1].box.h))
    return rows


def _match_flags(rows: list[tuple[str, Detection]], gts_by_image: GroundTruthByImage,
                 category, iou_threshold: float) -> tuple[np.ndarray, int]:
    """Greedy TP/FP flags for score-sorted detections of one category."""
    gt_boxes = {img: [o.box for o in objs if o.category == category]
                for img, objs in gts_by_image.items()}
    n_gt = sum(len(v) for v in gt_boxes.values())
    used: dict[str, set[int]] = {img: set() for img in gt_boxes}
    tp = np.zeros(len(rows), dtype=bool)
    for i, (img, det) in enumerate(rows):
        best, best_iou = -1, 0.0
        for j, gt in enumerate(gt_boxes.get(img, [])):
            if j in used[img]:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_threshold:
            used[img].add(best)
            tp[i] = True
    return tp, n_gt


def _ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # 101-point interpolation with the running-max precision envelope.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        total += envelope[idx] if idx < envelope.size else 0.0
    return total / 101.0


def _categories(dets_by_image: DetectionsByImage, gts_by_image: GroundTruthByImage) -> list:
    cats = {d.category for dets in dets_by_image.values() for d in dets}
    cats |= {o.category for objs in gts_by_image.values() for o in objs}
    return sorted(cats, key=str)


def average_precision(dets_by_image: DetectionsByImage, gts_by_image: GroundTruthByImage,
                      iou_threshold: float, categories: list | None = None) -> float:
    """Mean AP over categories at a single IoU threshold.

    A category with no ground truth scores 1 when it also has no detections,
    otherwise 0.
    """
    cats = categories if categories is not None else _categories(dets_by_image, gts_by_image)
    if not cats:
        raise ValueError("no categories to evaluate")
    total = 0.0
    for cat in cats:
        rows = _category_detections(dets_by_image, cat)
        tp, n_gt = _match_flags(rows, gts_by_image, cat, iou_threshold)
        total += _ap_from_flags(tp, n_gt)
    return total / len(cats)


def evaluate_detections(dets_by_image: DetectionsByImage, gts_by_image: GroundTruthByImage,
                        categories: list | None = None) -> dict:
    """AP (mean over 0.50:0.05:0.95), AP50, AP75, and the per-category breakdown."""
    cats = categories if categories is not None else _categories(dets_by_image, gts_by_image)
    if not cats:
        raise ValueError("no categories to evaluate")
    per_category = {}
    for cat in cats:
        rows = _category_detections(dets_by_image, cat)
        by_thr = {}
        for thr in AP_THRESHOLDS:
            tp, n_gt = _match_flags(rows, gts_by_image, cat, thr)
            by_thr[thr] = _ap_from_flags(tp, n_gt)
        per_category[cat] = {
            "AP": float(np.mean(list(by_thr.values()))),
            "AP50": by_thr[0.5],
            "AP75": by_thr[0.75],
        }
    return {
        "AP": float(np.mean([v["AP"] for v in per_category.values()])),
        "AP50": float(np.mean([v["AP50"] for v in per_category.values()])),
        "AP75": float(np.mean([v["AP75"] for v in per_category.values()])),
        "per_category": {str(k): v for k, v in per_category.items()},
    }


def pair_accuracy(pred_scores, true_flags, threshold: float = 0.5) -> float:
    """Fraction of pairs where (predicted score >= threshold) matches the label.

    Accepts agreement scores/flags directly or sequences of alignment targets
    (anything with a .c attribute). A prediction exactly at the threshold
    counts positive.
    """

    def flags(seq):
        seq = list(seq) if not isinstance(seq, np.ndarray) else seq
        if isinstance(seq, list) and seq and hasattr(seq[0], "c"):
            seq = [s.c for s in seq]
        return np.asarray(seq, dtype=np.float64)

    p = flags(pred_scores)
    t = flags(true_flags)
    if p.size == 0:
        raise ValueError("cannot compute accuracy of an empty pair set")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(((p >= threshold) == (t == 1.0)).mean())


def bucket_analysis(pairs: list[tuple[float, float]]) -> BucketReport:
    """Bucket (iou_before, iou_after) pairs by iou_before into 0.2-wide bins
    (last bin closed at 1.0) and report per-bucket statistics."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("IoU values must lie in [0, 1]")
    buckets = []
    for lo, hi in zip(BUCKET_EDGES[:-1], BUCKET_EDGES[1:]):
        last = hi == BUCKET_EDGES[-1]
        sel = (arr[:, 0] >= lo) & ((arr[:, 0] <= hi) if last else (arr[:, 0] < hi))
        group = arr[sel]
        if group.shape[0] == 0:
            buckets.append(BucketStats(lo, hi, 0, None, None, None))
            continue
        before, after = group[:, 0], group[:, 1]

        def stats(v: np.ndarray) -> Stats:
            return Stats(float(v.mean()), float(v.max()), float(v.min()), float(v.var()))

        buckets.append(BucketStats(lo, hi, int(group.shape[0]), stats(before), stats(after),
                                   float((after - before).mean())))
    return BucketReport(tuple(buckets))
