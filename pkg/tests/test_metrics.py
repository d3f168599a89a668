import itertools

import numpy as np
import pytest

from exemdet.geometry import Box, Detection, GtObject, iou
from exemdet.metrics import (AP_THRESHOLDS, average_precision, bucket_analysis,
                             evaluate_detections, pair_accuracy)


def det(cx, cy, w, h, cat="a", score=0.9):
    return Detection(Box(cx, cy, w, h), cat, score)


def gt(cx, cy, w, h, cat="a"):
    return GtObject(Box(cx, cy, w, h), cat)


def ap_bruteforce(dets_by_image, gts_by_image, category, thr):
    """Independent oracle: re-run greedy matching from scratch on every
    score-sorted prefix, build the PR points, 101-point interpolate."""
    rows = [(img, d) for img, ds in dets_by_image.items() for d in ds if d.category == category]
    rows.sort(key=lambda r: (-r[1].score, r[0], r[1].box.cx, r[1].box.cy, r[1].box.w, r[1].box.h))
    n_gt = sum(1 for objs in gts_by_image.values() for o in objs if o.category == category)
    if n_gt == 0:
        return 1.0 if not rows else 0.0
    points = []
    for k in range(1, len(rows) + 1):
        prefix = rows[:k]
        used = {img: set() for img in gts_by_image}
        tp = 0
        for img, d in prefix:
            boxes = [o.box for o in gts_by_image.get(img, []) if o.category == category]
            best, best_v = -1, 0.0
            for j, g in enumerate(boxes):
                if j in used.get(img, set()):
                    continue
                v = iou(d.box, g)
                if v > best_v:
                    best, best_v = j, v
            if best >= 0 and best_v >= thr:
                used.setdefault(img, set()).add(best)
                tp += 1
        points.append((tp / n_gt, tp / k))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        total += max((p for rec, p in points if rec >= r), default=0.0)
    return total / 101.0


class TestAveragePrecision:
    def test_perfect_detector(self):
        gts = {"i0": [gt(10, 10, 4, 4), gt(30, 30, 6, 6)], "i1": [gt(5, 5, 4, 4)]}
        dets = {"i0": [det(10, 10, 4, 4, score=0.9), det(30, 30, 6, 6, score=0.8)],
                "i1": [det(5, 5, 4, 4, score=0.7)]}
        assert average_precision(dets, gts, 0.5) == 1.0
        rep = evaluate_detections(dets, gts)
        assert rep["AP"] == 1.0 and rep["AP50"] == 1.0 and rep["AP75"] == 1.0

    def test_no_detections(self):
        gts = {"i0": [gt(10, 10, 4, 4)]}
        assert average_precision({}, gts, 0.5) == 0.0

    def test_zero_gt_zero_dets_is_one(self):
        assert average_precision({"i0": []}, {"i0": []}, 0.5, categories=["a"]) == 1.0

    def test_zero_gt_with_dets_is_zero(self):
        dets = {"i0": [det(1, 1, 2, 2)]}
        assert average_precision(dets, {"i0": []}, 0.5, categories=["a"]) == 0.0

    def test_crafted_case_matches_bruteforce(self):
        # 3 GT, 5 detections: one duplicate, one false positive, one miss
        gts = {"im": [gt(10, 10, 4, 4), gt(30, 30, 4, 4), gt(50, 50, 4, 4)]}
        dets = {"im": [
            det(10, 10, 4, 4, score=0.95),
            det(10.5, 10, 4, 4, score=0.90),   # duplicate of first GT
            det(30, 30, 4, 4, score=0.85),
            det(70, 70, 4, 4, score=0.80),     # false positive
            det(50, 58, 4, 4, score=0.75),     # bad localization
        ]}
        got = average_precision(dets, gts, 0.5)
        want = ap_bruteforce(dets, gts, "a", 0.5)
        assert got == pytest.approx(want, abs=1e-6)

    def test_random_cases_match_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            gts = {}
            dets = {}
            for img in ("a", "b"):
                gts[img] = [gt(rng.uniform(5, 60), rng.uniform(5, 60),
                               rng.uniform(3, 10), rng.uniform(3, 10))
                            for _ in range(rng.integers(0, 5))]
                dets[img] = [det(rng.uniform(5, 60), rng.uniform(5, 60),
                                 rng.uniform(3, 10), rng.uniform(3, 10),
                                 score=float(rng.uniform()))
                             for _ in range(rng.integers(0, 8))]
            thr = float(rng.choice([0.3, 0.5, 0.75]))
            got = average_precision(dets, gts, thr, categories=["a"])
            want = ap_bruteforce(dets, gts, "a", thr)
            assert got == pytest.approx(want, abs=1e-6)

    def test_duplicate_detection_counts_fp(self):
        gts = {"im": [gt(10, 10, 4, 4)]}
        dets = {"im": [det(10, 10, 4, 4, score=0.9), det(10, 10.5, 4, 4, score=0.8)]}
        # second detection hits an already-matched GT: precision falls
        ap = average_precision(dets, gts, 0.5)
        assert ap == pytest.approx(1.0)  # recall 1 reached at precision 1 before the FP
        gts2 = {"im": [gt(10, 10, 4, 4), gt(40, 40, 4, 4)]}
        dets2 = {"im": [det(10, 10, 4, 4, score=0.9), det(10, 10.5, 4, 4, score=0.8),
                        det(40, 40, 4, 4, score=0.7)]}
        want = ap_bruteforce(dets2, gts2, "a", 0.5)
        assert average_precision(dets2, gts2, 0.5) == pytest.approx(want, abs=1e-6)

    def test_score_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        gts = {"im": [gt(rng.uniform(5, 60), rng.uniform(5, 60), 5, 5) for _ in range(4)]}
        base = [det(rng.uniform(5, 60), rng.uniform(5, 60), 5, 5, score=float(rng.uniform()))
                for _ in range(8)]
        dets = {"im": base}
        v1 = average_precision(dets, gts, 0.5)
        squashed = {"im": [Detection(d.box, d.category, d.score ** 3 * 0.5 + 0.1) for d in base]}
        assert average_precision(squashed, gts, 0.5) == pytest.approx(v1)

    def test_input_order_independence(self):
        rng = np.random.default_rng(2)
        gts = {"im": [gt(rng.uniform(5, 60), rng.uniform(5, 60), 5, 5) for _ in range(4)]}
        base = [det(rng.uniform(5, 60), rng.uniform(5, 60), 5, 5, score=round(float(rng.uniform()), 1))
                for _ in range(9)]
        v1 = average_precision({"im": base}, gts, 0.5)
        for perm in itertools.islice(itertools.permutations(base), 0, 24, 5):
            assert average_precision({"im": list(perm)}, gts, 0.5) == pytest.approx(v1)

    def test_multi_category_mean(self):
        gts = {"im": [gt(10, 10, 4, 4, "a"), gt(30, 30, 4, 4, "b")]}
        dets = {"im": [det(10, 10, 4, 4, "a", 0.9)]}  # b missed entirely
        assert average_precision(dets, gts, 0.5) == pytest.approx(0.5)
        rep = evaluate_detections(dets, gts)
        assert rep["per_category"]["a"]["AP50"] == 1.0
        assert rep["per_category"]["b"]["AP50"] == 0.0

    def test_threshold_grid(self):
        assert AP_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


class TestPairAccuracy:
    def test_all_correct(self):
        assert pair_accuracy([0.9, 0.1, 0.8], [1, 0, 1], 0.5) == 1.0

    def test_boundary_counts_positive(self):
        # predictions exactly at the threshold are positive calls
        assert pair_accuracy([0.5, 0.5], [1, 0], 0.5) == 0.5

    def test_uniform_half_predictions(self):
        truth = [1, 1, 0, 1, 0]
        got = pair_accuracy([0.5] * 5, truth, 0.5)
        assert got == pytest.approx(3 / 5)

    def test_random_matches_hand_count(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(size=50)
        t = (rng.uniform(size=50) < 0.5).astype(float)
        want = sum(1 for a, b in zip(p, t) if (a >= 0.5) == (b == 1)) / 50
        assert pair_accuracy(p, t, 0.5) == pytest.approx(want)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pair_accuracy([], [], 0.5)

    def test_accepts_target_objects(self):
        from exemdet.ran import RanTarget

        preds = [RanTarget(0.9, 0.5, 0.5, 0.3, 0.3), RanTarget(0.2, 0.5, 0.5, 0.3, 0.3)]
        truth = [RanTarget(1.0, 0.5, 0.5, 0.3, 0.3), RanTarget(0.0, 0.5, 0.5, 0.3, 0.3)]
        assert pair_accuracy(preds, truth, 0.5) == 1.0


class TestBucketAnalysis:
    def test_identical_pairs_single_bucket(self):
        rep = bucket_analysis([(0.3, 0.5)] * 7)
        b = rep.buckets[1]
        assert (b.lo, b.hi) == (0.2, 0.4)
        assert b.count == 7
        assert b.mean_increment == pytest.approx(0.2)
        assert b.before.variance == 0.0
        assert rep.buckets[0].count == 0 and rep.buckets[0].before is None

    def test_counts_match_direct_tally(self):
        rng = np.random.default_rng(4)
        pairs = [(float(rng.uniform()), float(rng.uniform())) for _ in range(500)]
        rep = bucket_analysis(pairs)
        edges = [(0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0)]
        for (lo, hi), b in zip(edges, rep.buckets):
            last = hi == 1.0
            want = sum(1 for x, _ in pairs if lo <= x < hi or (last and x == 1.0))
            assert b.count == want
        assert rep.total_pairs == 500

    def test_identity_alignment_zero_increments(self):
        rng = np.random.default_rng(5)
        pairs = [(v, v) for v in rng.uniform(size=100)]
        rep = bucket_analysis(pairs)
        for b in rep.buckets:
            if b.count:
                assert b.mean_increment == pytest.approx(0.0)

    def test_top_edge_lands_in_last_bucket(self):
        rep = bucket_analysis([(1.0, 1.0)])
        assert rep.buckets[-1].count == 1

    def test_increment_definition(self):
        rep = bucket_analysis([(0.1, 0.4), (0.15, 0.2)])
        b = rep.buckets[0]
        assert b.mean_increment == pytest.approx(((0.4 - 0.1) + (0.2 - 0.15)) / 2)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            bucket_analysis([(1.2, 0.5)])

    def test_json_shape(self):
        rows = bucket_analysis([(0.3, 0.5)]).to_dicts()
        assert len(rows) == 5
        assert rows[1]["count"] == 1
        assert rows[0]["before"] is None
