import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from mitodet.evaluation import (MatchResult, compute_metrics, evaluate_image_sets,
                                format_metrics_report, match_detections,
                                metrics_from_counts, parse_metrics_report)


def optimal_tp_count(det_pts, gt_pts, radius):
    """Maximum-cardinality matching within the radius (Hungarian oracle)."""
    det_pts = np.asarray(det_pts, dtype=float).reshape(-1, 2)
    gt_pts = np.asarray(gt_pts, dtype=float).reshape(-1, 2)
    if len(det_pts) == 0 or len(gt_pts) == 0:
        return 0
    d = np.sqrt(((det_pts[:, None, :] - gt_pts[None, :, :]) ** 2).sum(-1))
    cost = (d > radius).astype(float)
    ri, ci = linear_sum_assignment(cost)
    return int((d[ri, ci] <= radius).sum())


class TestMatchBoundaries:
    def test_19px_is_tp(self):
        m = match_detections([(19.0, 0.0)], [(0.0, 0.0)], radius=20)
        assert (m.n_tp, m.n_fp, m.n_fn) == (1, 0, 0)

    def test_exactly_20px_is_tp(self):
        m = match_detections([(20.0, 0.0)], [(0.0, 0.0)], radius=20)
        assert (m.n_tp, m.n_fp, m.n_fn) == (1, 0, 0)

    def test_21px_is_fp_plus_fn(self):
        m = match_detections([(21.0, 0.0)], [(0.0, 0.0)], radius=20)
        assert (m.n_tp, m.n_fp, m.n_fn) == (0, 1, 1)

    def test_closest_detection_wins(self):
        m = match_detections([(10.0, 0.0), (5.0, 0.0)], [(0.0, 0.0)], radius=20)
        assert m.n_tp == 1 and m.n_fp == 1
        det_idx, gt_idx, dist = m.tp_pairs[0]
        assert det_idx == 1 and dist == 5.0

    def test_one_to_one(self):
        # two dets, two gts, everything within radius: both get matched once
        m = match_detections([(0.0, 0.0), (6.0, 0.0)], [(1.0, 0.0), (5.0, 0.0)], radius=20)
        assert m.n_tp == 2 and m.n_fp == 0 and m.n_fn == 0
        assert len({p[0] for p in m.tp_pairs}) == 2
        assert len({p[1] for p in m.tp_pairs}) == 2

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            match_detections([], [], radius=0)


class TestCountInvariants:
    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_counts_partition(self, seed):
        r = np.random.default_rng(seed)
        dets = r.uniform(0, 200, (int(r.integers(0, 25)), 2))
        gts = r.uniform(0, 200, (int(r.integers(0, 25)), 2))
        m = match_detections(dets, gts, radius=20)
        assert m.n_tp + m.n_fp == len(dets)
        assert m.n_tp + m.n_fn == len(gts)

    def test_permutation_invariant_counts(self, rng):
        dets = rng.uniform(0, 100, (15, 2))
        gts = rng.uniform(0, 100, (12, 2))
        base = match_detections(dets, gts, 20)
        perm_d = rng.permutation(15)
        perm_g = rng.permutation(12)
        shuffled = match_detections(dets[perm_d], gts[perm_g], 20)
        assert (base.n_tp, base.n_fp, base.n_fn) == (shuffled.n_tp, shuffled.n_fp, shuffled.n_fn)

    def test_radius_monotonicity(self, rng):
        dets = rng.uniform(0, 100, (20, 2))
        gts = rng.uniform(0, 100, (20, 2))
        tps = [match_detections(dets, gts, r).n_tp for r in (5, 10, 20, 40, 80)]
        assert tps == sorted(tps)

    def test_greedy_equals_optimal_when_unambiguous(self, rng):
        # gts separated by > 2 * radius: each det can reach at most one gt,
        # so greedy matching is trivially optimal
        for _ in range(10):
            gts = []
            while len(gts) < 8:
                c = rng.uniform(0, 400, 2)
                if all(np.hypot(*(c - g)) > 45 for g in gts):
                    gts.append(c)
            gts = np.array(gts)
            dets = gts[:6] + rng.uniform(-10, 10, (6, 2))
            dets = np.concatenate([dets, rng.uniform(500, 600, (3, 2))])
            m = match_detections(dets, gts, 20)
            assert m.n_tp == optimal_tp_count(dets, gts, 20)

    def test_greedy_never_beats_optimal_and_reports_gaps(self, rng):
        gaps = 0
        for _ in range(20):
            dets = rng.uniform(0, 60, (10, 2))
            gts = rng.uniform(0, 60, (10, 2))
            greedy = match_detections(dets, gts, 20).n_tp
            optimal = optimal_tp_count(dets, gts, 20)
            assert greedy <= optimal
            gaps += optimal - greedy
        if gaps:
            print(f"greedy vs optimal TP gap across ambiguous clouds: {gaps}")


class TestMetrics:
    def test_reported_recall_row(self):
        m = metrics_from_counts(tp=99, fp=0, fn=4)  # 103 ground truths
        assert abs(m.recall - 0.961) < 0.001

    def test_reported_f1_row(self):
        # counts chosen to hit precision 0.86 and recall 0.92 exactly
        m = metrics_from_counts(tp=1978, fp=322, fn=172)
        assert abs(m.precision - 0.86) < 1e-12
        assert abs(m.recall - 0.92) < 1e-12
        assert abs(m.f1 - 0.888) < 0.001

    def test_all_zero_convention(self):
        m = metrics_from_counts(0, 0, 0)
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)

    def test_f1_is_harmonic_mean(self):
        m = metrics_from_counts(tp=50, fp=50, fn=0)
        assert m.f1 == pytest.approx(2 * 0.5 * 1.0 / 1.5)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            metrics_from_counts(-1, 0, 0)

    def test_compute_from_match_result(self):
        m = MatchResult([(0, 0, 3.0)], [1], [])
        metrics = compute_metrics(m)
        assert metrics.precision == 0.5 and metrics.recall == 1.0


class TestAggregationAndReport:
    def test_pooled_counts_across_images(self):
        dets = {"a": [(0.0, 0.0)], "b": [(100.0, 100.0), (0.0, 0.0)]}
        gts = {"a": [(1.0, 0.0)], "b": [(99.0, 100.0)], "c": [(5.0, 5.0)]}
        results, metrics = evaluate_image_sets(dets, gts, radius=20)
        assert metrics.tp == 2 and metrics.fp == 1 and metrics.fn == 1
        assert set(results) == {"a", "b", "c"}

    def test_report_round_trip(self):
        metrics = metrics_from_counts(9, 1, 3)
        text = format_metrics_report(metrics, radius=20)
        parsed = parse_metrics_report(text)
        assert parsed["tp"] == 9
        assert parsed["precision"] == pytest.approx(0.9)
        assert parsed["f1"] == pytest.approx(metrics.f1, abs=1e-6)
