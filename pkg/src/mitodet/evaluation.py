"""Centroid-matching evaluation: a detection counts as a true positive when
its box center lies within a fixed radius (default 20 px) of an unclaimed
ground-truth centroid. Matching is one-to-one, greedy by ascending distance.
"""

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RADIUS = 20.0


@dataclass
class MatchResult:
    """One-to-one assignment of detections to ground-truth centroids."""

    tp_pairs: list  # (detection idx, gt idx, distance px)
    fp: list        # unmatched detection indices
    fn: list        # unmatched gt indices

    @property
    def n_tp(self):
        return len(self.tp_pairs)

    @property
    def n_fp(self):
        return len(self.fp)

    @property
    def n_fn(self):
        return len(self.fn)


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _centers(items):
    """Accept Detection-like objects (with .center) or plain (x, y) pairs."""
    pts = []
    for it in items:
        if hasattr(it, "center"):
            pts.append(it.center)
        else:
            pts.append((float(it[0]), float(it[1])))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def match_detections(detections, gts, radius=DEFAULT_RADIUS):
    """Greedily pair detections with gt centroids by ascending distance.

    Candidate pairs are those within ``radius``; each detection and each gt
    is used at most once. Ties on distance break deterministically by
    (detection index, gt index).
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    det_pts = _centers(detections)
    gt_pts = _centers(gts)
    if len(det_pts) == 0 or len(gt_pts) == 0:
        return MatchResult([], list(range(len(det_pts))), list(range(len(gt_pts))))

    diff = det_pts[:, None, :] - gt_pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    di, gi = np.nonzero(dist <= radius)
    candidates = sorted(zip(dist[di, gi], di, gi), key=lambda t: (t[0], t[1], t[2]))

    det_used = np.zeros(len(det_pts), dtype=bool)
    gt_used = np.zeros(len(gt_pts), dtype=bool)
    tp_pairs = []
    for d, i, j in candidates:
        if det_used[i] or gt_used[j]:
            continue
        det_used[i] = gt_used[j] = True
        tp_pairs.append((int(i), int(j), float(d)))
    fp = [int(i) for i in range(len(det_pts)) if not det_used[i]]
    fn = [int(j) for j in range(len(gt_pts)) if not gt_used[j]]
    return MatchResult(tp_pairs, fp, fn)


def metrics_from_counts(tp, fp, fn):
    """Precision, recall and harmonic-mean F1; any 0/0 collapses to 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(precision, recall, f1, tp=tp, fp=fp, fn=fn)


def compute_metrics(match: MatchResult):
    return metrics_from_counts(match.n_tp, match.n_fp, match.n_fn)


def evaluate_image_sets(detections_by_image, gts_by_image, radius=DEFAULT_RADIUS):
    """Match every image and pool the counts.

    Images present in only one of the two mappings contribute pure FPs or
    FNs. Returns (per-image {image_id: MatchResult}, pooled Metrics).
    """
    results = {}
    tp = fp = fn = 0
    for image_id in sorted(set(detections_by_image) | set(gts_by_image)):
        m = match_detections(detections_by_image.get(image_id, []),
                             gts_by_image.get(image_id, []), radius)
        results[image_id] = m
        tp, fp, fn = tp + m.n_tp, fp + m.n_fp, fn + m.n_fn
    return results, metrics_from_counts(tp, fp, fn)


def format_metrics_report(metrics: Metrics, radius=DEFAULT_RADIUS):
    """Machine-parseable ``key: value`` report."""
    lines = [
        f"radius_px: {radius:g}",
        f"tp: {metrics.tp}",
        f"fp: {metrics.fp}",
        f"fn: {metrics.fn}",
        f"precision: {metrics.precision:.6f}",
        f"recall: {metrics.recall:.6f}",
        f"f1: {metrics.f1:.6f}",
    ]
    return "\n".join(lines) + "\n"


def parse_metrics_report(text):
    out = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition(":")
        out[key.strip()] = float(value)
    return out


def write_match_table(path, results_by_image):
    """Audit table of every TP pair, FP and FN, one row per event."""
    with open(path, "w") as f:
        f.write("image_id,kind,det_idx,gt_idx,distance_px\n")
        for image_id in sorted(results_by_image):
            m = results_by_image[image_id]
            for di, gi, d in m.tp_pairs:
                f.write(f"{image_id},tp,{di},{gi},{d:.3f}\n")
            for di in m.fp:
                f.write(f"{image_id},fp,{di},,\n")
            for gi in m.fn:
                f.write(f"{image_id},fn,,{gi},\n")
