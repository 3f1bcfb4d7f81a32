"""Segmentation IoU, video panoptic quality, and generalized energy distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from bevcast.instances import InstanceTimeline

IOU_MATCH_THRESHOLD = 0.5


def iou(pred, gt) -> float:
    """Binary mask overlap; two empty masks count as a perfect 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class MetricReport:
    tp: list[int] = field(default_factory=list)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)
    tp_iou: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    seg_iou: float = 0.0
    vpq: float = 0.0


def _frame_pair_ious(pred: np.ndarray, gt: np.ndarray):
    """IoU of every overlapping (gt_id, pred_id) pair, via combined labels."""
    pred = pred.astype(np.int64)
    gt = gt.astype(np.int64)
    offset = int(pred.max()) + 1
    combined = gt * offset + pred
    vals, counts = np.unique(combined, return_counts=True)
    inter = {}
    for v, n in zip(vals, counts):
        g, p = divmod(int(v), offset)
        inter[(g, p)] = int(n)
    areas_g = {int(u): int(n) for u, n in zip(*np.unique(gt, return_counts=True))}
    areas_p = {int(u): int(n) for u, n in zip(*np.unique(pred, return_counts=True))}
    pairs = {}
    for (g, p), n in inter.items():
        if g == 0 or p == 0:
            continue
        union = areas_g[g] + areas_p[p] - n
        pairs[(g, p)] = n / union
    return pairs, set(u for u in areas_g if u != 0), set(u for u in areas_p if u != 0)


def vpq(pred: InstanceTimeline, gt: InstanceTimeline) -> tuple[float, MetricReport]:
    """Video panoptic quality with identity-consistent true positives.

    Per frame, a candidate pair needs IoU above 0.5; it only counts as a
    true positive while the ground-truth id keeps the predicted id it was
    first matched with (and vice versa). Any later defection books a false
    negative and a false positive. The score is the mean over frames of
    sum-IoU(TP) / (|TP| + 0.5|FP| + 0.5|FN|), with an empty-vs-empty frame
    worth 1.
    """
    if len(pred) != len(gt):
        raise ValueError(f"timeline lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) == 0:
        raise ValueError("cannot score empty timelines")
    gt_to_pred: dict[int, int] = {}
    pred_to_gt: dict[int, int] = {}
    report = MetricReport()
    inter_total = 0
    union_total = 0
    for pf, gf in zip(pred.frames, gt.frames):
        if pf.shape != gf.shape:
            raise ValueError(f"raster dims differ: {pf.shape} vs {gf.shape}")
        pairs, gt_ids, pred_ids = _frame_pair_ious(pf, gf)
        tp_pairs = []
        for (g, p), ov in sorted(pairs.items()):
            if ov <= IOU_MATCH_THRESHOLD:
                continue
            bound_p = gt_to_pred.get(g)
            bound_g = pred_to_gt.get(p)
            if bound_p is None and bound_g is None:
                gt_to_pred[g] = p
                pred_to_gt[p] = g
                tp_pairs.append((g, p, ov))
            elif bound_p == p and bound_g == g:
                tp_pairs.append((g, p, ov))
            # else: id switch; both sides stay unmatched this frame
        matched_g = {g for g, _, _ in tp_pairs}
        matched_p = {p for _, p, _ in tp_pairs}
        tp = len(tp_pairs)
        fn = len(gt_ids - matched_g)
        fp = len(pred_ids - matched_p)
        tp_iou = float(sum(ov for _, _, ov in tp_pairs))
        denom = tp + 0.5 * fp + 0.5 * fn
        ratio = 1.0 if denom == 0 else tp_iou / denom
        report.tp.append(tp)
        report.fp.append(fp)
        report.fn.append(fn)
        report.tp_iou.append(tp_iou)
        report.ratios.append(ratio)
        inter_total += np.count_nonzero((pf > 0) & (gf > 0))
        union_total += np.count_nonzero((pf > 0) | (gf > 0))
    report.vpq = float(np.mean(report.ratios))
    report.seg_iou = 1.0 if union_total == 0 else inter_total / union_total
    return report.vpq, report


def ged(samples, gt: InstanceTimeline) -> float:
    """Generalized energy distance with d = 1 - VPQ.

    ``2 E[d(sample, truth)] - E[d(sample, sample')]``, expectations taken as
    empirical means over the samples and over unordered distinct pairs.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("ged needs at least two sampled timelines")
    d_truth = [1.0 - vpq(s, gt)[0] for s in samples]
    d_pairs = [1.0 - vpq(a, b)[0] for a, b in combinations(samples, 2)]
    return 2.0 * float(np.mean(d_truth)) - float(np.mean(d_pairs))


def ged_terms(samples, gt: InstanceTimeline) -> tuple[float, float]:
    """(accuracy term E[d(s, gt)], diversity term E[d(s, s')]) of the GED."""
    samples = list(samples)
    d_truth = [1.0 - vpq(s, gt)[0] for s in samples]
    d_pairs = [1.0 - vpq(a, b)[0] for a, b in combinations(samples, 2)]
    return float(np.mean(d_truth)), float(np.mean(d_pairs))
