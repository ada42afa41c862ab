"""Scoring predicted response tracks against ground truth.

Four headline numbers per dataset:

* temporal_ap_25  — average precision where a hit needs frame-interval IoU
  of at least 0.25,
* tube_ap_25      — the same with spatio-temporal tube IoU,
* recovery_pct    — share of ground-truth track frames whose predicted box
  overlaps the true box with IoU of at least 0.5 (reported x100),
* success_pct     — share of pairs whose tube IoU exceeds 0.05 (x100).

A pair with no prediction scores zero everywhere but still counts in the
denominators.
"""

import json
from dataclasses import dataclass

from .geometry import box_iou, intersection_area

TEMPORAL_TP_IOU = 0.25
TUBE_TP_IOU = 0.25
RECOVERY_IOU = 0.5
SUCCESS_IOU = 0.05


def temporal_iou(a, b):
    """Frame-set IoU of two inclusive integer intervals (start, end)."""
    a_start, a_end = int(a[0]), int(a[1])
    b_start, b_end = int(b[0]), int(b[1])
    if a_end < a_start or b_end < b_start:
        raise ValueError(f"intervals must satisfy start <= end, "
                         f"got {a!r} and {b!r}")
    inter = max(0, min(a_end, b_end) - max(a_start, b_start) + 1)
    union = (a_end - a_start + 1) + (b_end - b_start + 1) - inter
    return inter / union


def tube_stiou(pred, gt):
    """Aggregate box IoU of two tracks: summed per-frame intersection areas
    over summed per-frame union areas. On frames covered by only one track,
    that track's box area joins the union with nothing to intersect."""
    inter_total = 0.0
    union_total = 0.0
    lo = min(pred.start, gt.start)
    hi = max(pred.end, gt.end)
    for frame in range(lo, hi + 1):
        a = pred.box_at(frame)
        b = gt.box_at(frame)
        if a is not None and b is not None:
            inter = intersection_area(a, b)
            inter_total += inter
            union_total += a.area() + b.area() - inter
        elif a is not None:
            union_total += a.area()
        elif b is not None:
            union_total += b.area()
    if union_total <= 0.0:
        return 0.0
    return inter_total / union_total


def average_precision(records, num_gt):
    """Continuous average precision.

    `records` holds (confidence, is_tp) or (confidence, is_tp, tiebreak)
    entries; ranking is by confidence descending, ties broken by the tiebreak
    (input position when absent). Every true positive contributes its
    precision-at-rank, normalized by `num_gt`.
    """
    if num_gt <= 0:
        return 0.0
    decorated = []
    for position, record in enumerate(records):
        confidence, is_tp = record[0], record[1]
        tiebreak = record[2] if len(record) > 2 else position
        decorated.append((-float(confidence), tiebreak, bool(is_tp)))
    decorated.sort(key=lambda r: (r[0], r[1]))
    hits = 0
    total = 0.0
    for rank, (_, _, is_tp) in enumerate(decorated, start=1):
        if is_tp:
            hits += 1
            total += hits / rank
    return total / num_gt


@dataclass(frozen=True)
class EvalReport:
    temporal_ap: float
    tube_ap: float
    recovery_pct: float
    success_pct: float
    per_pair: tuple

    def to_dict(self):
        return {
            "temporal_ap_25": self.temporal_ap,
            "tube_ap_25": self.tube_ap,
            "recovery_pct": self.recovery_pct,
            "success_pct": self.success_pct,
            "pairs": [dict(row) for row in self.per_pair],
        }

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _pair_recovery(pred, gt):
    """Fraction of GT-track frames whose predicted box matches at IoU >= 0.5."""
    hits = 0
    frames = gt.frames()
    for frame in frames:
        box = None if pred is None else pred.box_at(frame)
        if box is not None and box_iou(box, gt.box_at(frame)) >= RECOVERY_IOU:
            hits += 1
    return hits / len(frames)


def evaluate(predictions, ground_truths):
    """Score a {pair_id: track-or-None} prediction map against
    {pair_id: ground-truth track}. Every ground-truth pair counts; extra
    predictions for unknown pairs are an error."""
    if not ground_truths:
        raise ValueError("no ground-truth pairs to evaluate")
    unknown = sorted(set(predictions) - set(ground_truths))
    if unknown:
        raise ValueError(f"predictions for unknown pairs: {unknown}")
    temporal_records, tube_records, rows = [], [], []
    recovery_sum = 0.0
    successes = 0
    for pair_id in sorted(ground_truths):
        gt = ground_truths[pair_id]
        pred = predictions.get(pair_id)
        if pred is None:
            rows.append({"pair_id": pair_id, "predicted": False,
                         "temporal_iou": 0.0, "tube_iou": 0.0,
                         "recovery": 0.0, "peak_score": None})
            continue
        t_iou = temporal_iou((pred.start, pred.end), (gt.start, gt.end))
        s_iou = tube_stiou(pred, gt)
        confidence = pred.peak_score if pred.peak_score is not None else 0.0
        temporal_records.append((confidence, t_iou >= TEMPORAL_TP_IOU, pair_id))
        tube_records.append((confidence, s_iou >= TUBE_TP_IOU, pair_id))
        recovery = _pair_recovery(pred, gt)
        recovery_sum += recovery
        if s_iou > SUCCESS_IOU:
            successes += 1
        rows.append({"pair_id": pair_id, "predicted": True,
                     "temporal_iou": t_iou, "tube_iou": s_iou,
                     "recovery": recovery, "peak_score": confidence})
    num_gt = len(ground_truths)
    return EvalReport(
        temporal_ap=average_precision(temporal_records, num_gt),
        tube_ap=average_precision(tube_records, num_gt),
        recovery_pct=100.0 * recovery_sum / num_gt,
        success_pct=100.0 * successes / num_gt,
        per_pair=tuple(rows),
    )


def ground_truth_tracks(pairs):
    """{pair_id: GT response track} for a list of generated pairs."""
    return {pair.pair_id: pair.gt.response_track for pair in pairs}
