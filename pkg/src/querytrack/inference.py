"""From per-frame scores and boxes to a response track.

The decision rule: smooth the score sequence with a (default identity) median
filter, find plateau local maxima, drop peaks below 0.79 of the global
maximum, take the most recent survivor, and grow its interval outward while
scores stay above 0.585 of the chosen peak. Both thresholds are relative, so
tracks are invariant to positive rescaling of the scores.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .geometry import Box
from .tracks import ResponseTrack

PEAK_KEEP_FACTOR = 0.79
EXTEND_FACTOR = 0.585


@dataclass(frozen=True)
class FramePrediction:
    score: float
    box: Box


def median_filter(scores, kernel=1):
    """Sliding-window median with edge replication; kernel 1 is the identity."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd and positive, got {kernel}")
    scores = np.asarray(scores, dtype=np.float64)
    if kernel == 1:
        return scores.copy()
    half = kernel // 2
    padded = np.pad(scores, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return np.median(windows, axis=-1)


def find_peaks(scores):
    """Indices of plateau peaks: for each maximal constant run that sits above
    both neighbouring runs (sequence edges count as above), the run's last
    frame. Returned in increasing frame order."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    peaks = []
    start = 0
    while start < n:
        end = start
        while end + 1 < n and scores[end + 1] == scores[start]:
            end += 1
        left_ok = start == 0 or scores[start - 1] < scores[start]
        right_ok = end == n - 1 or scores[end + 1] < scores[start]
        if left_ok and right_ok:
            peaks.append(end)
        start = end + 1
    return peaks


def infer_track(scores, boxes, kernel=1, peak_keep=PEAK_KEEP_FACTOR,
                extend=EXTEND_FACTOR):
    """Pick the most recent confident peak and extend it into a track.

    Returns None when every score is zero (nothing to anchor a peak on).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) < 1:
        raise ValueError(f"scores must be a non-empty 1-d sequence, "
                         f"got shape {scores.shape}")
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes for {len(scores)} scores")
    smoothed = median_filter(scores, kernel=kernel)
    top = smoothed.max()
    if top <= 0.0:
        return None
    peaks = [p for p in find_peaks(smoothed) if smoothed[p] >= peak_keep * top]
    peak = peaks[-1]
    peak_score = smoothed[peak]
    floor = extend * peak_score
    start = peak
    while start > 0 and smoothed[start - 1] >= floor:
        start -= 1
    end = peak
    while end + 1 < len(smoothed) and smoothed[end + 1] >= floor:
        end += 1
    return ResponseTrack(start=start, end=end,
                         boxes=tuple(boxes[start:end + 1]),
                         peak_score=float(peak_score))


def model_frames(images):
    """uint8 image stack -> float32 model input (the model standardizes
    8-bit intensities internally, so values stay in 0..255 here)."""
    return np.asarray(images, dtype=np.float32)


def predict_pair(model, pair, kernel=1):
    """Run the model on one pair and post-process into a track (or None)."""
    with ag.no_grad():
        output = model(ag.tensor(model_frames(pair.query)),
                       ag.tensor(model_frames(pair.frames)))
    return infer_track(output.final_scores, output.final_boxes, kernel=kernel)


def predict_dataset(model, pairs, kernel=1):
    """Ordered {pair_id: ResponseTrack or None} over a dataset."""
    return {pair.pair_id: predict_pair(model, pair, kernel=kernel)
            for pair in pairs}


# -- predictions file: one JSON object per line -------------------------------

_PREDICTION_KEYS = {"pair_id", "start", "end", "boxes", "peak_score"}


def save_predictions(path, predictions):
    with open(path, "w", encoding="utf-8") as fh:
        for pair_id, track in predictions.items():
            if track is None:
                record = {"pair_id": pair_id, "start": None, "end": None,
                          "boxes": None, "peak_score": None}
            else:
                record = {
                    "pair_id": pair_id,
                    "start": track.start,
                    "end": track.end,
                    "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in track.boxes],
                    "peak_score": track.peak_score,
                }
            fh.write(json.dumps(record) + "\n")


def load_predictions(path):
    predictions = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{where}: invalid JSON ({err})") from err
            if set(record) != _PREDICTION_KEYS:
                bad = sorted(set(record) ^ _PREDICTION_KEYS)
                raise ValueError(f"{where}: prediction fields mismatch: {bad}")
            pair_id = record["pair_id"]
            if pair_id in predictions:
                raise ValueError(f"{where}: duplicate pair_id {pair_id!r}")
            if record["start"] is None:
                predictions[pair_id] = None
                continue
            boxes = tuple(Box(*(float(v) for v in b)) for b in record["boxes"])
            predictions[pair_id] = ResponseTrack(
                start=int(record["start"]), end=int(record["end"]),
                boxes=boxes, peak_score=float(record["peak_score"]))
    return predictions
