"""The score-sequence decision rule, by hand.

infer_track turns per-frame confidence into a response track in four moves:
median-smooth, find plateau peaks, keep peaks within a fixed fraction of
the best one and take the most recent survivor, then grow that frame
outward while neighbours stay above a fraction of the peak. Both cuts are
relative, so rescaling every score leaves the track untouched.

No files written — this one is all printout.
"""

import numpy as np

from querytrack.geometry import Box
from querytrack.inference import (EXTEND_FACTOR, PEAK_KEEP_FACTOR,
                                  infer_track, median_filter)


def boxes_for(scores):
    return [Box(0.0, 0.0, 10.0, 10.0) for _ in scores]


def show(label, scores, kernel=1):
    track = infer_track(scores, boxes_for(scores), kernel=kernel)
    if track is None:
        print(f"{label}: no track (all scores zero)")
    else:
        print(f"{label}: frames [{track.start}, {track.end}], "
              f"peak score {track.peak_score:.3f}")
    return track


def main():
    print(f"peak keep factor {PEAK_KEEP_FACTOR}, extend factor {EXTEND_FACTOR}\n")

    # Two strong peaks; the most recent one wins even though it is slightly
    # lower, because 0.85 >= 0.79 * 0.9. Neither neighbour of frame 3
    # clears the extension floor 0.585 * 0.85, so the track is one frame.
    show("two peaks      ", [0.1, 0.9, 0.2, 0.85, 0.3])

    # Drop the late peak below the keep threshold and the early one wins.
    show("late peak faded", [0.1, 0.9, 0.2, 0.70, 0.3])

    # A shoulder above the floor is absorbed into the track.
    show("with shoulder  ", [0.1, 0.6, 0.9, 0.2, 0.1])

    # Relative thresholds: scaling all scores changes nothing.
    base = [0.2, 0.5, 0.95, 0.6, 0.1, 0.8, 0.75, 0.2]
    t1 = show("base           ", base)
    for c in (0.5, 2.0):
        tc = show(f"scaled x{c:<4}   ", [c * s for s in base])
        assert (tc.start, tc.end) == (t1.start, t1.end)

    # Median smoothing removes a one-frame glitch before peak picking.
    glitch = [0.2, 0.21, 0.95, 0.22, 0.2, 0.6, 0.62, 0.61]
    print("\nglitchy scores :", glitch)
    print("median k=3     :", [round(v, 2) for v in median_filter(glitch, 3)])
    show("raw            ", glitch)
    show("smoothed k=3   ", glitch, kernel=3)

    # All-zero scores give nothing to anchor a peak on.
    show("\nsilent clip    ", [0.0, 0.0, 0.0, 0.0])


if __name__ == "__main__":
    main()
