"""Render a small synthetic benchmark and look at what's inside it.

Each pair couples a close-up query crop of a textured shape with a short
video in which that shape wanders, may hide behind an occluder, and leaves
the frame. The annotation marks every frame the target occupies and the
most recent contiguous visible run — the response track a model is asked
to recover.

Writes the dataset plus per-frame contact sheets (ground-truth box burned
in) under demos/out/benchmark/.
"""

import os
import sys

import numpy as np

from querytrack.ppm import save_ppm
from querytrack.synthetic import dataset_stats, generate_dataset, save_dataset

OUT = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
    os.path.dirname(__file__), "out", "benchmark")


def outline(image, box, color=(255, 64, 64)):
    """Burn a 1-pixel rectangle outline into a uint8 frame copy."""
    img = image.copy()
    h, w = img.shape[:2]
    x1, y1, x2, y2 = (int(round(v)) for v in box.astuple())
    x1, x2 = max(x1, 0), min(x2, w - 1)
    y1, y2 = max(y1, 0), min(y2, h - 1)
    img[y1:y2 + 1, (x1, x2)] = color
    img[(y1, y2), x1:x2 + 1] = color
    return img


def contact_sheet(pair):
    """Frames side by side, ground-truth boxes drawn where the target is."""
    tiles = []
    for i, frame in enumerate(pair.frames):
        box = pair.gt.boxes[i]
        tiles.append(frame if box is None else outline(frame, box))
    return np.concatenate(tiles, axis=1)


def main():
    os.makedirs(OUT, exist_ok=True)
    pairs = generate_dataset(4, clip_len=8, base_seed=7)
    save_dataset(pairs, os.path.join(OUT, "dataset"))

    print("dataset stats:", dataset_stats(pairs))
    for pair in pairs:
        track = pair.gt.response_track
        visible = sum(pair.gt.occurrence)
        print(f"{pair.pair_id}: {len(pair.frames)} frames, "
              f"{visible} visible, response track "
              f"[{track.start}, {track.end}]")
        save_ppm(os.path.join(OUT, f"{pair.pair_id}_query.ppm"), pair.query)
        save_ppm(os.path.join(OUT, f"{pair.pair_id}_frames.ppm"),
                 contact_sheet(pair))
    print(f"wrote dataset + contact sheets under {OUT}")


if __name__ == "__main__":
    main()
