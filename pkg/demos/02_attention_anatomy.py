"""Open up one forward pass and inspect the attention machinery.

A small untrained model runs on a single synthetic pair while collecting
per-stage internals: the query-to-frame fusion maps, the windowed temporal
attention, and the saliency map distilled from both. Along the way the
script verifies the two structural facts every attention matrix here obeys
— rows are probability distributions, and temporal attention is exactly
zero outside the +/-u frame window.

Writes per-stage saliency images under demos/out/attention/.
"""

import os
import sys

import numpy as np

from querytrack import autograd as ag
from querytrack.inference import model_frames
from querytrack.model import Model, ModelConfig
from querytrack.ppm import save_pgm
from querytrack.synthetic import SceneConfig, generate_pair

OUT = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
    os.path.dirname(__file__), "out", "attention")


def main():
    os.makedirs(OUT, exist_ok=True)
    config = ModelConfig(stages=2, frames_per_clip=6, frame_size=48,
                         channels=32, window_radius=1, backbone_depth=1,
                         max_frames=6)
    model = Model(config, seed=3)
    pair = generate_pair(11, config=SceneConfig(canvas=48), clip_len=6)

    with ag.no_grad():
        _, states = model(ag.tensor(model_frames(pair.query)),
                          ag.tensor(model_frames(pair.frames)),
                          collect_states=True)

    clip_len = len(pair.frames)
    tokens_per_frame = (config.frame_size // config.patch_size
                        // config.downsample_stride) ** 2
    print(f"clip of {clip_len} frames, {tokens_per_frame} tokens per frame "
          f"after downsampling, window radius u={config.window_radius}")

    for k, state in enumerate(states, start=1):
        fusion = state.fusion_maps.data      # [L, frame tokens, query tokens]
        temporal = state.temporal_maps.data  # [L*hw, L*hw]
        print(f"\nstage {k}")
        print(f"  fusion maps {fusion.shape}: row sums in "
              f"[{fusion.sum(-1).min():.9f}, {fusion.sum(-1).max():.9f}]")
        print(f"  temporal attention {temporal.shape}: row sums in "
              f"[{temporal.sum(-1).min():.9f}, {temporal.sum(-1).max():.9f}]")

        # Every (token row, token col) entry whose frames are more than u
        # apart must be exactly zero — not small, zero.
        frame_of = np.arange(temporal.shape[0]) // tokens_per_frame
        apart = np.abs(frame_of[:, None] - frame_of[None, :])
        outside = temporal[apart > config.window_radius]
        print(f"  out-of-window entries: {outside.size}, "
              f"max |value| = {np.abs(outside).max():.1f}")

        if state.spatial is not None:
            saliency = state.spatial.saliency.data  # [L, grid*grid]
            side = int(np.sqrt(saliency.shape[1]))
            for frame in range(clip_len):
                img = saliency[frame].reshape(side, side)
                img = (255 * (img - img.min())
                       / max(np.ptp(img), 1e-12)).astype(np.uint8)
                save_pgm(os.path.join(
                    OUT, f"stage{k}_frame{frame}.pgm"), img)
            print(f"  saliency range [{saliency.min():.4f}, "
                  f"{saliency.max():.4f}] -> {clip_len} PGMs in {OUT}")

    print("\nknowledge/refinement pass counters:", model.counters)


if __name__ == "__main__":
    main()
