"""What the extra stages actually do — and when they do nothing.

A tied-weight model can run the same block once or several times, so the
stage count becomes a dial. This script runs one pair at one, two, and
three stages, watching the instrumentation counters and the final scores
shift as mined knowledge feeds back into the query and video features.
It then exercises the exact no-op guarantees the pipeline makes:

  * a single-stage forward mines nothing (counters stay zero),
  * with refinement disabled, extra stages see first-stage inputs
    unchanged, so every stage repeats the first stage's outputs,
  * video refinement with blend 0 returns the original features
    bit-for-bit, and a query refiner given empty knowledge is the
    identity.

No files written.
"""

import numpy as np

from querytrack import autograd as ag
from querytrack.inference import model_frames
from querytrack.knowledge import TopSelection, appearance_knowledge
from querytrack.model import Model, ModelConfig
from querytrack.refinement import refine_video
from querytrack.synthetic import SceneConfig, generate_pair


def main():
    config = ModelConfig(stages=3, frames_per_clip=6, frame_size=48,
                         channels=32, backbone_depth=1, max_frames=6,
                         tie_weights=True, score_threshold=0.45)
    pair = generate_pair(23, config=SceneConfig(canvas=48), clip_len=6)
    query = ag.tensor(model_frames(pair.query))
    frames = ag.tensor(model_frames(pair.frames))

    model = Model(config, seed=9)
    for stages in (1, 2, 3):
        model.reset_counters()
        with ag.no_grad():
            out = model(query, frames, stages=stages)
        print(f"stages={stages}: final scores "
              f"{np.array2string(out.final_scores, precision=3)}")
        print(f"          counters {model.counters}")

    # Refinement off: stages repeat the first stage exactly.
    frozen = Model(config, seed=9, refine_disabled=True)
    with ag.no_grad():
        out = frozen(query, frames, stages=3)
    for k in (1, 2):
        same = np.array_equal(out.stage_logits[0].data,
                              out.stage_logits[k].data)
        print(f"refine_disabled: stage {k + 1} logits == stage 1 logits: "
              f"{same}")
    print(f"refine_disabled counters: {frozen.counters}")

    # Blend 0 keeps the video features bit-exact.
    rng = np.random.default_rng(0)
    video = ag.tensor(rng.normal(size=(6, 36, 32)))
    saliency = ag.tensor(rng.uniform(size=(6, 36)))
    kept = refine_video(saliency, video, 0.0)
    print("refine_video(beta=0) bit-exact:",
          np.array_equal(kept.data, video.data))

    # Empty knowledge passes the query through untouched.
    block = model._stage_block(0)
    empty = appearance_knowledge(
        TopSelection(frames=(), scores=(), boxes=()),
        ag.tensor(rng.normal(size=(6, 36, 32))), (6, 6), 3, 48)
    tokens = ag.tensor(rng.normal(size=(36, 32)))
    refined = block.refine_query(tokens, empty)
    print("refine_query(empty knowledge) identity:",
          np.array_equal(refined.data, tokens.data))


if __name__ == "__main__":
    main()
