"""The end-to-end staged localization pipeline.

A shared backbone embeds the query crop and every frame; each stage fuses
query into video, attends across time within a window, and (except the last
stage) mines appearance/spatial knowledge to refine the next stage's inputs.
The final stage runs its own prediction heads.
"""

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .attention import (CrossAttentionBlock, MaskedSelfAttention, TemporalMask,
                        TokenDownsampler, fuse_video)
from .geometry import (DEFAULT_ANCHOR_RATIOS, DEFAULT_ANCHOR_SCALES,
                       make_anchor_set)
from .knowledge import (AppearanceKnowledge, DetectionHeads, SpatialKnowledge,
                        appearance_knowledge, decode_boxes, per_frame_best,
                        select_topn, sigmoid_scores, spatial_knowledge)
from .nn import Linear, Module, ModuleList
from .refinement import QUERY_MODES, QueryRefiner, refine_video


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 3
    frames_per_clip: int = 8
    frame_size: int = 96
    patch_size: int = 8
    channels: int = 64
    window_radius: int = 2
    score_threshold: float = 0.7
    top_n: int = 3
    pool_size: int = 5
    spatial_blend: float = 0.5
    video_blend: float = 0.1
    anchor_scales: tuple = DEFAULT_ANCHOR_SCALES
    anchor_ratios: tuple = DEFAULT_ANCHOR_RATIOS
    query_mode: str = "cross_attention"
    backbone_depth: int = 2
    attn_heads: int = 1
    max_frames: int = 32
    downsample_stride: int = 2
    tie_weights: bool = False

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError(f"stage count must be >= 1, got {self.stages}")
        if self.frame_size % self.patch_size:
            raise ValueError(f"frame size {self.frame_size} not divisible by "
                             f"patch size {self.patch_size}")
        grid = self.frame_size // self.patch_size
        if grid % self.downsample_stride:
            raise ValueError(f"token grid {grid} not divisible by downsample "
                             f"stride {self.downsample_stride}")
        if self.channels % 2:
            raise ValueError(f"channel count must be even, got {self.channels}")
        if self.channels % self.attn_heads:
            raise ValueError(f"channels {self.channels} not divisible by "
                             f"{self.attn_heads} attention heads")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError(f"score threshold must lie in (0, 1), "
                             f"got {self.score_threshold}")
        for name in ("spatial_blend", "video_blend"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.window_radius < 0:
            raise ValueError(f"window radius must be >= 0, got {self.window_radius}")
        if self.top_n < 1 or self.pool_size < 1:
            raise ValueError("top_n and pool_size must be >= 1")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"unknown query mode {self.query_mode!r}")
        if self.frames_per_clip > self.max_frames:
            raise ValueError(f"frames_per_clip {self.frames_per_clip} exceeds "
                             f"max_frames {self.max_frames}")
        if self.backbone_depth < 0:
            raise ValueError("backbone depth must be >= 0")

    def grid(self):
        g = self.frame_size // self.patch_size
        return (g, g)

    def down_grid(self):
        g = self.frame_size // self.patch_size // self.downsample_stride
        return (g, g)

    def anchors_per_cell(self):
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def make_anchors(self):
        gh, gw = self.grid()
        return make_anchor_set(gh, gw, self.frame_size,
                               scales=self.anchor_scales, ratios=self.anchor_ratios)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["anchor_scales"] = list(self.anchor_scales)
        out["anchor_ratios"] = list(self.anchor_ratios)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        coerced = dict(data)
        for key in ("anchor_scales", "anchor_ratios"):
            if key in coerced:
                coerced[key] = tuple(float(v) for v in coerced[key])
        return cls(**coerced)

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class Backbone(Module):
    """Patch embedding plus a short stack of self-attention layers, shared
    between the query crop and video frames."""

    def __init__(self, frame_size, patch_size, channels, depth, rng, heads=1):
        if frame_size % patch_size:
            raise ValueError(f"frame size {frame_size} not divisible by "
                             f"patch size {patch_size}")
        self.embed = Linear(patch_size * patch_size * 3, channels, rng)
        self.layers = ModuleList(
            [CrossAttentionBlock(channels, rng, heads=heads) for _ in range(depth)])
        self.patch = patch_size
        self.grid = frame_size // patch_size

    def tokens(self, images):
        """[N, S, S, 3] -> [N, grid*grid, C]

        Pixel values are 8-bit intensities; they are standardized to roughly
        zero mean and unit variance before embedding, which keeps the initial
        attention logits in softmax's responsive range.
        """
        n = images.shape[0]
        g, p = self.grid, self.patch
        x = images.reshape(n, g, p, g, p, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(n, g * g, p * p * 3)
        x = self.embed((x - 127.5) * (1.0 / 63.75))
        for layer in self.layers:
            x = layer(x, x).features
        return x

    def forward(self, image):
        """Single image [S, S, 3] -> feature grid [grid, grid, C]."""
        t = self.tokens(image.reshape((1,) + image.shape))
        return t.reshape(self.grid, self.grid, -1)


class StageBlock(Module):
    """One stage's trainable pieces. Knowledge heads and the query refiner
    exist only on stages that feed a successor (or on the shared block when
    weights are tied)."""

    def __init__(self, config, rng, with_knowledge):
        c = config.channels
        gh, gw = config.grid()
        self.fusion = CrossAttentionBlock(c, rng, heads=config.attn_heads)
        self.reduce = TokenDownsampler(c, gh, gw, config.max_frames, rng,
                                       stride=config.downsample_stride)
        self.temporal = MaskedSelfAttention(c, rng, heads=config.attn_heads)
        if with_knowledge:
            self.heads = DetectionHeads(c, config.anchors_per_cell(),
                                        config.down_grid(), config.grid(), rng)
            self.refine_query = QueryRefiner(c, config.query_mode, rng,
                                             heads=config.attn_heads)


@dataclass
class StageState:
    query_tokens: ag.Tensor
    video_tokens: ag.Tensor
    fused: ag.Tensor
    fusion_maps: ag.Tensor
    attended: ag.Tensor
    temporal_maps: ag.Tensor
    logits: ag.Tensor
    boxes: ag.Tensor
    appearance: Optional[AppearanceKnowledge]
    spatial: Optional[SpatialKnowledge]


@dataclass
class ModelOutput:
    stage_logits: list
    stage_boxes: list
    final_scores: np.ndarray
    final_boxes: list


class Model(Module):
    """K-stage pipeline over a query crop and a clip of frames.

    `refine_disabled` keeps every head output but skips knowledge mining and
    refinement, so later stages see first-stage inputs unchanged. Counters
    record how often each knowledge/refinement path ran, which the endpoint
    tests assert on.
    """

    def __init__(self, config, seed=0, refine_disabled=False):
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(config.frame_size, config.patch_size,
                                 config.channels, config.backbone_depth, rng,
                                 heads=config.attn_heads)
        if config.tie_weights:
            self.block = StageBlock(config, rng, with_knowledge=True)
            self.blocks = None
        else:
            self.block = None
            self.blocks = ModuleList(
                [StageBlock(config, rng, with_knowledge=(k < config.stages - 1))
                 for k in range(config.stages)])
        self.predict = DetectionHeads(config.channels, config.anchors_per_cell(),
                                      config.down_grid(), config.grid(), rng)
        self.anchors = config.make_anchors()
        self.config = config
        self.refine_disabled = refine_disabled
        self.counters = {"appearance_knowledge": 0, "spatial_knowledge": 0,
                         "query_refinement": 0, "video_refinement": 0}

    def reset_counters(self):
        for key in self.counters:
            self.counters[key] = 0

    def _stage_block(self, k):
        return self.block if self.config.tie_weights else self.blocks[k]

    def forward(self, query, frames, stages=None, collect_states=False):
        cfg = self.config
        if stages is None:
            stages = cfg.stages
        elif stages != cfg.stages and not cfg.tie_weights:
            raise ValueError("overriding the stage count requires tied weights")
        if stages < 1:
            raise ValueError(f"stage count must be >= 1, got {stages}")
        query = query if isinstance(query, ag.Tensor) else ag.tensor(query)
        frames = frames if isinstance(frames, ag.Tensor) else ag.tensor(frames)
        clip_len = frames.shape[0]
        gh, gw = cfg.grid()
        dh, dw = cfg.down_grid()
        hw = dh * dw
        q_tokens = self.backbone.tokens(query.reshape((1,) + query.shape))[0]
        v_tokens = self.backbone.tokens(frames)
        base_video = v_tokens
        mask = TemporalMask.build(cfg.window_radius, clip_len, hw)

        q, v = q_tokens, v_tokens
        stage_logits, stage_boxes, states = [], [], []
        for k in range(stages):
            final = k == stages - 1
            stage_q, stage_v = q, v
            block = self._stage_block(k)
            fused, fusion_maps = fuse_video(block.fusion, v, q)
            reduced = block.reduce(fused.reshape(clip_len, gh, gw, cfg.channels))
            attended, temporal_maps = block.temporal(
                reduced.reshape(clip_len * hw, cfg.channels), mask)
            heads = self.predict if final else block.heads
            logits, offsets = heads(attended, clip_len)
            boxes = decode_boxes(offsets, self.anchors)
            stage_logits.append(logits)
            stage_boxes.append(boxes)

            appearance = spatial = None
            if not final and not self.refine_disabled:
                scores = sigmoid_scores(logits)
                best_scores, best_boxes = per_frame_best(scores, boxes.data)
                selection = select_topn(best_scores, best_boxes,
                                        cfg.score_threshold, cfg.top_n)
                appearance = appearance_knowledge(selection, v, (gh, gw),
                                                  cfg.pool_size, cfg.frame_size)
                self.counters["appearance_knowledge"] += 1
                spatial = spatial_knowledge(fusion_maps, temporal_maps,
                                            cfg.spatial_blend, (gh, gw), (gh, gw))
                self.counters["spatial_knowledge"] += 1
                q = block.refine_query(q, appearance)
                self.counters["query_refinement"] += 1
                v = refine_video(spatial.saliency, base_video, cfg.video_blend)
                self.counters["video_refinement"] += 1
            if collect_states:
                states.append(StageState(
                    query_tokens=stage_q, video_tokens=stage_v,
                    fused=fused, fusion_maps=fusion_maps,
                    attended=attended, temporal_maps=temporal_maps,
                    logits=logits, boxes=boxes,
                    appearance=appearance, spatial=spatial))

        final_scores = sigmoid_scores(stage_logits[-1])
        best_scores, best_boxes = per_frame_best(final_scores, stage_boxes[-1].data)
        output = ModelOutput(stage_logits=stage_logits, stage_boxes=stage_boxes,
                             final_scores=best_scores, final_boxes=best_boxes)
        if collect_states:
            return output, states
        return output
