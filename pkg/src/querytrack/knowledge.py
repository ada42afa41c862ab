"""Mining what the model currently believes about the target.

Two products per stage: RoI features of the most confident detected regions
(appearance), and a saliency map blended from the cross- and self-attention
weights (spatial). Both feed the refiners that prepare the next stage.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from . import autograd as ag
from .geometry import AnchorSet, Box
from .nn import Conv2d, ConvBlock, Module


class DetectionHeads(Module):
    """Upsample attended tokens to the full grid and emit per-anchor
    classification logits plus box corner offsets.

    Input tokens cover an in_h x in_w grid per frame; the heads resize to
    out_h x out_w, project, split channels in half, and run one conv block
    per output. Channel count must be even for the split.
    """

    def __init__(self, channels, anchors_per_cell, in_grid, out_grid, rng):
        if channels % 2:
            raise ValueError(f"head channel count must be even, got {channels}")
        self.up_proj = Conv2d(channels, channels, 1, rng)
        self.cls_head = ConvBlock(channels // 2, anchors_per_cell, rng)
        self.reg_head = ConvBlock(channels // 2, 4 * anchors_per_cell, rng)
        self.in_h, self.in_w = in_grid
        self.out_h, self.out_w = out_grid
        self.channels = channels

    def forward(self, tokens, frames):
        """tokens: [frames * in_h * in_w, C] -> (logits [L,H,W,m], offsets [L,H,W,4m])"""
        x = tokens.reshape(frames, self.in_h, self.in_w, self.channels)
        x = ag.bilinear_resize(x, self.out_h, self.out_w)
        x = self.up_proj(x)
        half = self.channels // 2
        logits = self.cls_head(x[..., :half])
        offsets = self.reg_head(x[..., half:])
        return logits, offsets


def decode_boxes(offsets, anchors: AnchorSet, clamp=True):
    """Add predicted corner offsets to the anchor boxes.

    offsets: [L, H, W, 4m] -> decoded [L, H, W, m, 4]; with clamp=True the
    corners are clipped to the frame bounds (differentiable clip).
    """
    frames, gh, gw, quad = offsets.shape
    m = anchors.per_cell
    if (gh, gw) != (anchors.grid_h, anchors.grid_w) or quad != 4 * m:
        raise ValueError(f"offsets {offsets.shape} do not match anchor grid "
                         f"{anchors.grid_h}x{anchors.grid_w}x{m}")
    decoded = offsets.reshape(frames, gh, gw, m, 4) + ag.tensor(anchors.reshaped())
    if clamp:
        decoded = ag.clip(decoded, 0.0, anchors.frame_size)
    return decoded


def per_frame_best(scores, boxes):
    """Pick each frame's highest-scoring anchor (first index on ties).

    scores: [L, H, W, m] sigmoid scores; boxes: [L, H, W, m, 4]; both plain
    arrays. Returns ([L] best scores, [L] Box list with sanitized corners).
    """
    frames = scores.shape[0]
    flat_scores = scores.reshape(frames, -1)
    flat_boxes = boxes.reshape(frames, -1, 4)
    best = np.argmax(flat_scores, axis=1)
    best_scores = flat_scores[np.arange(frames), best]
    best_boxes = [Box.ordered(*flat_boxes[i, best[i]]) for i in range(frames)]
    return best_scores, best_boxes


@dataclass(frozen=True)
class TopSelection:
    """Frames whose best score clears the confidence bar, most confident first."""

    frames: tuple
    scores: tuple
    boxes: tuple

    def __len__(self):
        return len(self.frames)


def select_topn(best_scores, best_boxes, threshold, limit):
    """Keep frames scoring strictly above `threshold`, then the top `limit`
    by score (ties: earlier frame wins). Fewer than `limit` survivors are all
    kept; an empty result is valid."""
    order = sorted(range(len(best_scores)),
                   key=lambda i: (-float(best_scores[i]), i))
    picked = [i for i in order if float(best_scores[i]) > threshold][:limit]
    return TopSelection(frames=tuple(picked),
                        scores=tuple(float(best_scores[i]) for i in picked),
                        boxes=tuple(best_boxes[i] for i in picked))


@dataclass
class AppearanceKnowledge:
    """RoI features of the selected regions: rois [n', P, P, C] (None when
    nothing was selected), with source frame indices and scores."""

    rois: Optional[ag.Tensor]
    source_frames: tuple
    source_scores: tuple

    def __len__(self):
        return len(self.source_frames)


def appearance_knowledge(selection, video_tokens, grid, pool_size, frame_size):
    """RoIAlign the selected boxes out of the stage-input video features.

    video_tokens: [L, HW, C]; grid: (H, W) token layout per frame.
    """
    if len(selection) == 0:
        return AppearanceKnowledge(rois=None, source_frames=(), source_scores=())
    gh, gw = grid
    pooled = []
    for frame, box in zip(selection.frames, selection.boxes):
        fmap = video_tokens[frame].reshape(gh, gw, -1)
        pooled.append(ag.roi_pool(fmap, box.astuple(), pool_size, frame_size))
    return AppearanceKnowledge(rois=ag.stack(pooled, axis=0),
                               source_frames=selection.frames,
                               source_scores=selection.scores)


def extract_diagonal_blocks(maps):
    """Each frame's within-frame block of the temporal attention maps.

    maps: [L, hw, L*hw] -> [L, hw, hw], taking columns [i*hw, (i+1)*hw) for
    frame i.
    """
    frames, hw, total = maps.shape
    if total != frames * hw:
        raise ValueError(f"key dimension {total} != frames*tokens {frames * hw}")
    fi = np.arange(frames)[:, None, None]
    ri = np.arange(hw)[None, :, None]
    ci = (np.arange(frames) * hw)[:, None, None] + np.arange(hw)[None, None, :]
    return maps[fi, ri, ci]


@dataclass
class SpatialKnowledge:
    """Blended attention maps [L, HW, HW_q] and their per-frame saliency
    reduction [L, HW] in [0, 1]."""

    maps: ag.Tensor
    saliency: ag.Tensor


def spatial_knowledge(fusion_maps, temporal_maps, alpha, video_grid, query_grid):
    """Blend self-attention diagonal blocks into the cross-attention maps.

    fusion_maps: [L, HW, HW_q]; temporal_maps: [L, hw, L*hw]. The diagonal
    blocks are resized on both token grids (video side to video_grid, key
    side to query_grid) and mixed as alpha*resized + (1-alpha)*fusion.

    Saliency reduces each video token's row to its max over key tokens, then
    min-max normalizes per frame; a constant frame maps to all 0.5.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"blend weight must be in [0, 1], got {alpha}")
    frames, hw_video, hw_query = fusion_maps.shape
    gh, gw = video_grid
    qh, qw = query_grid
    if gh * gw != hw_video or qh * qw != hw_query:
        raise ValueError(f"fusion maps {fusion_maps.shape} do not match grids "
                         f"{video_grid} / {query_grid}")
    diag = extract_diagonal_blocks(temporal_maps)          # [L, hw, hw]
    _, hw, _ = diag.shape
    dh = int(round(np.sqrt(hw)))
    dw = hw // dh
    x = diag.reshape(frames, dh, dw, hw)
    x = ag.bilinear_resize(x, gh, gw)                      # [L, H, W, hw]
    x = x.reshape(frames * hw_video, dh, dw, 1)
    x = ag.bilinear_resize(x, qh, qw)                      # [L*HW, Hq, Wq, 1]
    resized = x.reshape(frames, hw_video, hw_query)
    maps = resized * alpha + fusion_maps * (1.0 - alpha)

    row = maps.max(axis=-1)                                # [L, HW]
    lo = row.min(axis=-1, keepdims=True)
    hi = row.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span.data <= 0.0
    safe = ag.where(flat, ag.tensor(np.ones_like(span.data)), span)
    saliency = ag.where(np.broadcast_to(flat, row.shape),
                        ag.tensor(np.full(row.shape, 0.5)), (row - lo) / safe)
    return SpatialKnowledge(maps=maps, saliency=saliency)


def sigmoid_scores(logits):
    """Selection-path scores: plain-array sigmoid of head logits."""
    return expit(logits.data if isinstance(logits, ag.Tensor) else logits)
