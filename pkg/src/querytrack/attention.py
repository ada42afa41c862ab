"""Cross-attention fusion and temporally windowed self-attention.

Both blocks follow the same sublayer recipe: residual attention with learned
q/k/v/output projections, then a residual feed-forward applied to the
normalized activations. The post-softmax weight matrix is returned alongside
the features because the later saliency stage consumes it.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import MASK_SENTINEL
from .nn import Conv2d, FeedForward, LayerNorm, Linear, Module


class AttentionOutput(NamedTuple):
    features: ag.Tensor
    attn: ag.Tensor


@dataclass(frozen=True)
class TemporalMask:
    """Token-level visibility window: tokens attend only to frames within
    `radius` of their own frame."""

    radius: int
    frames: int
    tokens_per_frame: int
    mask: np.ndarray

    @classmethod
    def build(cls, radius, frames, tokens_per_frame):
        if radius < 0:
            raise ValueError(f"window radius must be >= 0, got {radius}")
        frame_of = np.repeat(np.arange(frames), tokens_per_frame)
        mask = np.abs(frame_of[:, None] - frame_of[None, :]) <= radius
        return cls(radius=radius, frames=frames,
                   tokens_per_frame=tokens_per_frame, mask=mask)


def _swap_last(t):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)


def _split_heads(t, heads):
    """[..., n, C] -> [..., heads, n, C/heads]"""
    *lead, n, c = t.shape
    t = t.reshape(tuple(lead) + (n, heads, c // heads))
    nd = t.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return t.transpose(perm)


def _merge_heads(t):
    """[..., heads, n, d] -> [..., n, heads*d]"""
    nd = t.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    t = t.transpose(perm)
    *lead, n, h, d = t.shape
    return t.reshape(tuple(lead) + (n, h * d))


class CrossAttentionBlock(Module):
    """features = z + proj(Attn(q(z), k(u), v(u))), then a residual FFN.

    Accepts leading batch dimensions on both operands; with several heads the
    returned attention map is the head average.
    """

    def __init__(self, dim, rng, heads=1, ffn_mult=4):
        if dim % heads != 0:
            raise ValueError(f"channel count {dim} not divisible by {heads} heads")
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(dim, dim, rng)
        self.proj_v = Linear(dim, dim, rng)
        self.proj_o = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim, rng)
        self.dim = dim
        self.heads = heads

    def forward(self, z, u, additive_mask=None):
        if z.shape[-1] != self.dim or u.shape[-1] != self.dim:
            raise ValueError(f"channel mismatch: z {z.shape}, u {u.shape}, "
                             f"block expects {self.dim}")
        q, k, v = self.proj_q(z), self.proj_k(u), self.proj_v(u)
        if self.heads > 1:
            q = _split_heads(q, self.heads)
            k = _split_heads(k, self.heads)
            v = _split_heads(v, self.heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = (q @ _swap_last(k)) * scale
        if additive_mask is not None:
            scores = scores + ag.tensor(additive_mask)
        attn = ag.softmax(scores, axis=-1)
        ctx = attn @ v
        if self.heads > 1:
            ctx = _merge_heads(ctx)
            attn = attn.mean(axis=-3)
        a = z + self.proj_o(ctx)
        out = a + self.ffn(self.norm(a))
        return AttentionOutput(out, attn)


def fuse_video(block, frames, query):
    """Run one shared cross-attention block over every frame of a clip.

    frames: [L, HW, C] per-frame tokens; query: [HW_q, C].
    Returns fused tokens [L, HW, C] and per-frame maps [L, HW, HW_q].
    """
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError(f"expected a non-empty [L, HW, C] stack, got {frames.shape}")
    return block(frames, query)


class MaskedSelfAttention(Module):
    """Self-attention over all clip tokens, windowed in time.

    Scores outside the window get an additive sentinel before softmax, so
    out-of-window weights are exactly zero. Returns features [L*hw, C] and
    maps regrouped by query frame as [L, hw, L*hw].
    """

    def __init__(self, dim, rng, heads=1, ffn_mult=4):
        self.block = CrossAttentionBlock(dim, rng, heads=heads, ffn_mult=ffn_mult)

    def forward(self, tokens, mask):
        total = mask.frames * mask.tokens_per_frame
        if tokens.shape[0] != total:
            raise ValueError(f"token count {tokens.shape[0]} does not match mask "
                             f"({mask.frames} frames x {mask.tokens_per_frame} tokens)")
        additive = np.where(mask.mask, 0.0, MASK_SENTINEL)
        out, attn = self.block(tokens, tokens, additive_mask=additive)
        maps = attn.reshape(mask.frames, mask.tokens_per_frame, total)
        return AttentionOutput(out, maps)


class TokenDownsampler(Module):
    """Strided conv over each frame's token grid plus a learned
    spatio-temporal position embedding.

    The embedding splits into a spatial component shared by all frames and a
    temporal component indexed by frame position; both start at zero. Clips
    longer than `max_frames` are a configuration error.
    """

    def __init__(self, dim, grid_h, grid_w, max_frames, rng, stride=2, kernel_size=3):
        if grid_h % stride or grid_w % stride:
            raise ValueError(f"grid {grid_h}x{grid_w} not divisible by stride {stride}")
        self.conv = Conv2d(dim, dim, kernel_size, rng, stride=stride)
        self.out_h = grid_h // stride
        self.out_w = grid_w // stride
        self.spatial = ag.Parameter(np.zeros((self.out_h, self.out_w, dim)))
        self.temporal = ag.Parameter(np.zeros((max_frames, dim)))
        self.max_frames = max_frames

    def forward(self, x):
        frames = x.shape[0]
        if frames > self.max_frames:
            raise ValueError(f"clip has {frames} frames but the position embedding "
                             f"covers only {self.max_frames}")
        y = self.conv(x)
        emb = self.spatial + self.temporal[:frames].reshape(frames, 1, 1, -1)
        return y + emb
