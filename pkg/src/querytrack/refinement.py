"""Turning one stage's knowledge into the next stage's inputs.

The query is refreshed with appearance knowledge (RoI tokens), the video
features with spatial saliency. Video refinement always starts from the
first-stage features, so saliency never compounds across stages.
"""

from . import autograd as ag
from .attention import CrossAttentionBlock
from .nn import ConvBlock, Linear, Module

QUERY_MODES = ("cross_attention", "addition", "concatenation")


class QueryRefiner(Module):
    """Fold pooled target regions back into the query tokens.

    Knowledge rois pass a conv block and flatten to n'*P*P tokens; the mode
    decides how they meet the query: attention over the tokens, adding the
    mean token, or concatenating it channel-wise and projecting back. Empty
    knowledge leaves the query untouched.
    """

    def __init__(self, channels, mode, rng, heads=1):
        if mode not in QUERY_MODES:
            raise ValueError(f"unknown query refinement mode {mode!r}; "
                             f"expected one of {QUERY_MODES}")
        self.knowledge_conv = ConvBlock(channels, channels, rng)
        if mode == "cross_attention":
            self.attend = CrossAttentionBlock(channels, rng, heads=heads)
        elif mode == "concatenation":
            self.merge = Linear(2 * channels, channels, rng)
        self.mode = mode
        self.channels = channels

    def forward(self, query, knowledge):
        if knowledge is None or len(knowledge) == 0:
            return query
        if knowledge.rois.shape[-1] != self.channels:
            raise ValueError(f"knowledge channels {knowledge.rois.shape[-1]} != "
                             f"refiner channels {self.channels}")
        tokens = self.knowledge_conv(knowledge.rois)
        tokens = tokens.reshape(-1, self.channels)      # [n'*P*P, C]
        if self.mode == "cross_attention":
            return self.attend(query, tokens).features
        pooled = tokens.mean(axis=0)                    # [C]
        if self.mode == "addition":
            return query + pooled
        tiled = ag.broadcast_to(pooled.reshape(1, self.channels), query.shape)
        return self.merge(ag.concat([query, tiled], axis=-1))


def refine_video(saliency, base_video, beta):
    """base scaled toward its salient tokens: beta*(saliency (x) base) +
    (1-beta)*base, saliency broadcast over channels.

    beta=0 returns `base_video` bit-exactly; saliency of all ones does too.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"blend weight must be in [0, 1], got {beta}")
    if saliency.shape != base_video.shape[:2]:
        raise ValueError(f"saliency {saliency.shape} does not match video "
                         f"tokens {base_video.shape}")
    frames, tokens = saliency.shape
    weighted = saliency.reshape(frames, tokens, 1) * base_video
    return weighted * beta + base_video * (1.0 - beta)
