"""Finite-difference verification for every trainable block.

Each registered check builds a tiny fixed instance of one block in float64,
reads a deterministic scalar off its outputs, and compares analytic gradients
against central differences for every parameter (and, where cheap, the
inputs). `run_suite` drives them all and is what the command-line `gradcheck`
subcommand prints.
"""

import numpy as np

from . import autograd as ag
from . import nn
from .attention import (CrossAttentionBlock, MaskedSelfAttention, TemporalMask,
                        TokenDownsampler)
from .geometry import make_anchor_set
from .knowledge import DetectionHeads, decode_boxes, spatial_knowledge
from .model import Model, ModelConfig
from .precision import precision
from .refinement import QueryRefiner, refine_video
from .training import assign_targets, stage_loss
from .geometry import Box

BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3

_CHECKS = []


def _register(name, tol=BLOCK_TOL, max_coords=24):
    def wrap(builder):
        _CHECKS.append((name, builder, tol, max_coords))
        return builder
    return wrap


def _sq(t):
    return (t * t).mean()


def _rand(rng, shape):
    return ag.tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


@_register("linear")
def _check_linear(rng):
    layer = nn.Linear(5, 4, rng)
    x = _rand(rng, (3, 5))
    params = list(layer.named_parameters()) + [("input", x)]
    return lambda: _sq(layer(x)), params


@_register("conv_block")
def _check_conv_block(rng):
    block = nn.ConvBlock(3, 5, rng)
    x = _rand(rng, (2, 5, 5, 3))
    params = list(block.named_parameters()) + [("input", x)]
    return lambda: _sq(block(x)), params


@_register("layer_norm")
def _check_layer_norm(rng):
    layer = nn.LayerNorm(6)
    x = _rand(rng, (4, 6))
    params = list(layer.named_parameters()) + [("input", x)]
    return lambda: _sq(layer(x)), params


@_register("bilinear_resize")
def _check_bilinear(rng):
    x = _rand(rng, (2, 5, 4, 3))
    return lambda: _sq(ag.bilinear_resize(x, 3, 6)), [("input", x)]


@_register("roi_pool")
def _check_roi_pool(rng):
    features = _rand(rng, (6, 6, 4))
    wide = (3.1, 9.8, 14.5, 20.3)
    point = (7.0, 7.0, 7.0, 7.0)  # degenerate box: single-sample path

    def fn():
        a = ag.roi_pool(features, wide, 3, 24.0)
        b = ag.roi_pool(features, point, 3, 24.0)
        return _sq(a) + _sq(b)

    return fn, [("features", features)]


@_register("cross_attention")
def _check_cross_attention(rng):
    block = CrossAttentionBlock(8, rng)
    z = _rand(rng, (5, 8))
    u = _rand(rng, (3, 8))

    def fn():
        out = block(z, u)
        return _sq(out.features) + _sq(out.attn)

    return fn, list(block.named_parameters()) + [("z", z), ("u", u)]


@_register("masked_self_attention")
def _check_masked_attention(rng):
    block = MaskedSelfAttention(8, rng)
    mask = TemporalMask.build(1, 3, 2)
    tokens = _rand(rng, (6, 8))

    def fn():
        out = block(tokens, mask)
        return _sq(out.features) + _sq(out.attn)

    return fn, list(block.named_parameters()) + [("tokens", tokens)]


@_register("token_downsampler")
def _check_downsampler(rng):
    block = TokenDownsampler(6, 4, 4, 4, rng)
    x = _rand(rng, (2, 4, 4, 6))
    return lambda: _sq(block(x)), list(block.named_parameters()) + [("input", x)]


@_register("detection_heads")
def _check_heads(rng):
    heads = DetectionHeads(8, 2, (2, 2), (4, 4), rng)
    tokens = _rand(rng, (2 * 4, 8))

    def fn():
        logits, offsets = heads(tokens, 2)
        return _sq(logits) + _sq(offsets)

    return fn, list(heads.named_parameters()) + [("tokens", tokens)]


@_register("box_decode")
def _check_box_decode(rng):
    anchors = make_anchor_set(2, 2, 16.0)
    offsets = ag.tensor(0.1 * rng.normal(0.0, 1.0,
                                         (2, 2, 2, 4 * anchors.per_cell)),
                        requires_grad=True)
    return (lambda: _sq(decode_boxes(offsets, anchors, clamp=False)),
            [("offsets", offsets)])


@_register("stage_loss")
def _check_stage_loss(rng):
    anchors = make_anchor_set(2, 2, 16.0)
    m = anchors.per_cell
    logits = _rand(rng, (2, 2, 2, m))
    raw = ag.tensor(0.05 * rng.normal(0.0, 1.0, (2, 2, 2, 4 * m)),
                    requires_grad=True)
    gt = [Box(2.0, 3.0, 9.0, 11.0), None]
    targets = assign_targets(anchors.boxes, gt, [True, False])

    def fn():
        boxes = decode_boxes(raw, anchors, clamp=False)
        loss, _ = stage_loss(logits, boxes, targets, 16.0)
        return loss

    return fn, [("logits", logits), ("offsets", raw)]


def _roi_stack(rng, channels):
    return ag.tensor(rng.normal(0.0, 1.0, (2, 3, 3, channels)),
                     requires_grad=True)


@_register("query_refiner_cross_attention")
def _check_refiner_cross(rng):
    return _refiner_case(rng, "cross_attention")


@_register("query_refiner_addition")
def _check_refiner_addition(rng):
    return _refiner_case(rng, "addition")


@_register("query_refiner_concatenation")
def _check_refiner_concat(rng):
    return _refiner_case(rng, "concatenation")


def _refiner_case(rng, mode):
    refiner = QueryRefiner(8, mode, rng)
    query = _rand(rng, (4, 8))
    rois = _roi_stack(rng, 8)

    class _Knowledge:
        def __init__(self, tensor):
            self.rois = tensor

        def __len__(self):
            return self.rois.shape[0]

    fn = lambda: _sq(refiner(query, _Knowledge(rois)))
    return fn, list(refiner.named_parameters()) + [("query", query),
                                                   ("rois", rois)]


@_register("video_refine")
def _check_video_refine(rng):
    saliency = ag.tensor(rng.uniform(0.0, 1.0, (2, 4)), requires_grad=True)
    video = _rand(rng, (2, 4, 6))
    return (lambda: _sq(refine_video(saliency, video, 0.3)),
            [("saliency", saliency), ("video", video)])


@_register("spatial_knowledge")
def _check_spatial_knowledge(rng):
    fusion = ag.tensor(rng.uniform(0.05, 1.0, (2, 4, 4)), requires_grad=True)
    temporal = ag.tensor(rng.uniform(0.05, 1.0, (2, 4, 8)), requires_grad=True)

    def fn():
        known = spatial_knowledge(fusion, temporal, 0.5, (2, 2), (2, 2))
        return _sq(known.maps) + _sq(known.saliency)

    return fn, [("fusion", fusion), ("temporal", temporal)]


def tiny_model_config():
    """Smallest config that still runs every pipeline component.

    A fresh model scores every box near sigmoid(0) = 0.5, below the 0.7
    detection gate, so the mined-appearance branch stays inert here and its
    parameters correctly report zero gradient.  That branch cannot join a
    finite-difference check: crops are taken at detached box coordinates, so
    numeric differences see the crop region move while the analytic gradient
    (by design) does not.  The refiner's own backward pass is covered by the
    query_refiner block check, which hands it knowledge directly.
    """
    return ModelConfig(stages=2, frames_per_clip=3, frame_size=16, patch_size=8,
                       channels=8, window_radius=1, top_n=2, pool_size=2,
                       backbone_depth=1, max_frames=3)


@_register("full_model", tol=MODEL_TOL, max_coords=6)
def _check_full_model(rng):
    model = Model(tiny_model_config(), seed=7)
    query = ag.tensor(rng.uniform(0.0, 255.0, (16, 16, 3)))
    frames = ag.tensor(rng.uniform(0.0, 255.0, (3, 16, 16, 3)))

    def fn():
        out = model(query, frames)
        total = None
        for logits, boxes in zip(out.stage_logits, out.stage_boxes):
            part = _sq(logits) + _sq(boxes) * 1e-4
            total = part if total is None else total + part
        return total

    return fn, list(model.named_parameters())


def run_block(name, seed=0):
    """Gradient-check one registered block; returns its report row."""
    for reg_name, builder, tol, max_coords in _CHECKS:
        if reg_name == name:
            break
    else:
        known = [n for n, *_ in _CHECKS]
        raise ValueError(f"unknown block {name!r}; known: {known}")
    with precision(np.float64):
        rng = np.random.default_rng(seed)
        fn, params = builder(rng)
        report = ag.grad_check(fn, params, tol=tol, max_coords=max_coords,
                               seed=seed)
    worst = max(r["max_rel_err"] for r in report.values())
    return {
        "block": name,
        "tolerance": tol,
        "max_rel_err": worst,
        "checked": sum(r["checked"] for r in report.values()),
        "passed": all(r["passed"] for r in report.values()),
        "params": report,
    }


def block_names():
    return [name for name, *_ in _CHECKS]


def run_suite(names=None, seed=0):
    """Run all (or the named) block checks; returns ordered report rows."""
    if names is None:
        names = block_names()
    return [run_block(name, seed=seed) for name in names]
