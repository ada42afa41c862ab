"""Anchor assignment, mining, the staged loss, AdamW, and the train loop."""

import csv
import math
import os

import numpy as np
import pytest

from querytrack import autograd as ag
from querytrack.geometry import Box, box_iou, make_anchor_set
from querytrack.precision import precision
from querytrack.model import Model, ModelConfig, ModelOutput
from querytrack.synthetic import SceneConfig, generate_dataset
from querytrack.training import (IGNORE, NEGATIVE, POSITIVE, AdamW,
                                 DivergenceError, StageLossParts, TrainConfig,
                                 _check_finite, assign_targets,
                                 hard_negative_mining, sample_clip, stage_loss,
                                 total_loss, train)


@pytest.fixture(scope="module")
def anchors():
    return make_anchor_set(4, 4, 32.0).boxes


def _train_setup(num_pairs=2, clip_len=4):
    scene = SceneConfig(canvas=32, distractors=(1, 2), occlusion_prob=0.0,
                        blur_prob=0.0)
    pairs = generate_dataset(num_pairs, config=scene, clip_len=clip_len,
                             base_seed=5)
    cfg = ModelConfig(stages=2, frames_per_clip=clip_len, frame_size=32,
                      patch_size=8, channels=8, window_radius=1, top_n=2,
                      pool_size=2, backbone_depth=1, max_frames=clip_len)
    return pairs, cfg


# ------------------------------------------------------------- assignment

def test_non_visible_frames_are_all_negative(anchors):
    targets = assign_targets(anchors, [None, None], [False, False])
    assert np.all(targets.labels == NEGATIVE)
    assert np.all(targets.matched == 0.0)


def test_anchor_identical_to_gt_is_positive(anchors):
    gt = Box(*anchors[37])
    targets = assign_targets(anchors, [gt], [True])
    assert targets.labels[0, 37] == POSITIVE
    np.testing.assert_array_equal(targets.matched[0, 37], anchors[37])


def test_best_anchor_forced_positive_even_below_threshold(anchors):
    # A sliver in the corner overlaps nothing at IoU >= 0.4, yet exactly one
    # anchor (the best) must still be labelled positive.
    gt = Box(0.0, 0.0, 1.5, 1.5)
    best = int(np.argmax([box_iou(Box(*a), gt) for a in anchors]))
    assert box_iou(Box(*anchors[best]), gt) < 0.4
    targets = assign_targets(anchors, [gt], [True])
    assert np.sum(targets.labels[0] == POSITIVE) == 1
    assert targets.labels[0, best] == POSITIVE


def test_assignment_matches_threshold_oracle(anchors, rng):
    for _ in range(20):
        x1, y1 = rng.uniform(0, 24, 2)
        w, h = rng.uniform(4, 16, 2)
        gt = Box(x1, y1, min(x1 + w, 32.0), min(y1 + h, 32.0))
        targets = assign_targets(anchors, [gt], [True])
        ious = np.array([box_iou(Box(*a), gt) for a in anchors])
        best = int(np.argmax(ious))
        for a in range(anchors.shape[0]):
            if a == best or ious[a] >= 0.5:
                expect = POSITIVE
            elif ious[a] < 0.4:
                expect = NEGATIVE
            else:
                expect = IGNORE
            assert targets.labels[0, a] == expect, (a, ious[a])
        pos = targets.labels[0] == POSITIVE
        assert np.all(targets.matched[0, pos] == np.array(gt.astuple()))
        assert np.all(targets.matched[0, ~pos] == 0.0)


def test_mixed_visibility_isolated_per_frame(anchors):
    gt = Box(*anchors[5])
    targets = assign_targets(anchors, [None, gt, None], [False, True, False])
    assert np.sum(targets.labels[0] == POSITIVE) == 0
    assert np.sum(targets.labels[2] == POSITIVE) == 0
    assert targets.labels[1, 5] == POSITIVE


# ----------------------------------------------------------------- mining

def test_floor_of_eight_when_no_positives():
    labels = np.full((1, 20), NEGATIVE, dtype=np.int8)
    scores = np.linspace(0, 1, 20).reshape(1, 20)
    mined = hard_negative_mining(scores, labels)
    assert int(mined.sum()) == 8
    # The eight highest-scoring anchors, specifically.
    assert set(np.nonzero(mined[0])[0]) == set(range(12, 20))


def test_ratio_times_positives_budget():
    labels = np.full((1, 20), NEGATIVE, dtype=np.int8)
    labels[0, [3, 11]] = POSITIVE
    scores = np.linspace(1, 0, 20).reshape(1, 20)
    mined = hard_negative_mining(scores, labels, ratio=3)
    assert int(mined.sum()) == 6
    assert not mined[0, 3] and not mined[0, 11]


def test_mining_matches_sort_oracle(rng):
    for _ in range(25):
        labels = rng.choice([NEGATIVE, POSITIVE, IGNORE], size=(3, 30),
                            p=[0.7, 0.15, 0.15]).astype(np.int8)
        scores = rng.random((3, 30))
        mined = hard_negative_mining(scores, labels, ratio=2, floor=5)
        for f in range(3):
            negs = [a for a in range(30) if labels[f, a] == NEGATIVE]
            pos = sum(labels[f, a] == POSITIVE for a in range(30))
            budget = 2 * pos if pos else 5
            want = sorted(negs, key=lambda a: (-scores[f, a], a))[:budget]
            assert set(np.nonzero(mined[f])[0]) == set(want)


def test_mining_ties_break_to_lower_index():
    labels = np.full((1, 6), NEGATIVE, dtype=np.int8)
    scores = np.full((1, 6), 0.5)
    mined = hard_negative_mining(scores, labels, floor=3)
    assert list(np.nonzero(mined[0])[0]) == [0, 1, 2]


def test_mining_short_supply_takes_all_negatives():
    labels = np.full((1, 5), IGNORE, dtype=np.int8)
    labels[0, [1, 4]] = NEGATIVE
    mined = hard_negative_mining(np.random.default_rng(0).random((1, 5)),
                                 labels, floor=8)
    assert set(np.nonzero(mined[0])[0]) == {1, 4}


# ------------------------------------------------------------- stage loss

def _toy_targets(labels_row, matched_row):
    labels = np.asarray([labels_row], dtype=np.int8)
    matched = np.zeros((1, len(labels_row), 4))
    for a, box in enumerate(matched_row):
        if box is not None:
            matched[0, a] = box
    from querytrack.training import AnchorTargets
    return AnchorTargets(labels=labels, matched=matched)


def test_perfect_predictions_give_near_zero_loss():
    gt = (4.0, 4.0, 12.0, 12.0)
    targets = _toy_targets([POSITIVE, NEGATIVE], [gt, None])
    logits = ag.tensor(np.array([[[[40.0, -40.0]]]]))
    boxes = ag.tensor(np.array([[[[gt, (0.0, 0.0, 2.0, 2.0)]]]]))
    loss, parts = stage_loss(logits, boxes, targets, frame_size=32.0)
    assert parts.l1 == 0.0
    assert abs(parts.giou) < 1e-12
    assert parts.bce < 1e-6
    assert float(loss.data) < 1e-4


def test_no_positives_reduces_to_weighted_bce():
    with precision(np.float64):
        targets = _toy_targets([NEGATIVE, NEGATIVE], [None, None])
        logits = ag.tensor(np.array([[[[0.3, -0.7]]]]))
        boxes = ag.tensor(np.zeros((1, 1, 1, 2, 4)))
        loss, parts = stage_loss(logits, boxes, targets, frame_size=32.0)
    assert parts.l1 == 0.0 and parts.giou == 0.0
    p = 1.0 / (1.0 + np.exp(-np.array([0.3, -0.7])))
    want = float(np.mean(-np.log(1.0 - p)))
    assert math.isclose(parts.bce, want, rel_tol=1e-9)
    assert math.isclose(float(loss.data), 100.0 * want, rel_tol=1e-9)


def test_two_anchor_case_matches_hand_arithmetic():
    gt = (2.0, 2.0, 10.0, 10.0)
    pred_pos = (4.0, 2.0, 10.0, 10.0)     # shifted left edge
    targets = _toy_targets([POSITIVE, NEGATIVE], [gt, None])
    with precision(np.float64):
        logits = ag.tensor(np.array([[[[1.0, -2.0]]]]))
        boxes = ag.tensor(np.array([[[[pred_pos, (0.0, 0.0, 4.0, 4.0)]]]]))
        loss, parts = stage_loss(logits, boxes, targets, frame_size=32.0)

    l1 = (abs(4.0 - 2.0) + 0.0 + 0.0 + 0.0) / 4.0 / 32.0
    inter = 6.0 * 8.0
    union = 48.0 + 64.0 - inter
    enclose = 8.0 * 8.0
    eps = 1e-7
    giou = inter / (union + eps) - (enclose - union) / (enclose + eps)
    p = 1.0 / (1.0 + np.exp(-np.array([1.0, -2.0])))
    bce = float(np.mean([-np.log(p[0]), -np.log(1.0 - p[1])]))
    want = l1 + 0.3 * (1.0 - giou) + 100.0 * bce
    assert math.isclose(parts.l1, l1, rel_tol=1e-9)
    assert math.isclose(parts.giou, 1.0 - giou, rel_tol=1e-6)
    assert math.isclose(parts.bce, bce, rel_tol=1e-9)
    assert math.isclose(float(loss.data), want, rel_tol=1e-6)


def test_stage_loss_is_nonnegative(rng):
    for _ in range(10):
        labels = rng.choice([NEGATIVE, POSITIVE], size=6, p=[0.7, 0.3])
        gt = (4.0, 4.0, 20.0, 20.0)
        targets = _toy_targets(list(labels),
                               [gt if v == POSITIVE else None for v in labels])
        logits = ag.tensor(rng.normal(size=(1, 1, 1, 6)))
        boxes = ag.tensor(rng.uniform(0, 32, size=(1, 1, 1, 6, 4)))
        loss, _ = stage_loss(logits, boxes, targets, frame_size=32.0)
        assert float(loss.data) >= 0.0


def test_total_loss_sums_stages():
    targets = _toy_targets([POSITIVE, NEGATIVE], [(2.0, 2.0, 10.0, 10.0), None])
    logits = ag.tensor(np.array([[[[0.5, -0.5]]]]))
    boxes = ag.tensor(np.random.default_rng(1).uniform(0, 32, (1, 1, 1, 2, 4)))
    single, _ = stage_loss(logits, boxes, targets, frame_size=32.0)
    output = ModelOutput(stage_logits=[logits, logits],
                         stage_boxes=[boxes, boxes],
                         final_scores=None, final_boxes=None)
    total, parts = total_loss(output, targets, frame_size=32.0)
    assert len(parts) == 2
    assert math.isclose(float(total.data), 2.0 * float(single.data),
                        rel_tol=1e-12)


# ---------------------------------------------------------------- optimizer

def test_zero_grad_zero_decay_leaves_params():
    p = ag.tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_moves_by_learning_rate():
    # Bias correction makes the very first update m-hat/sqrt(v-hat) = 1.
    with precision(np.float64):
        p = ag.tensor(np.array(1.0), requires_grad=True)
        p.grad = np.array(1.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        opt.step()
    assert abs(float(p.data) - 0.9) < 1e-8


def test_decoupled_decay_is_multiplicative():
    with precision(np.float64):
        p = ag.tensor(np.array(1.0), requires_grad=True)
        p.grad = np.array(0.0)
        opt = AdamW([p], lr=1e-4, weight_decay=5e-2)
        opt.step()
    assert float(p.data) == 1.0 - 1e-4 * 5e-2


def test_missing_grad_treated_as_zero():
    p = ag.tensor(np.array(3.0), requires_grad=True)
    assert p.grad is None
    opt = AdamW([p], lr=0.5, weight_decay=0.0)
    opt.step()
    assert float(p.data) == 3.0


def test_optimizer_matches_reference_formula(rng):
    data = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(4)]
    with precision(np.float64):
        p = ag.tensor(data.copy(), requires_grad=True)
        opt = AdamW([p], lr=0.01, weight_decay=0.1)
        m = np.zeros(5)
        v = np.zeros(5)
        w = data.copy()
        for t, g in enumerate(grads, start=1):
            p.grad = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            w = w - 0.01 * mh / (np.sqrt(vh) + 1e-8) - 0.01 * 0.1 * w
            np.testing.assert_allclose(p.data, w, rtol=0, atol=1e-12)


# ------------------------------------------------------------ clip sampling

def test_sample_clip_short_video_returns_everything():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(sample_clip(rng, 4, 8, {1, 2}),
                                  np.arange(4))


def test_sample_clip_always_touches_track(rng):
    for seed in range(50):
        local = np.random.default_rng(seed)
        pick = sample_clip(local, 40, 5, {17, 18})
        assert pick.shape == (5,)
        assert np.all(np.diff(pick) > 0)
        assert np.all((pick >= 0) & (pick < 40))
        assert {17, 18} & set(int(i) for i in pick)


def test_sample_clip_forces_track_frame_without_retries():
    # With retries disabled the sampler must still splice a track frame in.
    for seed in range(30):
        local = np.random.default_rng(seed)
        pick = sample_clip(local, 60, 4, {0}, max_retries=0)
        assert pick.shape == (4,)
        assert np.all(np.diff(pick) > 0)
        assert 0 in set(int(i) for i in pick)


# ---------------------------------------------------------------- the loop

def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError, match="non-empty"):
        train([], ModelConfig())


def test_check_finite_names_term_and_stage():
    parts = [StageLossParts(0.1, 0.1, 0.1, 0.3),
             StageLossParts(0.1, float("nan"), 0.1, float("nan"))]
    with pytest.raises(DivergenceError, match=r"giou term in stage 2"):
        _check_finite(parts, iteration=7)


def test_train_aborts_on_poisoned_model():
    pairs, cfg = _train_setup(num_pairs=1)
    model = Model(cfg, seed=0)
    model.backbone.embed.weight.data[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="iteration 1"):
        train(pairs, cfg, TrainConfig(iterations=2), seed=0, model=model)


def test_zero_learning_rate_freezes_parameters():
    pairs, cfg = _train_setup(num_pairs=1)
    model = Model(cfg, seed=3)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train(pairs, cfg, TrainConfig(iterations=3, lr=0.0, weight_decay=0.0),
          seed=0, model=model)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic():
    pairs, cfg = _train_setup()
    a = train(pairs, cfg, TrainConfig(iterations=4), seed=9)
    b = train(pairs, cfg, TrainConfig(iterations=4), seed=9)
    assert a.history == b.history
    sd_a, sd_b = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sd_a[k], sd_b[k]) for k in sd_a)
    c = train(pairs, cfg, TrainConfig(iterations=4), seed=10)
    assert c.history != a.history


def test_loss_log_format_and_artifacts(tmp_path):
    pairs, cfg = _train_setup()
    out = tmp_path / "run"
    res = train(pairs, cfg,
                TrainConfig(iterations=4, checkpoint_interval=2),
                seed=0, out_dir=str(out))
    assert len(res.history) == 4
    with open(out / "loss.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "stage_1", "stage_2", "total"]
    assert len(rows) == 5
    for row, hist in zip(rows[1:], res.history):
        assert int(row[0]) == hist[0]
        for cell, value in zip(row[1:], hist[1:]):
            assert math.isclose(float(cell), value, rel_tol=1e-7)
        assert math.isclose(float(row[-1]), sum(hist[1:-1]), rel_tol=1e-6)
    names = sorted(p.name for p in out.iterdir())
    assert names == ["checkpoint.bin", "checkpoint_000002.bin",
                     "checkpoint_000004.bin", "loss.csv", "model_config.json"]
    assert ModelConfig.load_json(out / "model_config.json") == cfg


def test_single_pair_overfit_reduces_loss():
    pairs, cfg = _train_setup(num_pairs=1)
    res = train(pairs, cfg, TrainConfig(iterations=25, lr=1e-3), seed=0)
    first = res.history[0][-1]
    last = min(r[-1] for r in res.history[-5:])
    assert last < first


def test_train_config_defaults_mirror_optimizer_rates():
    cfg = TrainConfig()
    assert cfg.lr == 1e-4
    assert cfg.weight_decay == 5e-2
    assert cfg.giou_weight == 0.3
    assert cfg.score_weight == 100.0
