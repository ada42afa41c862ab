"""Anchor supervision, the staged loss, AdamW, and the training loop."""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .checkpoint import save_checkpoint
from .model import Model

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def _anchor_iou(anchors, box):
    """IoU of every anchor row [A, 4] against one (x1,y1,x2,y2) box."""
    ax1, ay1, ax2, ay2 = anchors.T
    ix1 = np.maximum(ax1, box[0])
    iy1 = np.maximum(ay1, box[1])
    ix2 = np.minimum(ax2, box[2])
    iy2 = np.minimum(ay2, box[3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (box[2] - box[0]) * (box[3] - box[1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


@dataclass
class AnchorTargets:
    """Per frame, per anchor: label in {positive, negative, ignore} and the
    matched ground-truth box for positives (zeros elsewhere)."""

    labels: np.ndarray   # [L, A] int8
    matched: np.ndarray  # [L, A, 4]


def assign_targets(anchor_boxes, gt_boxes, occurrence,
                   pos_iou=0.5, neg_iou=0.4):
    """Label anchors against per-frame ground truth.

    In visible frames anchors at IoU >= pos_iou are positive, the single
    best-IoU anchor is positive regardless, anchors below neg_iou are
    negative, the band between is ignored. Non-visible frames are all
    negative.
    """
    frames = len(occurrence)
    num_anchors = anchor_boxes.shape[0]
    labels = np.full((frames, num_anchors), NEGATIVE, dtype=np.int8)
    matched = np.zeros((frames, num_anchors, 4))
    for i in range(frames):
        if not occurrence[i]:
            continue
        box = gt_boxes[i]
        coords = np.asarray(box.astuple() if hasattr(box, "astuple") else box,
                            dtype=np.float64)
        iou = _anchor_iou(anchor_boxes, coords)
        labels[i, (iou >= neg_iou) & (iou < pos_iou)] = IGNORE
        labels[i, iou >= pos_iou] = POSITIVE
        labels[i, int(np.argmax(iou))] = POSITIVE
        matched[i, labels[i] == POSITIVE] = coords
    return AnchorTargets(labels=labels, matched=matched)


def hard_negative_mining(scores, labels, ratio=3, floor=8):
    """Pick the highest-scoring negative anchors per frame.

    With positives present the budget is ratio * #positives; frames without
    positives contribute `floor` negatives. Returns a boolean [L, A] mask.
    Ties break toward the lower anchor index.
    """
    frames, num_anchors = labels.shape
    mined = np.zeros((frames, num_anchors), dtype=bool)
    for i in range(frames):
        candidates = np.nonzero(labels[i] == NEGATIVE)[0]
        if candidates.size == 0:
            continue
        positives = int(np.sum(labels[i] == POSITIVE))
        budget = ratio * positives if positives > 0 else floor
        order = candidates[np.argsort(-scores[i, candidates], kind="stable")]
        mined[i, order[:budget]] = True
    return mined


def _pairwise_giou(pred, gt):
    """Differentiable GIoU of matched box rows: pred Tensor [P,4], gt [P,4]."""
    px1, py1, px2, py2 = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    gx1, gy1, gx2, gy2 = gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3]
    eps = 1e-7
    iw = ag.maximum(ag.minimum(px2, gx2) - ag.maximum(px1, gx1), 0.0)
    ih = ag.maximum(ag.minimum(py2, gy2) - ag.maximum(py1, gy1), 0.0)
    inter = iw * ih
    pa = ag.maximum(px2 - px1, 0.0) * ag.maximum(py2 - py1, 0.0)
    ga = (gx2 - gx1) * (gy2 - gy1)
    union = pa + ga - inter
    iou = inter / (union + eps)
    ew = ag.maximum(px2, gx2) - ag.minimum(px1, gx1)
    eh = ag.maximum(py2, gy2) - ag.minimum(py1, gy1)
    enclose = ew * eh
    return iou - (enclose - union) / (enclose + eps)


@dataclass
class StageLossParts:
    l1: float
    giou: float
    bce: float
    total: float


def stage_loss(logits, boxes, targets, frame_size,
               giou_weight=0.3, score_weight=100.0,
               mining_ratio=3, mining_floor=8, clamp_eps=1e-7):
    """One stage's loss: coordinate L1 (frame-side normalized) + weighted
    GIoU over positive anchors, plus weighted BCE over positives and mined
    negatives. Returns (scalar Tensor, StageLossParts)."""
    frames = targets.labels.shape[0]
    flat_logits = logits.reshape(frames, -1)
    flat_boxes = boxes.reshape(frames, -1, 4)

    pos_f, pos_a = np.nonzero(targets.labels == POSITIVE)
    if pos_f.size:
        pred = flat_boxes[pos_f, pos_a]
        gt = ag.tensor(targets.matched[pos_f, pos_a])
        l1 = (abs(pred - gt) * (1.0 / frame_size)).mean()
        giou_term = (1.0 - _pairwise_giou(pred, gt)).mean()
    else:
        l1 = ag.tensor(0.0)
        giou_term = ag.tensor(0.0)

    prob_all = ag.sigmoid(flat_logits)
    mined = hard_negative_mining(prob_all.data, targets.labels,
                                 ratio=mining_ratio, floor=mining_floor)
    sel = (targets.labels == POSITIVE) | mined
    sel_f, sel_a = np.nonzero(sel)
    prob = ag.clip(prob_all[sel_f, sel_a], clamp_eps, 1.0 - clamp_eps)
    y = (targets.labels[sel_f, sel_a] == POSITIVE).astype(prob.data.dtype)
    bce = -(ag.tensor(y) * ag.log(prob)
            + ag.tensor(1.0 - y) * ag.log(1.0 - prob)).mean()

    total = l1 + giou_term * giou_weight + bce * score_weight
    parts = StageLossParts(l1=float(l1.data), giou=float(giou_term.data),
                           bce=float(bce.data), total=float(total.data))
    return total, parts


def total_loss(output, targets, frame_size, **loss_kwargs):
    """Sum of stage losses over every stage's head outputs."""
    terms, parts = [], []
    for logits, boxes in zip(output.stage_logits, output.stage_boxes):
        t, p = stage_loss(logits, boxes, targets, frame_size, **loss_kwargs)
        terms.append(t)
        parts.append(p)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, parts


class AdamW:
    """Decoupled-weight-decay Adam with bias correction."""

    def __init__(self, params, lr=1e-4, weight_decay=5e-2,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data


def sample_clip(rng, video_len, clip_len, track_frames, max_retries=32):
    """Sorted frame indices for one training clip.

    Uniform without replacement; resampled until the clip touches the
    response track, up to `max_retries`, after which one track frame is
    forced in (replacing a random pick)."""
    if clip_len >= video_len:
        return np.arange(video_len)
    track = np.asarray(sorted(track_frames))
    pick = np.sort(rng.choice(video_len, size=clip_len, replace=False))
    for _ in range(max_retries):
        if np.intersect1d(pick, track, assume_unique=True).size:
            return pick
        pick = np.sort(rng.choice(video_len, size=clip_len, replace=False))
    if not np.intersect1d(pick, track, assume_unique=True).size:
        victim = rng.integers(clip_len)
        pick[victim] = track[rng.integers(track.size)]
        pick = np.sort(np.unique(pick))
        while pick.size < clip_len:
            extra = rng.integers(video_len)
            if extra not in pick:
                pick = np.sort(np.append(pick, extra))
    return pick


@dataclass
class TrainConfig:
    iterations: int = 500
    lr: float = 1e-4
    weight_decay: float = 5e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    giou_weight: float = 0.3
    score_weight: float = 100.0
    mining_ratio: int = 3
    mining_floor: int = 8
    clamp_eps: float = 1e-7
    checkpoint_interval: int = 0  # 0 = final checkpoint only


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)  # rows: [iter, *stage_totals, total]


class DivergenceError(RuntimeError):
    """Raised when a loss term stops being finite."""


def _check_finite(parts, iteration):
    for stage, p in enumerate(parts, start=1):
        for name in ("l1", "giou", "bce"):
            if not np.isfinite(getattr(p, name)):
                raise DivergenceError(
                    f"non-finite {name} term in stage {stage} at iteration "
                    f"{iteration}")
        if not np.isfinite(p.total):
            raise DivergenceError(
                f"non-finite total in stage {stage} at iteration {iteration}")


def train(pairs, model_config, train_config=None, seed=0, out_dir=None,
          model=None, log_path=None):
    """Fit a model on query/video pairs, one pair per iteration.

    Deterministic given (seed, configs, pairs). Writes a per-iteration CSV
    loss log (`iter,stage_...,total`) and interval/final checkpoints when
    `out_dir` is given. Raises DivergenceError on the first non-finite term.
    """
    if not pairs:
        raise ValueError("training requires a non-empty dataset")
    cfg = train_config or TrainConfig()
    seeds = np.random.SeedSequence(seed).spawn(3)
    if model is None:
        model = Model(model_config, seed=seed)
    order_rng = np.random.default_rng(seeds[1])
    clip_rng = np.random.default_rng(seeds[2])
    optim = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                  betas=cfg.betas, eps=cfg.eps)
    anchors = model.anchors.boxes
    clip_len = model_config.frames_per_clip

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if log_path is None:
            log_path = os.path.join(out_dir, "loss.csv")
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(["iter"]
                        + [f"stage_{k + 1}" for k in range(model_config.stages)]
                        + ["total"])

    history = []
    order = []
    try:
        for iteration in range(1, cfg.iterations + 1):
            if not order:
                order = list(order_rng.permutation(len(pairs)))
            pair = pairs[order.pop(0)]
            track = set(range(pair.gt.response_track.start,
                              pair.gt.response_track.end + 1))
            idx = sample_clip(clip_rng, len(pair.frames), clip_len, track)
            frames = pair.frames[idx].astype(np.float32)
            query = pair.query.astype(np.float32)
            gt_boxes = [pair.gt.boxes[i] for i in idx]
            occurrence = [pair.gt.occurrence[i] for i in idx]
            targets = assign_targets(anchors, gt_boxes, occurrence)

            output = model(query, frames)
            loss, parts = total_loss(
                output, targets, model_config.frame_size,
                giou_weight=cfg.giou_weight, score_weight=cfg.score_weight,
                mining_ratio=cfg.mining_ratio, mining_floor=cfg.mining_floor,
                clamp_eps=cfg.clamp_eps)
            _check_finite(parts, iteration)
            model.zero_grad()
            ag.backward(loss)
            optim.step()

            row = [iteration] + [p.total for p in parts] + [float(loss.data)]
            history.append(row)
            if writer:
                writer.writerow([row[0]] + [f"{v:.8e}" for v in row[1:]])
            if (out_dir and cfg.checkpoint_interval
                    and iteration % cfg.checkpoint_interval == 0):
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{iteration:06d}.bin"),
                                model)
    finally:
        if log_file:
            log_file.close()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model)
        model_config.save_json(os.path.join(out_dir, "model_config.json"))
    return TrainResult(model=model, history=history)
