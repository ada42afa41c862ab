"""Procedural query/video pairs with ground truth.

A scene is a gradient background with textured polygons or ellipses drifting
over it: one target instance, a few look-alike distractors, an optional
occluder bar sweeping across, camera shake, and per-frame blur. The query
image renders the same target instance at a pose and scale disjoint from
anything in the video, so matching requires appearance, not template overlap.

All randomness flows from one seed; the same (seed, config, clip length)
always produces byte-identical images and annotations.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry import Box
from .ppm import load_ppm, save_ppm
from .tracks import GroundTruth, ResponseTrack, extract_response_track

# Rotation ranges (radians) kept disjoint modulo pi so no video pose can
# coincide with the query pose even for symmetric shapes.
_VIDEO_ANGLES = (0.0, 1.2)
_QUERY_ANGLES = (1.6, 2.6)


@dataclass(frozen=True)
class SceneConfig:
    canvas: int = 96
    distractors: tuple = (2, 5)               # inclusive count range
    distractor_similarity: float = 0.5
    walk_sigma: float = 2.0
    shake_sigma: float = 1.0
    occlusion_prob: float = 0.35
    blur_prob: float = 0.15
    enter_range: tuple = (0.0, 0.4)           # visibility window start (clip fraction)
    exit_range: tuple = (0.7, 1.0)            # visibility window end
    target_scale_range: tuple = (0.08, 0.14)  # radius / canvas in the video
    query_scale_range: tuple = (0.22, 0.30)   # radius / canvas in the query
    visible_threshold: float = 0.3

    def __post_init__(self):
        if self.canvas < 32:
            raise ValueError(f"canvas must be >= 32, got {self.canvas}")
        for name in ("distractor_similarity", "occlusion_prob", "blur_prob",
                     "visible_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("enter_range", "exit_range", "target_scale_range",
                     "query_scale_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered range, got {lo}, {hi}")
        for name in ("target_scale_range", "query_scale_range"):
            if getattr(self, name)[1] >= 0.5:
                raise ValueError(f"{name}: a radius of half the canvas or more "
                                 "cannot be placed")

    def to_dict(self):
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown scene config keys: {unknown}")
        coerced = dict(data)
        for key in ("distractors", "enter_range", "exit_range",
                    "target_scale_range", "query_scale_range"):
            if key in coerced:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)


@dataclass
class _Shape:
    family: str               # "polygon" or "ellipse"
    vertices: int
    radial_jitter: np.ndarray
    aspect: float
    color_a: np.ndarray
    color_b: np.ndarray
    stripe_freq: float
    stripe_phase: float
    stripe_angle: float


def _sample_shape(rng, family=None):
    if family is None:
        family = "polygon" if rng.random() < 0.5 else "ellipse"
    vertices = int(rng.integers(3, 8))
    return _Shape(
        family=family,
        vertices=vertices,
        radial_jitter=rng.uniform(0.65, 1.0, vertices),
        aspect=rng.uniform(0.55, 0.95),
        color_a=rng.uniform(0.25, 1.0, 3),
        color_b=rng.uniform(0.0, 0.75, 3),
        stripe_freq=rng.uniform(4.0, 9.0),
        stripe_phase=rng.uniform(0.0, 2 * np.pi),
        stripe_angle=rng.uniform(0.0, np.pi),
    )


def _similar_shape(rng, target, similarity):
    """A distractor drawn toward the target in shape family and palette."""
    same_family = rng.random() < similarity
    spec = _sample_shape(rng, family=target.family if same_family else None)
    blend = similarity * 0.8
    spec.color_a = (1 - blend) * spec.color_a + blend * target.color_a
    spec.color_b = (1 - blend) * spec.color_b + blend * target.color_b
    if same_family:
        spec.stripe_freq = ((1 - blend) * spec.stripe_freq
                            + blend * target.stripe_freq)
    return spec


def _polygon_inside(u, v, verts):
    """Even-odd point-in-polygon over coordinate grids."""
    inside = np.zeros(u.shape, dtype=bool)
    k = len(verts)
    for i in range(k):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % k]
        crosses = (y1 > v) != (y2 > v)
        if y2 == y1:
            continue
        xcross = (x2 - x1) * (v - y1) / (y2 - y1) + x1
        inside ^= crosses & (u < xcross)
    return inside


def _shape_mask(spec, radius, center, angle, xs, ys):
    """Boolean mask of the shape over pixel-center grids xs, ys."""
    ca, sa = np.cos(angle), np.sin(angle)
    dx, dy = xs - center[0], ys - center[1]
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    if spec.family == "ellipse":
        return (u / radius) ** 2 + (v / (radius * spec.aspect)) ** 2 <= 1.0
    angles = 2 * np.pi * np.arange(spec.vertices) / spec.vertices
    verts = [(radius * j * np.cos(a), radius * j * np.sin(a))
             for a, j in zip(angles, spec.radial_jitter)]
    return _polygon_inside(u, v, verts)


def _shade(spec, radius, center, angle, xs, ys):
    """Per-pixel paint for a shape: rotated stripes between its two colors
    with a soft radial falloff. Texture is object-anchored, so it rotates
    and scales with the pose."""
    ca, sa = np.cos(angle), np.sin(angle)
    dx, dy = xs - center[0], ys - center[1]
    u = (dx * ca + dy * sa) / radius
    v = (-dx * sa + dy * ca) / radius
    axis = u * np.cos(spec.stripe_angle) + v * np.sin(spec.stripe_angle)
    t = 0.5 + 0.5 * np.sin(spec.stripe_freq * axis + spec.stripe_phase)
    color = (spec.color_a[None, None] * t[..., None]
             + spec.color_b[None, None] * (1 - t[..., None]))
    falloff = 1.0 - 0.3 * np.clip(np.hypot(u, v), 0.0, 1.0) ** 2
    return color * falloff[..., None]


def _background(rng, size):
    top = rng.uniform(0.05, 0.45, 3)
    bottom = rng.uniform(0.05, 0.45, 3)
    ramp = np.linspace(0.0, 1.0, size)[:, None, None]
    img = top[None, None] * (1 - ramp) + bottom[None, None] * ramp
    img = img + rng.uniform(-0.03, 0.03, (size, size, 1))
    return np.clip(img, 0.0, 1.0)


def _quantize(img):
    return np.clip(img * 255.0 + 0.5, 0.0, 255.0).astype(np.uint8)


@dataclass(eq=False)
class QueryVideoPair:
    pair_id: str
    seed: int
    query: np.ndarray   # uint8 [S, S, 3]
    frames: np.ndarray  # uint8 [L, S, S, 3]
    gt: GroundTruth
    scene: SceneConfig
    debug: dict = field(default=None, repr=False)


def generate_pair(seed, config=None, clip_len=8, pair_id=None):
    """Render one deterministic pair; retries fresh layouts (still seeded)
    until the target occurs in at least one frame."""
    cfg = config or SceneConfig()
    if clip_len < 1:
        raise ValueError(f"clip length must be >= 1, got {clip_len}")
    for attempt in range(16):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        result = _generate_attempt(rng, cfg, clip_len)
        if result is not None:
            query, frames, gt, debug = result
            return QueryVideoPair(
                pair_id=pair_id if pair_id is not None else f"pair_{int(seed):08d}",
                seed=int(seed), query=query, frames=frames, gt=gt, scene=cfg,
                debug=debug)
    raise RuntimeError(f"seed {seed}: target never became visible in 16 layouts")


def _generate_attempt(rng, cfg, clip_len):
    size = cfg.canvas
    coords = np.arange(size) + 0.5
    xs, ys = np.meshgrid(coords, coords)

    target = _sample_shape(rng)
    t_radius = rng.uniform(*cfg.target_scale_range) * size
    q_radius = rng.uniform(*cfg.query_scale_range) * size

    start = rng.uniform(0.3 * size, 0.7 * size, 2)
    walk = np.cumsum(rng.normal(0.0, cfg.walk_sigma, (clip_len, 2)), axis=0)
    shake = rng.normal(0.0, cfg.shake_sigma, (clip_len, 2))
    centers = start[None] + walk + shake
    theta0 = rng.uniform(_VIDEO_ANGLES[0], _VIDEO_ANGLES[1] - 0.4)
    omega = rng.uniform(0.0, 0.4) / max(clip_len - 1, 1)
    angles = theta0 + omega * np.arange(clip_len)

    enter = int(round(rng.uniform(*cfg.enter_range) * clip_len))
    exit_ = int(round(rng.uniform(*cfg.exit_range) * clip_len))
    enter = min(max(enter, 0), clip_len - 1)
    exit_ = min(max(exit_, enter + 1), clip_len)

    count = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    distractors = []
    for _ in range(count):
        spec = _similar_shape(rng, target, cfg.distractor_similarity)
        radius = rng.uniform(*cfg.target_scale_range) * size
        d_start = rng.uniform(0.1 * size, 0.9 * size, 2)
        d_walk = np.cumsum(rng.normal(0.0, cfg.walk_sigma, (clip_len, 2)), axis=0)
        d_theta = rng.uniform(_VIDEO_ANGLES[0], _VIDEO_ANGLES[1], clip_len)
        distractors.append((spec, radius, d_start[None] + d_walk + shake, d_theta))

    occluded = rng.random() < cfg.occlusion_prob
    occ_spec = None
    if occluded:
        t0 = int(rng.integers(0, max(clip_len - 1, 1)))
        t1 = int(rng.integers(t0 + 1, clip_len + 1))
        occ_angle = rng.uniform(0.0, np.pi)
        occ_width = t_radius * rng.uniform(1.0, 2.0)
        occ_spec = (t0, t1, occ_angle, occ_width, rng.uniform(0.1, 0.35, 3))

    background = _background(rng, size)
    blur_flags = rng.random(clip_len) < cfg.blur_prob

    pad = int(np.ceil(t_radius * 1.8)) + 2
    pad_coords = np.arange(-pad, size + pad) + 0.5
    pxs, pys = np.meshgrid(pad_coords, pad_coords)

    frames = np.zeros((clip_len, size, size, 3), dtype=np.uint8)
    occurrence, boxes = [], []
    for t in range(clip_len):
        img = background.copy()
        for spec, radius, d_centers, d_theta in distractors:
            mask = _shape_mask(spec, radius, d_centers[t], d_theta[t], xs, ys)
            if mask.any():
                img[mask] = _shade(spec, radius, d_centers[t], d_theta[t], xs, ys)[mask]

        in_window = enter <= t < exit_
        frame_box = None
        if in_window:
            mask = _shape_mask(target, t_radius, centers[t], angles[t], xs, ys)
            if mask.any():
                img[mask] = _shade(target, t_radius, centers[t], angles[t],
                                   xs, ys)[mask]
            full_mask = _shape_mask(target, t_radius, centers[t], angles[t],
                                    pxs, pys)
            total = int(full_mask.sum())
            visible_mask = mask
            if occluded and occ_spec[0] <= t < occ_spec[1]:
                occ_mask = _occluder_mask(occ_spec, centers[t], t, size, xs, ys)
                img[occ_mask] = occ_spec[4][None, None]
                visible_mask = mask & ~occ_mask
            ratio = visible_mask.sum() / total if total else 0.0
            if total and ratio >= cfg.visible_threshold:
                rows, cols = np.nonzero(mask)
                frame_box = Box(float(cols.min()), float(rows.min()),
                                float(cols.max() + 1), float(rows.max() + 1))
        elif occluded and occ_spec[0] <= t < occ_spec[1]:
            occ_mask = _occluder_mask(occ_spec, centers[t], t, size, xs, ys)
            img[occ_mask] = occ_spec[4][None, None]

        if blur_flags[t]:
            img = uniform_filter(img, size=(3, 3, 1), mode="nearest")
        frames[t] = _quantize(img)
        occurrence.append(frame_box is not None)
        boxes.append(frame_box)

    if not any(occurrence):
        return None

    q_angle = rng.uniform(*_QUERY_ANGLES)
    q_center = size / 2.0 + rng.uniform(-0.05 * size, 0.05 * size, 2)
    q_background = _background(rng, size)
    q_img = q_background.copy()
    q_mask = _shape_mask(target, q_radius, q_center, q_angle, xs, ys)
    q_img[q_mask] = _shade(target, q_radius, q_center, q_angle, xs, ys)[q_mask]
    query = _quantize(q_img)

    gt = GroundTruth(boxes=tuple(boxes), occurrence=tuple(occurrence),
                     response_track=extract_response_track(occurrence, boxes))
    debug = {
        "target": dataclasses.asdict(target),
        "target_radius": float(t_radius),
        "centers": centers.tolist(),
        "angles": angles.tolist(),
        "window": (enter, exit_),
        "occluded": bool(occluded),
    }
    return query, frames, gt, debug


def _occluder_mask(occ_spec, target_center, t, size, xs, ys):
    """A long bar sweeping perpendicular across the target over its window."""
    t0, t1, angle, width, _ = occ_spec
    span = max(t1 - 1 - t0, 1)
    progress = (t - t0) / span
    offset = (1.0 - 2.0 * progress) * 2.0 * width
    normal = np.array([np.cos(angle), np.sin(angle)])
    center = target_center + offset * normal
    dx, dy = xs - center[0], ys - center[1]
    dist = np.abs(dx * normal[0] + dy * normal[1])
    return dist <= width / 2.0


def generate_dataset(num_pairs, config=None, clip_len=8, base_seed=0):
    """`num_pairs` independent pairs with ids pair_00000, pair_00001, ..."""
    if num_pairs < 1:
        raise ValueError(f"need at least one pair, got {num_pairs}")
    pairs = []
    for i in range(num_pairs):
        seed = int(np.random.SeedSequence([int(base_seed), i]).generate_state(1)[0])
        pairs.append(generate_pair(seed, config=config, clip_len=clip_len,
                                   pair_id=f"pair_{i:05d}"))
    return pairs


# -- on-disk format -----------------------------------------------------------

_ANNOTATION_KEYS = {"pair_id", "seed", "frames", "canvas", "occurrence",
                    "boxes", "response_track", "scene"}
_TRACK_KEYS = {"start", "end", "boxes"}


def _box_to_json(box):
    return None if box is None else [box.x1, box.y1, box.x2, box.y2]


def _box_from_json(value, where):
    if value is None:
        return None
    if not isinstance(value, list) or len(value) != 4:
        raise ValueError(f"{where}: box must be a 4-element list, got {value!r}")
    return Box(*(float(v) for v in value))


def save_dataset(pairs, root):
    """Write `<root>/<pair_id>/{query.ppm, frame_%04d.ppm, annotation.json}`
    plus a manifest listing every pair id."""
    os.makedirs(root, exist_ok=True)
    for pair in pairs:
        pair_dir = os.path.join(root, pair.pair_id)
        os.makedirs(pair_dir, exist_ok=True)
        save_ppm(os.path.join(pair_dir, "query.ppm"), pair.query)
        for t in range(pair.frames.shape[0]):
            save_ppm(os.path.join(pair_dir, f"frame_{t:04d}.ppm"), pair.frames[t])
        annotation = {
            "pair_id": pair.pair_id,
            "seed": pair.seed,
            "frames": int(pair.frames.shape[0]),
            "canvas": int(pair.frames.shape[1]),
            "occurrence": [bool(o) for o in pair.gt.occurrence],
            "boxes": [_box_to_json(b) for b in pair.gt.boxes],
            "response_track": {
                "start": pair.gt.response_track.start,
                "end": pair.gt.response_track.end,
                "boxes": [_box_to_json(b) for b in pair.gt.response_track.boxes],
            },
            "scene": pair.scene.to_dict(),
        }
        with open(os.path.join(pair_dir, "annotation.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(annotation, fh, indent=1)
            fh.write("\n")
    manifest = {"count": len(pairs), "pairs": [p.pair_id for p in pairs]}
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def _load_annotation(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from err
    unknown = sorted(set(data) - _ANNOTATION_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown annotation fields {unknown}")
    missing = sorted(_ANNOTATION_KEYS - set(data))
    if missing:
        raise ValueError(f"{path}: missing annotation fields {missing}")
    track = data["response_track"]
    bad = sorted(set(track) ^ _TRACK_KEYS)
    if bad:
        raise ValueError(f"{path}: response_track fields mismatch: {bad}")
    return data


def load_dataset(root):
    """Read a saved dataset back; inverse of save_dataset, bit-exact."""
    manifest_path = os.path.join(root, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            pair_ids = json.load(fh)["pairs"]
    else:
        pair_ids = sorted(d for d in os.listdir(root)
                          if os.path.isdir(os.path.join(root, d)))
    if not pair_ids:
        raise ValueError(f"no pairs found under {root}")
    pairs = []
    for pair_id in pair_ids:
        pair_dir = os.path.join(root, pair_id)
        ann_path = os.path.join(pair_dir, "annotation.json")
        if not os.path.exists(ann_path):
            raise ValueError(f"missing annotation file {ann_path}")
        data = _load_annotation(ann_path)
        frames = []
        for t in range(int(data["frames"])):
            frame_path = os.path.join(pair_dir, f"frame_{t:04d}.ppm")
            if not os.path.exists(frame_path):
                raise ValueError(f"missing frame file {frame_path}")
            frames.append(load_ppm(frame_path))
        query_path = os.path.join(pair_dir, "query.ppm")
        if not os.path.exists(query_path):
            raise ValueError(f"missing query file {query_path}")
        where = ann_path
        boxes = tuple(_box_from_json(b, f"{where}: boxes[{i}]")
                      for i, b in enumerate(data["boxes"]))
        occurrence = tuple(bool(o) for o in data["occurrence"])
        for i, (box, occ) in enumerate(zip(boxes, occurrence)):
            if occ != (box is not None):
                raise ValueError(f"{where}: boxes[{i}] disagrees with occurrence")
        track_data = data["response_track"]
        track = ResponseTrack(
            start=int(track_data["start"]), end=int(track_data["end"]),
            boxes=tuple(_box_from_json(b, f"{where}: response_track.boxes[{i}]")
                        for i, b in enumerate(track_data["boxes"])))
        gt = GroundTruth(boxes=boxes, occurrence=occurrence, response_track=track)
        try:
            scene = SceneConfig.from_dict(data["scene"])
        except (TypeError, ValueError) as err:
            raise ValueError(f"{where}: scene: {err}") from err
        pairs.append(QueryVideoPair(
            pair_id=data["pair_id"], seed=int(data["seed"]),
            query=load_ppm(query_path), frames=np.stack(frames), gt=gt,
            scene=scene))
    return pairs


# Target-scale split thresholds, as fractions of frame area (the classic
# 64- and 192-pixel side cutoffs on a 480-pixel frame).
SMALL_AREA_FRAC = (64 / 480) ** 2
LARGE_AREA_FRAC = (192 / 480) ** 2


def dataset_stats(pairs):
    """Headline numbers for a dataset: scale split and visibility spread."""
    small = medium = large = 0
    visible_fracs, track_lengths = [], []
    for pair in pairs:
        size = pair.frames.shape[1]
        areas = [b.area() / (size * size) for b in pair.gt.boxes if b is not None]
        mean_area = float(np.mean(areas))
        if mean_area < SMALL_AREA_FRAC:
            small += 1
        elif mean_area < LARGE_AREA_FRAC:
            medium += 1
        else:
            large += 1
        visible_fracs.append(sum(pair.gt.occurrence) / len(pair.gt.occurrence))
        track = pair.gt.response_track
        track_lengths.append(track.end - track.start + 1)
    return {
        "pairs": len(pairs),
        "small": small,
        "medium": medium,
        "large": large,
        "mean_visible_fraction": float(np.mean(visible_fracs)),
        "mean_track_length": float(np.mean(track_lengths)),
    }
