"""Axis-aligned boxes, anchor grids, and exact IoU/GIoU arithmetic.

Everything here is plain float/numpy; the differentiable box losses live in
the training module.
"""

from dataclasses import dataclass

import numpy as np

# Anchor side lengths as fractions of the frame side. The absolute values
# (16, 32, 64, 48 on a 480-pixel frame) scale down with the frame so box
# geometry is resolution-independent.
DEFAULT_ANCHOR_SCALES = (16 / 480, 32 / 480, 64 / 480, 48 / 480)
DEFAULT_ANCHOR_RATIOS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class Box:
    """Pixel-coordinate box, origin top-left, corners (x1,y1) <= (x2,y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        # Coerce numpy scalars so boxes serialize and compare as plain floats.
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def ordered(cls, x1, y1, x2, y2):
        """Build a box from possibly swapped corners."""
        return cls(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))

    def clamp(self, frame_size):
        clip = lambda v: min(max(v, 0.0), float(frame_size))
        return Box(clip(self.x1), clip(self.y1), clip(self.x2), clip(self.y2))

    def area(self):
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    def astuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


def intersection_area(a, b):
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def box_iou(a, b):
    """Plain IoU; zero-area operands give 0 unless the boxes coincide."""
    inter = intersection_area(a, b)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


def box_giou(a, b):
    """IoU minus the fraction of the enclosing box not covered by the union.

    Lives in (-1, 1]; degenerate (zero-area) boxes are treated as points, so
    the penalty term is skipped when the enclosure itself has no area.
    """
    iou = box_iou(a, b)
    ex1, ey1 = min(a.x1, b.x1), min(a.y1, b.y1)
    ex2, ey2 = max(a.x2, b.x2), max(a.y2, b.y2)
    enclose = (ex2 - ex1) * (ey2 - ey1)
    if enclose <= 0.0:
        return iou
    union = a.area() + b.area() - intersection_area(a, b)
    return iou - (enclose - union) / enclose


@dataclass(frozen=True)
class AnchorSet:
    """Preset boxes tiled over an H x W grid: `per_cell` anchors per cell.

    `boxes` is [grid_h * grid_w * per_cell, 4] in pixel coordinates, cell
    row-major, scale-major then ratio within a cell. Anchors are centered and
    unclamped, so edge anchors may overhang the frame.
    """

    boxes: np.ndarray
    grid_h: int
    grid_w: int
    per_cell: int
    frame_size: float

    def reshaped(self):
        """Boxes as [grid_h, grid_w, per_cell, 4]."""
        return self.boxes.reshape(self.grid_h, self.grid_w, self.per_cell, 4)


def make_anchor_set(grid_h, grid_w, frame_size,
                    scales=DEFAULT_ANCHOR_SCALES, ratios=DEFAULT_ANCHOR_RATIOS):
    shapes = []
    for scale in scales:
        side = scale * frame_size
        for ratio in ratios:
            # ratio = height/width at constant area side^2
            w = side / np.sqrt(ratio)
            h = side * np.sqrt(ratio)
            shapes.append((w, h))
    shapes = np.asarray(shapes)  # [m, 2]
    cy = (np.arange(grid_h) + 0.5) * (frame_size / grid_h)
    cx = (np.arange(grid_w) + 0.5) * (frame_size / grid_w)
    centers_y = np.repeat(cy, grid_w)
    centers_x = np.tile(cx, grid_h)
    centers = np.stack([centers_x, centers_y], axis=1)  # [H*W, 2]
    half = shapes / 2.0
    lo = centers[:, None, :] - half[None, :, :]
    hi = centers[:, None, :] + half[None, :, :]
    boxes = np.concatenate([lo, hi], axis=2).reshape(-1, 4)
    return AnchorSet(boxes=boxes, grid_h=grid_h, grid_w=grid_w,
                     per_cell=shapes.shape[0], frame_size=float(frame_size))
