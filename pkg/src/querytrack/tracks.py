"""Response tracks and per-pair ground truth shared by the data generator,
inference, and evaluation."""

from dataclasses import dataclass
from typing import Optional

from .geometry import Box


@dataclass(frozen=True)
class ResponseTrack:
    """A contiguous frame interval with one box per frame."""

    start: int
    end: int
    boxes: tuple
    peak_score: Optional[float] = None

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"track start {self.start} after end {self.end}")
        if len(self.boxes) != self.end - self.start + 1:
            raise ValueError(f"track [{self.start}, {self.end}] needs "
                             f"{self.end - self.start + 1} boxes, "
                             f"got {len(self.boxes)}")

    def frames(self):
        return range(self.start, self.end + 1)

    def box_at(self, frame):
        if self.start <= frame <= self.end:
            return self.boxes[frame - self.start]
        return None


@dataclass(frozen=True)
class GroundTruth:
    """Per-frame annotation: a box exactly where the target occurs, plus the
    most recent visible run as the response track."""

    boxes: tuple       # Optional[Box] per frame
    occurrence: tuple  # bool per frame
    response_track: ResponseTrack

    def __post_init__(self):
        if len(self.boxes) != len(self.occurrence):
            raise ValueError("boxes and occurrence lengths differ")
        for i, (box, occ) in enumerate(zip(self.boxes, self.occurrence)):
            if occ != (box is not None):
                raise ValueError(f"frame {i}: occurrence and box presence disagree")


def extract_response_track(occurrence, boxes):
    """The last maximal contiguous run of occurring frames, with its boxes."""
    last = None
    start = None
    for i, occ in enumerate(occurrence):
        if occ and start is None:
            start = i
        elif not occ and start is not None:
            last = (start, i - 1)
            start = None
    if start is not None:
        last = (start, len(occurrence) - 1)
    if last is None:
        raise ValueError("no visible frame: cannot extract a response track")
    s, e = last
    return ResponseTrack(start=s, end=e, boxes=tuple(boxes[s:e + 1]))
