"""Box arithmetic, agentness NMS and spatiotemporal tube overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple


class InvalidBox(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous xyxy pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBox(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBox(f"degenerate box {coords}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise InvalidBox(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def lerp(self, other: "BBox", w: float) -> "BBox":
        """Linear interpolation, ``w=0`` gives self and ``w=1`` gives other."""
        return BBox(
            self.x1 + w * (other.x1 - self.x1),
            self.y1 + w * (other.y1 - self.y1),
            self.x2 + w * (other.x2 - self.x2),
            self.y2 + w * (other.y2 - self.y2),
        )


def box_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    # clamp guards against rounding pushing the ratio a hair above one
    return min(1.0, inter / union)


def nms_agentness(dets: Sequence[Tuple[BBox, float]], iou_thresh: float) -> List[int]:
    """Greedy NMS on agentness.

    Returns indices of kept items in descending score order; equal scores
    keep the lower input index first.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept: List[int] = []
    for i in order:
        box = dets[i][0]
        if all(box_iou(box, dets[j][0]) < iou_thresh for j in kept):
            kept.append(i)
    return kept


@dataclass(frozen=True)
class TubeGeometry:
    """Time-ordered ``(t, box)`` pairs of one instance."""

    frames: Tuple[Tuple[int, BBox], ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("tube must contain at least one frame")
        ts = [t for t, _ in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("tube frame indices must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[int, BBox]]) -> "TubeGeometry":
        return cls(tuple((int(t), box) for t, box in pairs))

    @property
    def start(self) -> int:
        return self.frames[0][0]

    @property
    def end(self) -> int:
        return self.frames[-1][0]

    def __len__(self) -> int:
        return len(self.frames)

    def box_at(self) -> dict:
        return dict(self.frames)


def temporal_iou(a: TubeGeometry, b: TubeGeometry) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start) + 1
    return inter / union


def tube_iou(a: TubeGeometry, b: TubeGeometry) -> float:
    """Temporal IoU of the frame spans times the mean per-frame box IoU
    over the temporal intersection.

    A frame inside the intersection where either tube has no box
    contributes zero overlap.
    """
    lo, hi = max(a.start, b.start), min(a.end, b.end)
    if hi < lo:
        return 0.0
    boxes_a, boxes_b = a.box_at(), b.box_at()
    total = 0.0
    for t in range(lo, hi + 1):
        ba, bb = boxes_a.get(t), boxes_b.get(t)
        if ba is not None and bb is not None:
            total += box_iou(ba, bb)
    return temporal_iou(a, b) * (total / (hi - lo + 1))
