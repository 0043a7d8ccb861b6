"""Half-open integer bounding boxes and IoU."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Pixel box; ``x_min``/``y_min`` inclusive, ``x_max``/``y_max`` exclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.x_min >= 0 and self.y_min >= 0):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def fits(self, width, height):
        return self.x_max <= width and self.y_max <= height

    @classmethod
    def full(cls, width, height):
        return cls(0, 0, width, height)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two half-open pixel boxes."""
    if not isinstance(a, BBox) or not isinstance(b, BBox):
        raise ValueError("iou expects two BBox values")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)
