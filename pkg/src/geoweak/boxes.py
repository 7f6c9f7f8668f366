from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from geoweak.errors import InputError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized image coordinates (center, size)."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InputError(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float, class_id: int = 0,
                     score: Optional[float] = None) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, class_id, score)

    def clamped(self) -> "BBox":
        """Clip the box to the unit square."""
        if self.x0 >= 0 and self.y0 >= 0 and self.x1 <= 1 and self.y1 <= 1:
            return self
        x0, y0 = max(0.0, self.x0), max(0.0, self.y0)
        x1, y1 = min(1.0, self.x1), min(1.0, self.y1)
        return BBox.from_corners(x0, y0, x1, y1, self.class_id, self.score)

    def with_score(self, score: Optional[float]) -> "BBox":
        return BBox(self.cx, self.cy, self.w, self.h, self.class_id, score)
