"""Records shared across modules: character boxes and text-line samples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CharBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = -1
    score: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.coords()}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def cx(self) -> float:
        return 0.5 * (self.x_min + self.x_max)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y_min + self.y_max)

    def to_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.class_id, self.score]

    @classmethod
    def from_list(cls, row):
        x0, y0, x1, y1, c, s = row
        return cls(float(x0), float(y0), float(x1), float(y1), int(c), float(s))


def interval_iou(a0, a1, b0, b1) -> float:
    """IoU of the horizontal intervals [a0, a1] and [b0, b1]."""
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    return inter / ((a1 - a0) + (b1 - b0) - inter)


@dataclass
class TextLineSample:
    """One line: ``input`` is a 2-D raster (H, W) in [0, 1] with 1 = white,
    a Trajectory, or a (H, W, C) feature map."""

    input: object
    transcript: list[int]
    boxes: list[CharBox] | None = None
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.transcript:
            raise ValueError("transcript must be non-empty")
        if self.boxes is not None:
            if len(self.boxes) != len(self.transcript):
                raise ValueError(f"{len(self.boxes)} boxes for {len(self.transcript)} characters")
            xs = [b.cx for b in self.boxes]
            if any(b < a for a, b in zip(xs, xs[1:])):
                raise ValueError("boxes must be sorted left to right")

    @property
    def width(self) -> int:
        return int(np.asarray(self.input).shape[1]) if isinstance(self.input, np.ndarray) else 0
