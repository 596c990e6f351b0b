"""Axis-aligned boxes in relative coordinates and their composition."""
from __future__ import annotations

from dataclasses import dataclass


class BoxError(ValueError):
    """Base class for invalid box coordinates."""


class OutOfRange(BoxError):
    pass


class EmptyBox(BoxError):
    pass


@dataclass(frozen=True)
class BBox:
    """Box ``(x1, y1, x2, y2)`` relative to some reference image, all in [0, 1].

    (x1, y1) is the top-left corner. Construction validates the invariants
    ``0 <= x1 < x2 <= 1`` and ``0 <= y1 < y2 <= 1``.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            # the negated comparison also rejects NaN
            if not (0.0 <= v <= 1.0):
                raise OutOfRange(f"coordinate {v!r} outside [0, 1]")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise EmptyBox(f"empty box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def contains(self, other: BBox, tol: float = 0.0) -> bool:
        return (
            other.x1 >= self.x1 - tol
            and other.y1 >= self.y1 - tol
            and other.x2 <= self.x2 + tol
            and other.y2 <= self.y2 + tol
        )

    @classmethod
    def full(cls) -> BBox:
        return cls(0.0, 0.0, 1.0, 1.0)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def compose(parent: BBox, child: BBox) -> BBox:
    """Map ``child`` (relative to the crop ``parent``) into the parent's frame.

    Results are clamped to [0, 1] to absorb float round-off at the edges.
    """
    w = parent.x2 - parent.x1
    h = parent.y2 - parent.y1
    x1 = parent.x1 + child.x1 * w
    y1 = parent.y1 + child.y1 * h
    x2 = parent.x1 + child.x2 * w
    y2 = parent.y1 + child.y2 * h
    return BBox(max(0.0, x1), max(0.0, y1), min(1.0, x2), min(1.0, y2))


def relative_to(window: BBox, box: BBox) -> tuple[float, float, float, float]:
    """Coordinates of ``box`` expressed relative to ``window`` (may leave [0, 1])."""
    w = window.x2 - window.x1
    h = window.y2 - window.y1
    return (
        (box.x1 - window.x1) / w,
        (box.y1 - window.y1) / h,
        (box.x2 - window.x1) / w,
        (box.y2 - window.y1) / h,
    )
