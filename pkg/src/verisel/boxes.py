"""Axis-aligned boxes: the input domains every query ranges over."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box {x : lower <= x <= upper}, componentwise."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError(f"bound shapes differ: {lo.shape} vs {hi.shape}")
        if lo.size == 0:
            raise ValueError("box needs at least one dimension")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            bad = int(np.argmax(lo > hi))
            raise ValueError(f"lower > upper in dimension {bad}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.dim:
            return False
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n uniform points, shape (n, dim)."""
        u = rng.random((n, self.dim))
        return self.lower + u * (self.upper - self.lower)

    def split(self, dim: int) -> tuple["Box", "Box"]:
        """Bisect along one dimension; children share the cut plane."""
        mid = 0.5 * (self.lower[dim] + self.upper[dim])
        left_hi = self.upper.copy()
        left_hi[dim] = mid
        right_lo = self.lower.copy()
        right_lo[dim] = mid
        return Box(self.lower, left_hi), Box(right_lo, self.upper)

    def to_json(self) -> list[list[float]]:
        return [list(map(float, self.lower)), list(map(float, self.upper))]

    @staticmethod
    def from_json(obj) -> "Box":
        if not (isinstance(obj, (list, tuple)) and len(obj) == 2):
            raise ValueError("box JSON must be [lower, upper]")
        return Box(np.asarray(obj[0], dtype=np.float64), np.asarray(obj[1], dtype=np.float64))

    @staticmethod
    def from_bounds(bounds) -> "Box":
        """Build from [(lo, hi), ...] pairs."""
        arr = np.asarray(bounds, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("expected a sequence of (lo, hi) pairs")
        return Box(arr[:, 0], arr[:, 1])


def as_boxes(domain) -> tuple[Box, ...]:
    """Normalize a Box or a sequence of Boxes to a nonempty tuple."""
    if isinstance(domain, Box):
        return (domain,)
    boxes = tuple(domain)
    if not boxes or not all(isinstance(b, Box) for b in boxes):
        raise ValueError("domain must be a Box or a nonempty sequence of Boxes")
    if len({b.dim for b in boxes}) != 1:
        raise ValueError("all domain boxes must share one dimension")
    return boxes
