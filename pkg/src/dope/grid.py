"""Discretization grids, normalized trapezoid weights and weighted inner products.

Every simulator, operator and functional in the package shares these arrays.
Two-dimensional grid functions are flattened row-major, so point ``(p, q)``
lives at index ``q + W * p``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidGridError(ValueError):
    """Raised for grids with fewer than two points along an axis."""


@dataclass(frozen=True)
class Grid1D:
    T: float
    delta: int
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.delta) < 2:
            raise InvalidGridError(f"need at least 2 grid points, got {self.delta}")
        pts = np.arange(self.delta) / (self.delta - 1) * self.T
        pts[-1] = self.T
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return int(self.delta)

    @property
    def dt(self) -> float:
        return self.T / (self.delta - 1)

    def weights(self) -> np.ndarray:
        return trapezoid_weights_1d(self.delta)


@dataclass(frozen=True)
class Grid2D:
    H: int
    W: int
    x: np.ndarray = field(init=False, repr=False, compare=False)
    y: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.H) < 2 or int(self.W) < 2:
            raise InvalidGridError(f"need H, W >= 2, got {self.H}x{self.W}")
        x = np.linspace(0.0, 1.0, self.H)
        y = np.linspace(0.0, 1.0, self.W)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return int(self.H * self.W)

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.H), int(self.W))

    @property
    def points(self) -> np.ndarray:
        """(H*W, 2) coordinates in flattened row-major order."""
        xx, yy = np.meshgrid(self.x, self.y, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def weights(self) -> np.ndarray:
        return trapezoid_weights_2d(self.H, self.W)


def _trapezoid_raw(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def trapezoid_weights_1d(delta: int) -> np.ndarray:
    """Normalized trapezoid weights on a uniform grid: ends 1/(2(n-1)), interior 1/(n-1)."""
    if int(delta) < 2:
        raise InvalidGridError(f"need at least 2 grid points, got {delta}")
    return _trapezoid_raw(int(delta)) / (int(delta) - 1)


def trapezoid_weights_2d(H: int, W: int) -> np.ndarray:
    """Tensor-product trapezoid weights normalized to sum to one, flattened row-major."""
    if int(H) < 2 or int(W) < 2:
        raise InvalidGridError(f"need H, W >= 2, got {H}x{W}")
    w = np.outer(_trapezoid_raw(int(H)), _trapezoid_raw(int(W)))
    return (w / w.sum()).ravel()


def inner_product(f, h, w) -> float:
    f = np.asarray(f, dtype=float)
    h = np.asarray(h, dtype=float)
    w = np.asarray(w, dtype=float)
    if not (f.shape == h.shape == w.shape):
        raise ValueError(f"shape mismatch: {f.shape}, {h.shape}, {w.shape}")
    return float(np.sum(w * f * h))
