"""Oriented 3D boxes and their BEV polygons."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Center (m), size along heading/lateral/vertical (m), heading as cos/sin."""

    x: float
    y: float
    z: float
    xl: float
    yl: float
    zl: float
    cos: float = 1.0
    sin: float = 0.0

    @classmethod
    def from_yaw(cls, x, y, z, xl, yl, zl, yaw):
        return cls(float(x), float(y), float(z), float(xl), float(yl), float(zl),
                   math.cos(yaw), math.sin(yaw))

    @property
    def yaw(self) -> float:
        return math.atan2(self.sin, self.cos)

    def normalized(self) -> "Box":
        n = math.hypot(self.cos, self.sin)
        if n == 0:
            return Box(self.x, self.y, self.z, self.xl, self.yl, self.zl, 1.0, 0.0)
        return Box(self.x, self.y, self.z, self.xl, self.yl, self.zl, self.cos / n, self.sin / n)

    def corners_bev(self) -> np.ndarray:
        """Counter-clockwise BEV corners, shape (4, 2)."""
        b = self.normalized()
        c, s = b.cos, b.sin
        hx, hy = self.xl / 2.0, self.yl / 2.0
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.xl, self.yl, self.zl, self.cos, self.sin])

    @property
    def volume(self) -> float:
        return self.xl * self.yl * self.zl


def contains_points(box: Box, pts: np.ndarray) -> np.ndarray:
    """Boolean mask of which BEV points (N, 2) lie inside the box footprint."""
    b = box.normalized()
    d = pts - np.array([b.x, b.y])
    u = d[:, 0] * b.cos + d[:, 1] * b.sin
    v = -d[:, 0] * b.sin + d[:, 1] * b.cos
    return (np.abs(u) <= b.xl / 2) & (np.abs(v) <= b.yl / 2)
