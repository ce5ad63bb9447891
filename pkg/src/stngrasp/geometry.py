"""Five-dimensional grasp rectangles and the rectangle-metric success test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

ANGLE_THRESHOLD_DEG = 30.0
JACCARD_THRESHOLD = 0.25


def normalize_angle(theta_deg: float) -> float:
    """Wrap an angle in degrees into [-90, 90)."""
    t = math.fmod(theta_deg + 90.0, 180.0)
    if t < 0:
        t += 180.0
    t -= 90.0
    return -90.0 if t >= 90.0 else t


@dataclass(frozen=True)
class GraspRect:
    """Grasp rectangle in image pixels (x right, y down).

    ``h`` is the plate length (edge p1->p2, at angle ``theta``) and ``w``
    the opening between the plates.  ``theta`` is in degrees and is wrapped
    into [-90, 90) on construction.
    """

    x: float
    y: float
    theta: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.theta, self.w, self.h)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ContractError(f"non-finite grasp rectangle {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ContractError(f"grasp rectangle needs w > 0 and h > 0, got w={self.w}, h={self.h}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def corners(self) -> np.ndarray:
        return rect_corners(self)

    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "theta_deg": self.theta, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "GraspRect":
        return cls(d["x"], d["y"], d.get("theta_deg", d.get("theta")), d["w"], d["h"])

    def translated(self, dx: float, dy: float) -> "GraspRect":
        return GraspRect(self.x + dx, self.y + dy, self.theta, self.w, self.h)


def rect_corners(r: GraspRect) -> np.ndarray:
    """Corners p1..p4 as a [4, 2] array; p1->p2 is a plate of length h."""
    t = math.radians(r.theta)
    d = np.array([math.cos(t), math.sin(t)])
    n = np.array([-math.sin(t), math.cos(t)])
    c = np.array([r.x, r.y])
    hh, hw = r.h / 2, r.w / 2
    return np.array([
        c - hh * d - hw * n,
        c + hh * d - hw * n,
        c + hh * d + hw * n,
        c - hh * d + hw * n,
    ])


def rect_from_corners(pts) -> GraspRect:
    """Refit (x, y, theta, w, h) from four ordered corners.

    The plate is p1->p2 and the opening p2->p3.  This is the single place
    where the annotation-edge convention lives.
    """
    p = np.asarray(pts, dtype=np.float64).reshape(4, 2)
    if not np.all(np.isfinite(p)):
        raise ContractError("corner coordinates must be finite")
    cx, cy = p.mean(axis=0)
    plate = p[1] - p[0]
    h = float(np.hypot(*plate))
    w = float(np.hypot(*(p[2] - p[1])))
    theta = math.degrees(math.atan2(plate[1], plate[0]))
    return GraspRect(cx, cy, theta, w, h)


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly) -> float:
    """Shoelace area of a simple polygon (absolute value)."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def clip_polygon(subject, clipper) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex polygon ``clipper``."""
    clip = np.asarray(clipper, dtype=np.float64)
    if _signed_area(clip) < 0:
        clip = clip[::-1]
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    for i in range(len(clip)):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        ex, ey = b - a

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_cross_point(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def jaccard(a: GraspRect, b: GraspRect) -> float:
    """Intersection over union of two rotated rectangles."""
    if a.area() <= 0 or b.area() <= 0:
        raise ContractError("jaccard needs rectangles with positive area")
    inter = polygon_area(clip_polygon(a.corners(), b.corners()))
    union = a.area() + b.area() - inter
    return float(min(max(inter / union, 0.0), 1.0))


def angle_diff(t1: float, t2: float) -> float:
    """Orientation difference in degrees, modulo the 180 degree plate symmetry, in [0, 90]."""
    d = math.fmod(abs(t1 - t2), 180.0)
    return min(d, 180.0 - d)


def is_success(pred: GraspRect, ground_truths: Sequence[GraspRect]) -> tuple[bool, int | None]:
    """Rectangle-metric test: angle difference < 30 deg and Jaccard > 0.25 against any ground truth.

    Returns:
        (success, index) where index is the angle-qualified ground truth with
        the highest Jaccard, or None when no ground truth is within the angle
        threshold.
    """
    if len(ground_truths) == 0:
        raise ContractError("is_success needs at least one ground-truth rectangle")
    best_idx, best_j = None, -1.0
    for i, gt in enumerate(ground_truths):
        if angle_diff(pred.theta, gt.theta) < ANGLE_THRESHOLD_DEG:
            j = jaccard(pred, gt)
            if j > best_j:
                best_idx, best_j = i, j
    return (best_idx is not None and best_j > JACCARD_THRESHOLD), best_idx
