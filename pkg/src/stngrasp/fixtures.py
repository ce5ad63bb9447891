"""Synthetic Cornell-layout scenes for tests and desk-scale runs.

Each scene is a gently curved, banana-like object lying on a light table.
Positive rectangles straddle the object with the plates parallel to its
local axis; negatives are rotated by 90 degrees or placed on bare table.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .data import CORNELL_SHAPE, GraspSample, preprocess, write_point_cloud, write_rect_file
from .geometry import GraspRect

TABLE_DEPTH_MM = 1000.0


def _centerline(rng, crop_center, spread, angle_deg=None):
    cx = crop_center[0] + rng.uniform(-spread, spread)
    cy = crop_center[1] + rng.uniform(-spread, spread)
    angle = rng.uniform(-math.pi / 2, math.pi / 2)
    length = rng.uniform(150, 220)
    bend = rng.uniform(-0.0015, 0.0015)
    if angle_deg is not None:
        angle, bend = math.radians(angle_deg), 0.0
    return (cx, cy), angle, length, bend


def _axis_point(center, angle, bend, s):
    d = np.array([math.cos(angle), math.sin(angle)])
    n = np.array([-math.sin(angle), math.cos(angle)])
    p = np.asarray(center) + s * d + bend * s * s * n
    tangent = d + 2 * bend * s * n
    return p, math.degrees(math.atan2(tangent[1], tangent[0]))


def make_scene(seed: int, shape: tuple = CORNELL_SHAPE, n_positive: int | None = None,
               angle_deg: float | None = None, opening: float | None = None):
    """Render one scene.

    ``angle_deg`` straightens the object along that axis angle so every
    positive has that orientation; ``opening`` fixes the positives' w.

    Returns:
        (rgb uint8 [H, W, 3], depth float64 [H, W] in mm, positives, negatives)
        with rectangles in full-image pixel coordinates.
    """
    rng = np.random.default_rng(seed)
    H, W = shape
    crop_center = (W / 2, H / 2)
    center, angle, length, bend = _centerline(rng, crop_center, 40, angle_deg)
    radius = rng.uniform(14, 20)
    color = rng.uniform([0.55, 0.45, 0.0], [0.95, 0.85, 0.35])

    ss = np.linspace(-length / 2, length / 2, 200)
    pts = np.array([_axis_point(center, angle, bend, s)[0] for s in ss])
    yy, xx = np.mgrid[0:H, 0:W]
    dist = np.full((H, W), np.inf)
    for px, py in pts[::4]:
        dist = np.minimum(dist, np.hypot(xx - px, yy - py))
    inside = dist < radius

    table = rng.uniform(0.82, 0.92)
    rgb = np.full((H, W, 3), table) + rng.normal(0, 0.01, (H, W, 3))
    shade = np.clip(1.0 - 0.35 * (dist / radius) ** 2, 0.6, 1.0)
    rgb[inside] = color * shade[inside, None]
    rgb = (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)

    height = np.where(inside, 30.0 * np.sqrt(np.clip(1 - (dist / radius) ** 2, 0, 1)), 0.0)
    depth = TABLE_DEPTH_MM - height + rng.normal(0, 0.3, (H, W))
    # a few sensor dropouts on the table
    for _ in range(3):
        hy, hx = rng.integers(0, H - 4), rng.integers(0, W - 4)
        depth[hy:hy + 3, hx:hx + 3] = np.nan

    k = int(n_positive if n_positive is not None else rng.integers(2, 7))
    positives = []
    offsets = np.linspace(-0.3, 0.3, k) * length if k > 1 else np.array([0.0])
    for s in offsets:
        p, theta = _axis_point(center, angle, bend, s)
        w = opening if opening is not None else 2 * radius + rng.uniform(12, 22)
        positives.append(GraspRect(p[0], p[1], theta, w, rng.uniform(18, 26)))
    negatives = []
    for s in offsets[: max(1, k // 2)]:
        p, theta = _axis_point(center, angle, bend, s)
        negatives.append(GraspRect(p[0], p[1], theta + 90, 2 * radius + 15, 22))
    far = np.asarray(center) + np.array([-math.sin(angle), math.cos(angle)]) * (radius + 70)
    negatives.append(GraspRect(far[0], far[1], math.degrees(angle), 50, 22))
    return rgb, depth, positives, negatives


def write_cornell_fixture(root, n: int, seed: int = 0, point_cloud_items: int = 0,
                          n_positive: int | None = None) -> list[Path]:
    """Write ``n`` scenes in Cornell naming under ``root``.

    The first ``point_cloud_items`` items get a ``pcd*.txt`` point cloud;
    the rest carry a 16-bit ``pcd*d.png`` depth image.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(n):
        stem = root / f"pcd{100 + i:04d}"
        rgb, depth, pos, neg = make_scene(seed * 1000 + i, n_positive=n_positive)
        Image.fromarray(rgb).save(f"{stem}r.png")
        if i < point_cloud_items:
            write_point_cloud(f"{stem}.txt", depth)
        else:
            d16 = np.where(np.isfinite(depth), np.round(depth), 0).astype(np.uint16)
            Image.fromarray(d16).save(f"{stem}d.png")
        write_rect_file(f"{stem}cpos.txt", pos)
        write_rect_file(f"{stem}cneg.txt", neg)
        written.append(stem)
    return written


def make_sample(seed: int, **scene_kwargs) -> GraspSample:
    """A preprocessed in-memory sample; skips the file round trip."""
    rgb, depth, pos, neg = make_scene(seed, **scene_kwargs)
    return preprocess(rgb, depth, pos, neg, source_id=f"scene{seed:04d}")
