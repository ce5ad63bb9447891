"""PNG overlays of grasp rectangles and per-stage candidate traces.

Every rendered PNG gets a JSON sidecar listing exactly what was drawn, so
overlays can be checked against trace files without decoding pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import GraspRect

SIDECAR_VERSION = 1
PANEL_NAMES = ("stage1_locations", "stage2_rotated", "stage3_refined", "winner")


@dataclass(frozen=True)
class OverlayStyle:
    plate_color: tuple = (40, 200, 40)
    opening_color: tuple = (250, 210, 20)
    plate_width: int = 3
    opening_width: int = 1
    marker_color: tuple = (230, 40, 40)
    text_color: tuple = (255, 255, 255)


def to_rgb8(image) -> np.ndarray:
    """[H, W, 3] uint8 from uint8 RGB, a float RGB in [0, 1], or a [C, H, W] preprocessed stack."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] in (3, 7) and arr.shape[2] not in (3, 4):
        arr = arr[:3].transpose(1, 2, 0)
    arr = arr[..., :3]
    if arr.dtype != np.uint8:
        arr = (np.clip(arr.astype(np.float64), 0, 1) * 255).round().astype(np.uint8)
    return np.ascontiguousarray(arr)


def draw_grasp(draw: ImageDraw.ImageDraw, rect: GraspRect, style: OverlayStyle = OverlayStyle()) -> dict:
    """Draw one rectangle; plate edges (p1-p2, p3-p4) and opening edges are styled apart."""
    c = [tuple(map(float, p)) for p in rect.corners()]
    draw.line([c[1], c[2]], fill=style.opening_color, width=style.opening_width)
    draw.line([c[3], c[0]], fill=style.opening_color, width=style.opening_width)
    draw.line([c[0], c[1]], fill=style.plate_color, width=style.plate_width)
    draw.line([c[2], c[3]], fill=style.plate_color, width=style.plate_width)
    return {"rect": rect.to_dict(), "corners": [list(p) for p in c]}


def _marker(draw, x, y, style, r=3):
    draw.ellipse([x - r, y - r, x + r, y + r], outline=style.marker_color, width=2)


def render_overlay(image, rects: Sequence[GraspRect], path, labels: Sequence[str] | None = None,
                   points: Sequence[tuple] = (), style: OverlayStyle = OverlayStyle(),
                   meta: dict | None = None) -> dict:
    """Draw ``rects`` (and optional centre markers) onto ``image``; write PNG and sidecar.

    Returns the sidecar dict.
    """
    img = Image.fromarray(to_rgb8(image), "RGB")
    draw = ImageDraw.Draw(img)
    drawn = []
    for i, r in enumerate(rects):
        entry = draw_grasp(draw, r, style)
        if labels is not None:
            entry["label"] = labels[i]
            draw.text((r.x + 4, r.y + 4), labels[i], fill=style.text_color)
        drawn.append(entry)
    for x, y in points:
        _marker(draw, x, y, style)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    sidecar = {
        "version": SIDECAR_VERSION,
        "image": path.name,
        "size": [img.width, img.height],
        "rectangles": drawn,
        "points": [[float(x), float(y)] for x, y in points],
        "style": {"plate_color": list(style.plate_color), "opening_color": list(style.opening_color)},
    }
    if meta:
        sidecar["meta"] = meta
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar


def sidecar_path(png_path) -> Path:
    return Path(png_path).with_suffix(".overlay.json")


def render_trace(image, trace, out_dir, style: OverlayStyle = OverlayStyle()) -> list[Path]:
    """Four panels: stage-1 fields of view, stage-2 rotated rectangles, stage-3 refined
    rectangles with scores, and the winner.  Coordinates are those of ``image``."""
    out_dir = Path(out_dir)
    cands = trace.candidates
    panels = {
        "stage1_locations": dict(rects=[c.stage1_rect for c in cands],
                                 labels=[str(k) for k in range(len(cands))],
                                 points=[c.location_px for c in cands]),
        "stage2_rotated": dict(rects=[c.stage2_rect for c in cands],
                               labels=[f"{k}:{c.theta_deg:.1f}" for k, c in enumerate(cands)]),
        "stage3_refined": dict(rects=[c.rect for c in cands],
                               labels=[f"{k}:{c.score:.2f}" for k, c in enumerate(cands)]),
        "winner": dict(rects=[cands[trace.winner].rect],
                       labels=[f"{trace.winner}:{cands[trace.winner].score:.2f}"]),
    }
    paths = []
    for i, name in enumerate(PANEL_NAMES):
        p = out_dir / f"panel{i + 1}_{name}.png"
        render_overlay(image, style=style, path=p, meta={"panel": name}, **panels[name])
        paths.append(p)
    return paths
