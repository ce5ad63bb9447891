"""Cornell-format grasp data: parsing, preprocessing to 7 channels, splits and caching.

Channel order of every preprocessed image is (R, G, B, depth, nx, ny, nz).
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .archive import read_archive, write_archive
from .errors import ContractError
from .geometry import GraspRect, rect_from_corners

log = logging.getLogger(__name__)

CROP = 400
N_CHANNELS = 7
CACHE_VERSION = 1
CORNELL_SHAPE = (480, 640)

_FILE_RE = re.compile(r"^pcd(\d+)(r\.png|\.txt|cpos\.txt|cneg\.txt|d\.png|d\.tiff?)$")


@dataclass
class MultiModalImage:
    channels: np.ndarray  # [7, 400, 400] float32
    source_id: str = ""
    crop_offset: tuple = (0, 0)

    def __post_init__(self):
        if self.channels.shape != (N_CHANNELS, CROP, CROP):
            raise ContractError(f"expected {(N_CHANNELS, CROP, CROP)} channels, got {self.channels.shape}")

    @property
    def rgb(self) -> np.ndarray:
        return self.channels[:3]

    @property
    def depth(self) -> np.ndarray:
        return self.channels[3]

    @property
    def normals(self) -> np.ndarray:
        return self.channels[4:7]


@dataclass
class GraspSample:
    image: MultiModalImage
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    is_background: bool = False

    @property
    def sample_id(self) -> str:
        return self.image.source_id


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int


@dataclass
class LoadReport:
    n_images: int = 0
    n_positives: int = 0
    n_negatives: int = 0
    skipped_rects: int = 0
    skipped_samples: int = 0
    warnings: list = field(default_factory=list)

    def warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)

    def to_dict(self) -> dict:
        return {
            "images": self.n_images,
            "positives": self.n_positives,
            "negatives": self.n_negatives,
            "skipped_rectangles": self.skipped_rects,
            "skipped_samples": self.skipped_samples,
            "warnings": len(self.warnings),
        }


# ---------------------------------------------------------------------------
# annotation files
# ---------------------------------------------------------------------------

def parse_rect_file(path, report: LoadReport | None = None) -> list[GraspRect]:
    """Read a Cornell rectangle file: four ``x y`` lines per rectangle.

    Groups with unparseable or NaN coordinates are skipped with a warning
    naming the line; a trailing group of fewer than four lines is dropped.
    """
    report = report if report is not None else LoadReport()
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    rects = []
    n_groups, rest = divmod(len(lines), 4)
    if rest:
        report.warn(f"{path}: {rest} trailing line(s) do not form a rectangle; ignored")
    for g in range(n_groups):
        pts = []
        bad = None
        for k in range(4):
            lineno = 4 * g + k + 1
            tokens = lines[4 * g + k].split()
            try:
                if len(tokens) != 2:
                    raise ValueError(f"expected 2 values, got {len(tokens)}")
                x, y = float(tokens[0]), float(tokens[1])
            except ValueError as exc:
                bad = f"line {lineno}: {exc}"
                break
            if not (math.isfinite(x) and math.isfinite(y)):
                bad = f"line {lineno}: non-finite coordinate"
                break
            pts.append((x, y))
        if bad is None:
            try:
                rects.append(rect_from_corners(pts))
            except ContractError as exc:
                bad = f"rectangle {g}: {exc}"
        if bad is not None:
            report.skipped_rects += 1
            report.warn(f"{path}: skipped rectangle {g} ({bad})")
    return rects


def write_rect_file(path, rects: Iterable[GraspRect]) -> None:
    with open(path, "w") as fh:
        for r in rects:
            for x, y in r.corners():
                fh.write(f"{x:.6f} {y:.6f}\n")


# ---------------------------------------------------------------------------
# depth handling
# ---------------------------------------------------------------------------

def read_point_cloud(path, shape: tuple = CORNELL_SHAPE) -> np.ndarray:
    """Rasterize a Cornell ``pcd*.txt`` point cloud into a depth image (NaN where empty).

    Each data row is ``x y z rgb index`` with ``index = row * width + col``;
    the z coordinate becomes the depth value.
    """
    with open(path) as fh:
        for line in fh:
            if line.startswith("DATA"):
                break
        data = np.loadtxt(fh, ndmin=2)
    depth = np.full(shape, np.nan)
    if data.size:
        idx = data[:, 4].astype(np.int64)
        ok = (idx >= 0) & (idx < shape[0] * shape[1])
        depth.flat[idx[ok]] = data[ok, 2]
    return depth


def write_point_cloud(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    rows, cols = np.nonzero(np.isfinite(depth))
    with open(path, "w") as fh:
        fh.write("# .PCD v.7 - Point Cloud Data file format\nVERSION .7\nFIELDS x y z rgb index\n")
        fh.write(f"SIZE 4 4 4 4 4\nTYPE F F F F U\nCOUNT 1 1 1 1 1\nWIDTH {len(rows)}\nHEIGHT 1\n")
        fh.write(f"POINTS {len(rows)}\nDATA ascii\n")
        for r, c in zip(rows, cols):
            fh.write(f"{c - w / 2:.3f} {r - h / 2:.3f} {depth[r, c]:.6f} 0 {r * w + c}\n")


def read_depth_image(path) -> np.ndarray:
    """Load a pre-rasterized depth image; zero pixels are treated as missing."""
    arr = np.asarray(Image.open(path)).astype(np.float64)
    arr[arr == 0] = np.nan
    return arr


def fill_holes_nearest(depth: np.ndarray) -> np.ndarray:
    """Replace NaN/Inf pixels by their nearest valid neighbour.

    Distance is Euclidean on the pixel grid; ties go to the smaller row,
    then the smaller column.
    """
    depth = np.asarray(depth, dtype=np.float64)
    invalid = ~np.isfinite(depth)
    if not invalid.any():
        return depth.copy()
    if invalid.all():
        raise ContractError("depth image has no valid pixels")
    dist = ndimage.distance_transform_edt(invalid)
    out = depth.copy()
    H, W = depth.shape
    hr, hc = np.nonzero(invalid)
    sq = np.rint(dist[hr, hc] ** 2).astype(np.int64)
    for d2 in np.unique(sq):
        sel = sq == d2
        rows, cols = hr[sel], hc[sel]
        todo = np.ones(len(rows), dtype=bool)
        r_max = int(math.isqrt(int(d2)))
        for dr in range(-r_max, r_max + 1):
            rem = int(d2) - dr * dr
            dc = math.isqrt(rem)
            if dc * dc != rem:
                continue
            for dcs in sorted({-dc, dc}):
                rr, cc = rows + dr, cols + dcs
                ok = todo & (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
                ok[ok] = ~invalid[rr[ok], cc[ok]]
                out[rows[ok], cols[ok]] = depth[rr[ok], cc[ok]]
                todo &= ~ok
        if todo.any():
            raise RuntimeError("nearest-neighbour search failed to resolve a hole pixel")
    return out


def surface_normals(depth: np.ndarray) -> np.ndarray:
    """Unit normals [3, H, W] of a depth map: normalize(-dz/dx, -dz/dy, 1).

    Central differences inside, one-sided differences on the border.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)):
        raise ContractError("surface_normals needs a hole-filled depth map")
    dzdy, dzdx = np.gradient(depth)
    n = np.stack([-dzdx, -dzdy, np.ones_like(depth)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def center_crop_offset(height: int, width: int, size: int = CROP) -> tuple[int, int]:
    if height < size or width < size:
        raise ContractError(f"image {width}x{height} is smaller than the {size}x{size} crop")
    return (width - size) // 2, (height - size) // 2


def _normalize_depth(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    vals = depth[valid] if valid.any() else depth.ravel()
    mu = float(vals.mean())
    sd = float(vals.std())
    if not sd > 0:
        sd = 1.0
    return (depth - mu) / sd


def preprocess(raw_rgb, raw_depth, positives: Sequence[GraspRect] = (), negatives: Sequence[GraspRect] = (),
               source_id: str = "", report: LoadReport | None = None) -> GraspSample:
    """Centre-crop to 400x400 and build the 7-channel image.

    Rectangles are shifted into crop coordinates; rectangles whose centre
    falls outside the crop are dropped.
    """
    rgb = np.asarray(raw_rgb)
    depth = np.asarray(raw_depth, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ContractError(f"RGB image must be [H, W, 3], got {rgb.shape}")
    if depth.shape != rgb.shape[:2]:
        raise ContractError(f"depth shape {depth.shape} != image shape {rgb.shape[:2]}")
    H, W = depth.shape
    ox, oy = center_crop_offset(H, W)
    rgb = rgb[oy:oy + CROP, ox:ox + CROP, :3]
    if rgb.dtype == np.uint8:
        rgb = rgb.astype(np.float64) / 255.0
    elif rgb.dtype == np.uint16:
        rgb = rgb.astype(np.float64) / 65535.0
    else:
        rgb = np.clip(rgb.astype(np.float64), 0.0, 1.0)
    depth = depth[oy:oy + CROP, ox:ox + CROP]
    valid = np.isfinite(depth)
    filled = fill_holes_nearest(depth)
    normals = surface_normals(filled)
    channels = np.concatenate([rgb.transpose(2, 0, 1), _normalize_depth(filled, valid)[None], normals])
    image = MultiModalImage(channels.astype(np.float32), source_id=source_id, crop_offset=(ox, oy))

    def shift(rects):
        kept = []
        for r in rects:
            r2 = r.translated(-ox, -oy)
            if 0 <= r2.x < CROP and 0 <= r2.y < CROP:
                kept.append(r2)
            elif report is not None:
                report.skipped_rects += 1
                report.warn(f"{source_id}: rectangle centred outside the crop dropped")
        return kept

    return GraspSample(image, shift(positives), shift(negatives), is_background=False)


def load_raw_item(rgb_path, depth_path) -> tuple[np.ndarray, np.ndarray]:
    rgb = np.asarray(Image.open(rgb_path).convert("RGB"))
    depth_path = Path(depth_path)
    if depth_path.suffix == ".txt":
        depth = read_point_cloud(depth_path, rgb.shape[:2])
    else:
        depth = read_depth_image(depth_path)
    return rgb, depth


def load_cornell(root_dir) -> tuple[list[GraspSample], LoadReport]:
    """Load every item of a Cornell-layout directory (searched recursively).

    Returns:
        (samples, report). Samples are ordered by item file name.

    Raises:
        FileNotFoundError: an item lacks its RGB image or any depth source.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise NotADirectoryError(f"{root} is not a directory")
    items: dict[tuple, dict] = defaultdict(dict)
    for path in sorted(root.rglob("pcd*")):
        m = _FILE_RE.match(path.name)
        if m:
            items[(m.group(1), str(path.parent))][m.group(2)] = path

    report = LoadReport()
    samples = []
    for (num, parent), files in sorted(items.items()):
        sid = f"pcd{num}"
        if "r.png" not in files:
            raise FileNotFoundError(f"{parent}/{sid}r.png missing")
        depth_path = files.get("d.png") or files.get("d.tiff") or files.get("d.tif") or files.get(".txt")
        if depth_path is None:
            raise FileNotFoundError(f"{parent}/{sid}: no depth image or point cloud")
        rects = {}
        for kind in ("cpos.txt", "cneg.txt"):
            path = files.get(kind)
            if path is None:
                break
            try:
                rects[kind] = parse_rect_file(path, report)
            except (OSError, UnicodeDecodeError) as exc:
                report.warn(f"{path}: unreadable ({exc})")
                break
        if len(rects) != 2:
            report.skipped_samples += 1
            report.warn(f"{parent}/{sid}: missing or corrupt annotation file; sample skipped")
            continue
        rgb, depth = load_raw_item(files["r.png"], depth_path)
        sample = preprocess(rgb, depth, rects["cpos.txt"], rects["cneg.txt"], source_id=sid, report=report)
        samples.append(sample)
        report.n_images += 1
        report.n_positives += len(sample.positives)
        report.n_negatives += len(sample.negatives)
    log.info("loaded %d Cornell items (%d rectangles skipped)", report.n_images, report.skipped_rects)
    return samples, report


# ---------------------------------------------------------------------------
# synthetic background patches
# ---------------------------------------------------------------------------

def make_background_patches(n: int, seed: int) -> list[GraspSample]:
    """Near-white, flat patches used as classifier negatives."""
    if n < 0:
        raise ContractError("n must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        base = rng.uniform(0.92, 1.0, size=(3, 1, 1))
        rgb = np.clip(base + rng.normal(0.0, 0.01, size=(3, CROP, CROP)), 0.0, 1.0)
        depth = 1.0 + rng.normal(0.0, 0.01, size=(CROP, CROP))
        normals = surface_normals(depth)
        valid = np.ones_like(depth, dtype=bool)
        ch = np.concatenate([rgb, _normalize_depth(depth, valid)[None], normals]).astype(np.float32)
        out.append(GraspSample(MultiModalImage(ch, source_id=f"background{seed}_{i:04d}"), [], [], True))
    return out


# ---------------------------------------------------------------------------
# splits, hashing, cache
# ---------------------------------------------------------------------------

def split_imagewise(samples, ratio_train: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Seeded train/test partition that keeps every source image on one side.

    ``samples`` may be GraspSamples or plain id strings.
    """
    if not 0 < ratio_train < 1:
        raise ContractError(f"ratio_train must be in (0, 1), got {ratio_train}")
    ids = [s.sample_id if isinstance(s, GraspSample) else str(s) for s in samples]
    if len(ids) < 2:
        raise ContractError("need at least two samples to split")
    groups = sorted(set(ids))
    order = np.random.default_rng(seed).permutation(len(groups))
    n_train = int(math.floor(len(groups) * ratio_train))
    train_groups = {groups[i] for i in order[:n_train]}
    train = [i for i in ids if i in train_groups]
    test = [i for i in ids if i not in train_groups]
    return DatasetSplit(train, test, seed)


def dataset_hash(samples: Sequence[GraspSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.sample_id.encode())
        h.update(np.ascontiguousarray(s.image.channels, dtype="<f4").tobytes())
        for r in list(s.positives) + [None] + list(s.negatives):
            h.update(b"|" if r is None else np.array([r.x, r.y, r.theta, r.w, r.h], dtype="<f8").tobytes())
    return h.hexdigest()


def _rects_to_array(rects) -> np.ndarray:
    return np.array([[r.x, r.y, r.theta, r.w, r.h] for r in rects], dtype=np.float64).reshape(-1, 5)


def save_cache(samples: Sequence[GraspSample], path) -> None:
    """Write preprocessed samples (float32 channels, rectangles in JSON) to one archive."""
    arrays, entries = {}, []
    for i, s in enumerate(samples):
        key = f"sample{i:05d}"
        arrays[key] = s.image.channels
        entries.append({
            "key": key,
            "source_id": s.sample_id,
            "crop_offset": list(s.image.crop_offset),
            "is_background": s.is_background,
            "positives": _rects_to_array(s.positives).tolist(),
            "negatives": _rects_to_array(s.negatives).tolist(),
        })
    write_archive(path, arrays, {"format": "stngrasp-cache", "version": CACHE_VERSION, "samples": entries})


def load_cache(path) -> list[GraspSample]:
    arrays, manifest = read_archive(path)
    if manifest.get("format") != "stngrasp-cache" or manifest.get("version") != CACHE_VERSION:
        raise ContractError(f"{path} is not a version {CACHE_VERSION} sample cache")
    out = []
    for e in manifest["samples"]:
        image = MultiModalImage(arrays[e["key"]].astype(np.float32), e["source_id"], tuple(e["crop_offset"]))
        pos = [GraspRect(*row) for row in e["positives"]]
        neg = [GraspRect(*row) for row in e["negatives"]]
        out.append(GraspSample(image, pos, neg, e["is_background"]))
    return out


def load_dataset(path) -> tuple[list[GraspSample], LoadReport | None]:
    """Load either a cache archive or a raw Cornell directory."""
    path = Path(path)
    if path.is_file():
        return load_cache(path), None
    return load_cornell(path)
