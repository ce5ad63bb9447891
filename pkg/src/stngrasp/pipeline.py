"""Multi-stage spatial-transformer grasp detector.

Stage 1 proposes K candidate locations on the full image, stage 2 predicts
an orientation for each cropped candidate, stage 3 predicts the rectangle
size and a small positional correction, and a classifier scores the final
patch.  The highest score wins.

All patches are sampled from the full image through the composed transform
chain, so decoding happens in image coordinates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .geometry import GraspRect
from .nn import Conv2d, Dense, Module, ResidualBlock
from .stn import (
    AffineTransform2D,
    affine_grid,
    bilinear_sample,
    compose_tensor,
    rotation_tensor,
    scale_translation_tensor,
    to_affine,
    transform_to_grasp,
    translation_tensor,
)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class NetConfig:
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    downsample: int = 1
    pool: int = 4
    hidden: int = 64


@dataclass
class ModelConfig:
    image_size: int = 400
    channels: int = 7
    n_candidates: int = 4
    stage_fov: float = 200.0          # px of image covered by stage-1/2 patches
    stage_patch: int = 100            # sampled resolution of stage-1/2 patches
    classifier_patch: int = 64
    canonical_w: float = 60.0         # px, opening of the untrained rectangle
    canonical_h: float = 30.0         # px, plate length of the untrained rectangle
    scale_min: float = 0.25
    scale_max: float = 2.0
    shift_max: float = 0.5
    stage1: NetConfig = field(default_factory=lambda: NetConfig(downsample=4))
    stage2: NetConfig = field(default_factory=NetConfig)
    stage3: NetConfig = field(default_factory=NetConfig)
    classifier: NetConfig = field(default_factory=lambda: NetConfig(widths=(16, 32)))
    baseline: NetConfig | None = field(
        default_factory=lambda: NetConfig(widths=(16, 32, 64), blocks_per_stage=5, downsample=4))
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("stage1", "stage2", "stage3", "classifier", "baseline"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, NetConfig(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()}))
            elif isinstance(v, NetConfig):
                v.widths = tuple(v.widths)
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be positive")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if not 0 < self.scale_min < 1 < self.scale_max:
            raise ConfigError("scale range must contain 1.0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if not 0 < self.stage_fov <= self.image_size:
            raise ConfigError("stage_fov must be within the image")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def fov_norm(self) -> float:
        """Half-size of the stage patches in normalized image units."""
        return self.stage_fov / self.image_size

    @property
    def location_bound(self) -> float:
        """Stage-1 range that keeps the refined centre inside the image."""
        return 1.0 - self.fov_norm * self.shift_max * math.sqrt(2.0)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _conv_out(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


class LocalizationNet(Module):
    """Residual-block feature extractor followed by a two-layer dense head.

    The final layer is zero-initialised, so an untrained net emits its bias.
    """

    def __init__(self, in_ch: int, in_size: int, cfg: NetConfig, out_dim: int, head_bias,
                 rng: np.random.Generator, dtype):
        if cfg.downsample < 1 or in_size // cfg.downsample < 4:
            raise ConfigError(f"input {in_size} too small for downsample {cfg.downsample}")
        self.downsample = cfg.downsample
        self.in_size = in_size
        size = in_size // cfg.downsample
        self.stem = Conv2d(in_ch, cfg.widths[0], 3, stride=2, pad=1, rng=rng, dtype=dtype)
        size = _conv_out(size, 2)
        blocks, c = [], cfg.widths[0]
        for si, w in enumerate(cfg.widths):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if si > 0 and b == 0 else 1
                blocks.append(ResidualBlock(c, w, stride, rng=rng, dtype=dtype))
                c = w
                if stride == 2:
                    size = _conv_out(size, 2)
        if size < 1:
            raise ConfigError(f"feature map vanished for input {in_size}")
        self.blocks = blocks
        self.pool_kernel = max(1, size // cfg.pool)
        pooled = size // self.pool_kernel
        self.fc = Dense(c * pooled * pooled, cfg.hidden, rng=rng, dtype=dtype)
        self.head = Dense(cfg.hidden, out_dim, rng=rng, dtype=dtype).zero_init(head_bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] != self.in_size or x.shape[3] != self.in_size:
            raise ShapeError(f"expected [N, C, {self.in_size}, {self.in_size}] input, got {x.shape}")
        if self.downsample > 1:
            x = F.avg_pool2d(x, self.downsample)
        h = F.relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        if self.pool_kernel > 1:
            h = F.avg_pool2d(h, self.pool_kernel)
        h = F.relu(self.fc(F.flatten(h)))
        return self.head(h)


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


@dataclass
class Stage1Output:
    locations: np.ndarray  # [K, 2] normalized (tx, ty)


@dataclass
class Stage2Output:
    thetas: np.ndarray  # [K] radians in [-pi/2, pi/2)

    @property
    def degrees(self) -> np.ndarray:
        return np.degrees(self.thetas)


@dataclass
class Stage3Output:
    refinements: np.ndarray  # [K, 4] (sw, sh, dx, dy)


@dataclass
class Candidate:
    location: tuple
    location_px: tuple
    stage1_patch: np.ndarray
    theta_deg: float
    rotated_patch: np.ndarray
    refinement: tuple
    final_patch: np.ndarray
    score: float
    stage1_rect: GraspRect
    stage2_rect: GraspRect
    rect: GraspRect

    def to_dict(self) -> dict:
        sw, sh, dx, dy = self.refinement
        return {
            "location": list(self.location),
            "location_px": list(self.location_px),
            "theta_deg": self.theta_deg,
            "refinement": {"sw": sw, "sh": sh, "dx": dx, "dy": dy},
            "score": self.score,
            "stage1_rect": self.stage1_rect.to_dict(),
            "stage2_rect": self.stage2_rect.to_dict(),
            "rect": self.rect.to_dict(),
        }


@dataclass
class CandidateTrace:
    candidates: list
    winner: int

    @property
    def scores(self) -> np.ndarray:
        return np.array([c.score for c in self.candidates])

    def to_dict(self) -> dict:
        return {"version": 1, "winner": self.winner, "candidates": [c.to_dict() for c in self.candidates]}


@dataclass
class CandidateTensors:
    """Differentiable intermediate results of one forward pass over K candidates."""

    raw1: Tensor
    locations: Tensor     # [K, 2]
    raw2: Tensor          # [K, 2] (u, v)
    thetas: Tensor        # [K]
    raw3: Tensor          # [K, 4]
    refinements: Tensor   # [K, 4] (sw, sh, dx, dy)
    scores: Tensor        # [K, 1]
    patches: tuple        # (stage1, stage2, final) Tensors


class GraspDetector(Module):
    """Container for the three localization networks, the classifier and the baseline head."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        K = cfg.n_candidates
        z_one = _logit((1.0 - cfg.scale_min) / (cfg.scale_max - cfg.scale_min))
        self.stage1 = LocalizationNet(cfg.channels, cfg.image_size, cfg.stage1, 2 * K, np.zeros(2 * K), rng, dt)
        self.stage2 = LocalizationNet(cfg.channels, cfg.stage_patch, cfg.stage2, 2, [1.0, 0.0], rng, dt)
        self.stage3 = LocalizationNet(cfg.channels, cfg.stage_patch, cfg.stage3, 4, [z_one, z_one, 0.0, 0.0], rng, dt)
        self.classifier = LocalizationNet(cfg.channels, cfg.classifier_patch, cfg.classifier, 1, [0.0], rng, dt)
        if cfg.baseline is not None:
            self.baseline = LocalizationNet(cfg.channels, cfg.image_size, cfg.baseline, 6,
                                            [0.0, 0.0, 1.0, 0.0, z_one, z_one], rng, dt)
        else:
            self.baseline = None

    def component(self, name: str) -> Module:
        if name not in ("stage1", "stage2", "stage3", "classifier", "baseline") or getattr(self, name) is None:
            raise ConfigError(f"unknown model component {name!r}")
        return getattr(self, name)

    # -- bounded output mappings ---------------------------------------------------
    def map_locations(self, raw: Tensor) -> Tensor:
        return F.tanh(raw) * self.config.location_bound

    @staticmethod
    def map_angle(raw_uv: Tensor) -> Tensor:
        """theta = atan2(v, u) / 2, wrapped into [-pi/2, pi/2)."""
        theta = F.atan2(raw_uv[:, 1], raw_uv[:, 0]) * 0.5
        wrap = theta.data >= np.pi / 2
        if np.any(wrap):
            theta = theta - Tensor((wrap * np.pi).astype(theta.dtype))
        degenerate = (raw_uv.data[:, 0] == 0) & (raw_uv.data[:, 1] == 0)
        if np.any(degenerate):
            log.warning("orientation head emitted (0, 0); using theta = 0")
        return theta

    def map_refinement(self, raw: Tensor) -> Tensor:
        cfg = self.config
        scales = F.sigmoid(raw[:, 0:2]) * (cfg.scale_max - cfg.scale_min) + cfg.scale_min
        shifts = F.tanh(raw[:, 2:4]) * cfg.shift_max
        return F.concat([scales, shifts], axis=1)

    # -- transforms ------------------------------------------------------------------------
    def _const(self, value: float, n: int) -> Tensor:
        return Tensor(np.full(n, value, dtype=self.config.np_dtype))

    def fov_transform(self, n: int) -> Tensor:
        f = self.config.fov_norm
        return scale_translation_tensor(self._const(f, n), self._const(f, n), 0.0, 0.0)

    def canonical_transform(self, n: int) -> Tensor:
        cfg = self.config
        return scale_translation_tensor(self._const(cfg.canonical_h / cfg.image_size, n),
                                        self._const(cfg.canonical_w / cfg.image_size, n), 0.0, 0.0)

    def refinement_transform(self, refinements: Tensor) -> Tensor:
        """Stage-3 scale+translation in image units; x scales the plate length, y the opening."""
        f = self.config.fov_norm
        sw, sh = refinements[:, 0], refinements[:, 1]
        return scale_translation_tensor(sh, sw, refinements[:, 2] * f, refinements[:, 3] * f)

    def sample(self, image: Tensor, hom: Tensor, size: int) -> Tensor:
        return bilinear_sample(image, affine_grid(to_affine(hom), size, size))

    # -- stages --------------------------------------------------------------------------------
    def _as_batch(self, image) -> Tensor:
        arr = image.channels if hasattr(image, "channels") else image
        if isinstance(arr, Tensor):
            return arr if arr.ndim == 4 else F.reshape(arr, (1,) + arr.shape)
        arr = np.asarray(arr, dtype=self.config.np_dtype)
        if arr.ndim == 3:
            arr = arr[None]
        cfg = self.config
        if arr.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected {cfg.channels}x{cfg.image_size}x{cfg.image_size} image, got {arr.shape[1:]}")
        return Tensor(arr)

    def stage1_locate(self, image) -> Stage1Output:
        with no_grad():
            x = self._as_batch(image)
            loc = self.map_locations(self.stage1(x))
        return Stage1Output(loc.data.reshape(-1, 2).astype(np.float64))

    def stage2_orient(self, patches) -> Stage2Output:
        with no_grad():
            theta = self.map_angle(self.stage2(_batch4(patches, self.config.np_dtype)))
        return Stage2Output(theta.data.astype(np.float64))

    def stage3_refine(self, patches) -> Stage3Output:
        with no_grad():
            ref = self.map_refinement(self.stage3(_batch4(patches, self.config.np_dtype)))
        return Stage3Output(ref.data.astype(np.float64))

    def classify_patch(self, patches) -> np.ndarray:
        with no_grad():
            s = F.sigmoid(self.classifier(_batch4(patches, self.config.np_dtype)))
        return s.data[:, 0].astype(np.float64)

    def score_tensor(self, patches: Tensor) -> Tensor:
        return F.sigmoid(self.classifier(patches))

    def forward_candidates(self, image) -> CandidateTensors:
        """Run all stages for one image; differentiable end to end."""
        cfg = self.config
        K = cfg.n_candidates
        x = self._as_batch(image)
        if x.shape[0] != 1:
            raise ShapeError("forward_candidates takes a single image")
        raw1 = self.stage1(x)
        loc = F.reshape(self.map_locations(raw1), (K, 2))
        T1 = translation_tensor(loc[:, 0], loc[:, 1])
        p1 = self.sample(x, compose_tensor(self.fov_transform(K), T1), cfg.stage_patch)

        raw2 = self.stage2(p1)
        theta = self.map_angle(raw2)
        TR = compose_tensor(rotation_tensor(theta), T1)
        p2 = self.sample(x, compose_tensor(self.fov_transform(K), TR), cfg.stage_patch)

        raw3 = self.stage3(p2)
        ref = self.map_refinement(raw3)
        TRS = compose_tensor(self.refinement_transform(ref), TR)
        p3 = self.sample(x, compose_tensor(self.canonical_transform(K), TRS), cfg.classifier_patch)
        scores = self.score_tensor(p3)
        return CandidateTensors(raw1, loc, raw2, theta, raw3, ref, scores, (p1, p2, p3))

    def decode(self, location, theta: float, refinement) -> GraspRect:
        cfg = self.config
        sw, sh, dx, dy = (float(v) for v in refinement)
        f = cfg.fov_norm
        chain = [
            AffineTransform2D.translation(float(location[0]), float(location[1])),
            AffineTransform2D.rotation(float(theta)),
            AffineTransform2D.scale_translation(sh, sw, dx * f, dy * f),
        ]
        return transform_to_grasp(chain, cfg.image_size, cfg.image_size, cfg.canonical_w, cfg.canonical_h)

    def detect(self, image) -> tuple[GraspRect, CandidateTrace]:
        """Best grasp for one preprocessed image plus the per-stage trace."""
        cfg = self.config
        with no_grad():
            out = self.forward_candidates(image)
        loc = out.locations.data.astype(np.float64)
        thetas = out.thetas.data.astype(np.float64)
        ref = out.refinements.data.astype(np.float64)
        scores = out.scores.data[:, 0].astype(np.float64)
        half = cfg.image_size / 2
        cands = []
        for k in range(cfg.n_candidates):
            tx, ty = loc[k]
            t1 = AffineTransform2D.translation(tx, ty)
            r2 = AffineTransform2D.rotation(thetas[k])
            fov = cfg.stage_fov
            cands.append(Candidate(
                location=(float(tx), float(ty)),
                location_px=(float((tx + 1) * half), float((ty + 1) * half)),
                stage1_patch=out.patches[0].data[k],
                theta_deg=float(np.degrees(thetas[k])),
                rotated_patch=out.patches[1].data[k],
                refinement=tuple(float(v) for v in ref[k]),
                final_patch=out.patches[2].data[k],
                score=float(scores[k]),
                stage1_rect=transform_to_grasp([t1], cfg.image_size, cfg.image_size, fov, fov),
                stage2_rect=transform_to_grasp([t1, r2], cfg.image_size, cfg.image_size,
                                               cfg.canonical_w, cfg.canonical_h),
                rect=self.decode(loc[k], thetas[k], ref[k]),
            ))
        winner = int(np.argmax(scores))  # first maximum on ties
        return cands[winner].rect, CandidateTrace(cands, winner)

    # -- direct regression baseline ----------------------------------------------------------------
    def baseline_outputs(self, image) -> tuple[Tensor, Tensor, Tensor]:
        """(locations [N, 2], thetas [N], scales [N, 2]) from the regression head."""
        if self.baseline is None:
            raise ConfigError("model was built without a baseline head")
        cfg = self.config
        raw = self.baseline(self._as_batch(image))
        loc = self.map_locations(raw[:, 0:2])
        theta = self.map_angle(raw[:, 2:4])
        scales = F.sigmoid(raw[:, 4:6]) * (cfg.scale_max - cfg.scale_min) + cfg.scale_min
        return loc, theta, scales

    def regress_baseline(self, image) -> GraspRect:
        with no_grad():
            loc, theta, scales = self.baseline_outputs(image)
        sw, sh = scales.data[0]
        return self.decode(loc.data[0], float(theta.data[0]), (sw, sh, 0.0, 0.0))


def _batch4(patches, dtype) -> Tensor:
    if isinstance(patches, Tensor):
        return patches if patches.ndim == 4 else F.reshape(patches, (1,) + patches.shape)
    arr = np.asarray(patches, dtype=dtype)
    return Tensor(arr if arr.ndim == 4 else arr[None])


def build_model(config: ModelConfig | None = None, seed: int = 0) -> GraspDetector:
    return GraspDetector(config, seed)
