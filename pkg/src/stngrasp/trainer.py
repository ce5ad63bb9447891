"""Stage-wise pretraining, back-to-front fine-tuning and evaluation."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .data import GraspSample, make_background_patches
from .errors import ConfigError, ContractError, NumericError
from .geometry import GraspRect, is_success
from .optim import Adam
from .pipeline import GraspDetector, ModelConfig
from .stn import (
    compose_tensor,
    rotation_tensor,
    scale_translation_tensor,
    translation_tensor,
)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

COMPONENTS = ("stage1", "stage2", "stage3", "classifier", "baseline")
CONFIG_VERSION = 1


class TrainingDiverged(NumericError):
    """A loss became NaN/Inf during training."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PhaseConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 16


def _default_pretrain() -> dict:
    return {name: PhaseConfig() for name in ("stage1", "stage2", "stage3", "classifier")}


@dataclass
class TrainConfig:
    """Everything a training run depends on.  Serialized as JSON (see README)."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: dict = field(default_factory=_default_pretrain)
    finetune_phases: list = field(default_factory=lambda: ["classifier", "stage3", "stage2", "stage1"])
    finetune: PhaseConfig = field(default_factory=lambda: PhaseConfig(epochs=5, lr=1e-4, batch_size=4))
    background_patches: int = 8
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.pretrain = {k: PhaseConfig(**v) if isinstance(v, dict) else v for k, v in self.pretrain.items()}
        if isinstance(self.finetune, dict):
            self.finetune = PhaseConfig(**self.finetune)
        self.adam_betas = tuple(self.adam_betas)
        for name in list(self.pretrain) + list(self.finetune_phases):
            if name not in COMPONENTS:
                raise ConfigError(f"unknown block {name!r}; expected one of {COMPONENTS}")
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass
class StageTargets:
    locations: np.ndarray    # [K, 2] normalized, zero where masked
    mask: np.ndarray         # [K] 1.0 = slot filled
    slot_rects: list         # ground truth per filled slot
    thetas: np.ndarray       # [K] radians
    sizes: np.ndarray        # [K, 2] (sw, sh) relative to the canonical rectangle
    classifier_examples: list = field(default_factory=list)  # (GraspRect, label)


def top_right_order(rects: Sequence[GraspRect], image_w: float) -> list[GraspRect]:
    """Sort by Euclidean distance of the centre to the top-right pixel (W - 1, 0)."""
    return sorted(rects, key=lambda r: (math.hypot(r.x - (image_w - 1), r.y), r.x, r.y))


def make_stage_targets(sample: GraspSample, config: ModelConfig,
                       rng: np.random.Generator | None = None) -> StageTargets | None:
    """Slot targets for every stage plus classifier examples.

    Returns None (with a warning) for a non-background sample with no positives.
    """
    K = config.n_candidates
    W = config.image_size
    if not sample.positives and not sample.is_background:
        log.warning("%s has no positive rectangles; excluded from stage training", sample.sample_id)
        return None
    ordered = top_right_order(sample.positives, W)
    slots = ordered[:K]
    loc = np.zeros((K, 2))
    mask = np.zeros(K)
    thetas = np.zeros(K)
    sizes = np.ones((K, 2))
    bound = config.location_bound
    for k, r in enumerate(slots):
        loc[k] = np.clip([2 * r.x / W - 1, 2 * r.y / W - 1], -bound, bound)
        mask[k] = 1.0
        thetas[k] = math.radians(r.theta)
        sizes[k] = np.clip([r.w / config.canonical_w, r.h / config.canonical_h], config.scale_min, config.scale_max)
    examples = [(r, 1) for r in ordered] + [(r, 0) for r in sample.negatives]
    if sample.is_background:
        rng = rng if rng is not None else np.random.default_rng(0)
        for _ in range(2):
            c = rng.uniform(0.2 * W, 0.8 * W, size=2)
            examples.append((GraspRect(c[0], c[1], rng.uniform(-90, 90),
                                       config.canonical_w * rng.uniform(0.6, 1.4),
                                       config.canonical_h * rng.uniform(0.6, 1.4)), 0))
    return StageTargets(loc, mask, slots, thetas, sizes, examples)


# ---------------------------------------------------------------------------
# patch extraction with fixed transforms
# ---------------------------------------------------------------------------

def _vec(values, dtype) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype))


def crop_patches(model: GraspDetector, image: np.ndarray, centers, thetas=None, kind: str = "stage") -> np.ndarray:
    """Sample stage or classifier patches at fixed (non-learned) transforms.

    Args:
        centers: [M, 2] normalized centres.
        thetas: [M] radians, or None for axis-aligned patches.
        kind: "stage" for the stage-1/2 field of view; for classifier patches
            pass kind="classifier" and give ``centers`` as a list of GraspRects.
    """
    cfg = model.config
    dt = cfg.np_dtype
    with no_grad():
        x = Tensor(np.asarray(image, dtype=dt)[None])
        if kind == "classifier":
            rects = centers
            c = np.array([[2 * r.x / cfg.image_size - 1, 2 * r.y / cfg.image_size - 1] for r in rects])
            th = np.radians([r.theta for r in rects])
            sx = np.array([r.h / cfg.canonical_h for r in rects])
            sy = np.array([r.w / cfg.canonical_w for r in rects])
            M = len(rects)
            hom = compose_tensor(rotation_tensor(_vec(th, dt)), translation_tensor(_vec(c[:, 0], dt), _vec(c[:, 1], dt)))
            hom = compose_tensor(scale_translation_tensor(_vec(sx, dt), _vec(sy, dt), 0.0, 0.0), hom)
            hom = compose_tensor(model.canonical_transform(M), hom)
            return model.sample(x, hom, cfg.classifier_patch).data
        c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        M = len(c)
        hom = translation_tensor(_vec(c[:, 0], dt), _vec(c[:, 1], dt))
        if thetas is not None:
            hom = compose_tensor(rotation_tensor(_vec(thetas, dt)), hom)
        hom = compose_tensor(model.fov_transform(M), hom)
        return model.sample(x, hom, cfg.stage_patch).data


# ---------------------------------------------------------------------------
# generic optimisation loop
# ---------------------------------------------------------------------------

LogFn = Callable[[dict], None]


@dataclass
class PretrainResult:
    component: str
    history: list

    @property
    def improved(self) -> bool:
        return len(self.history) < 2 or self.history[-1] < self.history[0]


def _check_loss(loss: Tensor, phase: str, step: int) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"{phase}: loss became {value} at step {step}")
    return value


def _fit(params, n_items: int, loss_fn, phase: PhaseConfig, name: str, rng: np.random.Generator,
         betas, eps, log_fn: LogFn | None) -> list:
    history = []
    if phase.epochs <= 0 or n_items == 0:
        return history
    opt = Adam(params, lr=phase.lr, beta1=betas[0], beta2=betas[1], eps=eps)
    step = 0
    for _ in range(phase.epochs):
        order = rng.permutation(n_items)
        for start in range(0, n_items, phase.batch_size):
            idx = order[start:start + phase.batch_size]
            t0 = time.perf_counter()
            opt.zero_grad()
            try:
                # overflow is reported as NumericError by the ops themselves
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = loss_fn(idx)
                    value = _check_loss(loss, name, step)
                    loss.backward(params)
            except TrainingDiverged:
                raise
            except NumericError as exc:
                raise TrainingDiverged(f"{name}: non-finite values at step {step}: {exc}") from exc
            opt.step()
            history.append(value)
            if log_fn is not None:
                log_fn({"phase": name, "step": step, "loss": value, "lr": phase.lr,
                        "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
            step += 1
    opt.zero_grad()
    return history


@contextlib.contextmanager
def frozen_except(model: GraspDetector, trainable: str):
    """Only ``trainable`` keeps requires_grad; everything else is treated as constant."""
    keep = {id(p) for p in model.component(trainable).parameters()}
    params = model.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = id(p) in keep
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def angle_loss(raw_uv: Tensor, thetas) -> Tensor:
    """Mean chordal loss 1 - cos(2 * (predicted - target)) on the (u, v) head."""
    th = np.asarray(thetas, dtype=raw_uv.dtype)
    u, v = raw_uv[:, 0], raw_uv[:, 1]
    r = F.sqrt(u * u + v * v + 1e-12)
    cos_term = (u * Tensor(np.cos(2 * th)) + v * Tensor(np.sin(2 * th))) / r
    return F.mean(1.0 - cos_term)


def _targets_for(samples, config: ModelConfig, seed: int):
    rng = np.random.default_rng([seed, 17])
    pairs = []
    for s in samples:
        t = make_stage_targets(s, config, rng)
        if t is not None:
            pairs.append((s, t))
    return pairs


def _require(items, component):
    if not items:
        raise ContractError(f"no usable training examples for {component}")


def pretrain_component(model: GraspDetector, component: str, samples: Sequence[GraspSample],
                       phase: PhaseConfig, seed: int = 0, log_fn: LogFn | None = None,
                       betas=(0.9, 0.999), eps: float = 1e-8) -> PretrainResult:
    """Supervised training of one block against ground-truth-derived targets.

    Upstream blocks are used as they are: stage 2 learns on patches cropped at
    ground-truth centres, stage 3 on patches at the current stage-1 predictions
    rotated by the ground-truth angle.
    """
    if component not in COMPONENTS:
        raise ConfigError(f"unknown component {component!r}")
    if not samples:
        raise ContractError("pretraining needs at least one sample")
    cfg = model.config
    dt = cfg.np_dtype
    rng = np.random.default_rng([seed, COMPONENTS.index(component)])
    pairs = _targets_for(samples, cfg, seed)
    net = model.component(component)
    params = net.parameters()

    if component == "stage1":
        pairs = [(s, t) for s, t in pairs if not s.is_background]
        _require(pairs, component)
        images = np.stack([s.image.channels for s, _ in pairs]).astype(dt)
        targets = np.stack([t.locations.ravel() for _, t in pairs])
        masks = np.stack([np.repeat(t.mask, 2) for _, t in pairs])

        def loss_fn(idx):
            pred = model.map_locations(net(Tensor(images[idx])))
            return F.masked_mse(pred, targets[idx], masks[idx])

        n = len(images)

    elif component in ("stage2", "stage3"):
        patches, targets = [], []
        for s, t in pairs:
            filled = np.nonzero(t.mask)[0]
            if len(filled) == 0:
                continue
            if component == "stage2":
                patches.append(crop_patches(model, s.image.channels, t.locations[filled]))
                targets.extend(t.thetas[filled])
            else:
                pred = model.stage1_locate(s.image.channels).locations[filled]
                patches.append(crop_patches(model, s.image.channels, pred, t.thetas[filled]))
                for k, loc in zip(filled, pred):
                    r = t.slot_rects[k]
                    c = np.array([2 * r.x / cfg.image_size - 1, 2 * r.y / cfg.image_size - 1])
                    ct, st = math.cos(t.thetas[k]), math.sin(t.thetas[k])
                    delta = np.array([[ct, st], [-st, ct]]) @ (c - loc) / cfg.fov_norm
                    targets.append(np.concatenate([t.sizes[k], np.clip(delta, -cfg.shift_max, cfg.shift_max)]))
        _require(patches, component)
        patches = np.concatenate(patches).astype(dt)
        targets = np.asarray(targets, dtype=np.float64)
        n = len(targets)

        if component == "stage2":
            def loss_fn(idx):
                return angle_loss(net(Tensor(patches[idx])), targets[idx])
        else:
            def loss_fn(idx):
                pred = model.map_refinement(net(Tensor(patches[idx])))
                return F.masked_mse(pred, targets[idx], np.ones_like(targets[idx]))

    elif component == "classifier":
        patches, labels = [], []
        for s, t in pairs:
            if t.classifier_examples:
                rects = [r for r, _ in t.classifier_examples]
                patches.append(crop_patches(model, s.image.channels, rects, kind="classifier"))
                labels.extend(lbl for _, lbl in t.classifier_examples)
        _require(patches, component)
        patches = np.concatenate(patches).astype(dt)
        labels = np.asarray(labels, dtype=np.float64)[:, None]
        n = len(labels)

        def loss_fn(idx):
            return F.binary_cross_entropy(model.score_tensor(Tensor(patches[idx])), labels[idx])

    elif component == "baseline":
        pairs = [(s, t) for s, t in pairs if not s.is_background]
        _require(pairs, component)
        images = np.stack([s.image.channels for s, _ in pairs]).astype(dt)
        loc_t = np.stack([t.locations[0] for _, t in pairs])
        th_t = np.array([t.thetas[0] for _, t in pairs])
        size_t = np.stack([t.sizes[0] for _, t in pairs])

        bound = cfg.location_bound
        span = cfg.scale_max - cfg.scale_min

        def loss_fn(idx):
            raw = net(Tensor(images[idx]))
            loc = F.tanh(raw[:, 0:2]) * bound
            scales = F.sigmoid(raw[:, 4:6]) * span + cfg.scale_min
            ones = np.ones((len(idx), 2))
            return (F.masked_mse(loc, loc_t[idx], ones) + angle_loss(raw[:, 2:4], th_t[idx])
                    + F.masked_mse(scales, size_t[idx], ones))

        n = len(images)
    else:
        raise ConfigError(f"unknown component {component!r}")

    with frozen_except(model, component):
        history = _fit(params, n, loss_fn, phase, f"pretrain:{component}", rng, betas, eps, log_fn)
    return PretrainResult(component, history)


# ---------------------------------------------------------------------------
# end-to-end fine-tuning
# ---------------------------------------------------------------------------

def candidate_labels(model: GraspDetector, out, ground_truths) -> np.ndarray:
    labels = np.zeros((model.config.n_candidates, 1))
    if not ground_truths:
        return labels
    loc = out.locations.data.astype(np.float64)
    th = out.thetas.data.astype(np.float64)
    ref = out.refinements.data.astype(np.float64)
    for k in range(model.config.n_candidates):
        ok, _ = is_success(model.decode(loc[k], th[k], ref[k]), ground_truths)
        labels[k, 0] = float(ok)
    return labels


def finetune_back_to_front(model: GraspDetector, samples: Sequence[GraspSample], phase: PhaseConfig,
                           phases: Sequence[str] = ("classifier", "stage3", "stage2", "stage1"),
                           seed: int = 0, log_fn: LogFn | None = None,
                           betas=(0.9, 0.999), eps: float = 1e-8, phase_hook=None) -> dict:
    """Fine-tune one block at a time, end block first, against candidate success labels.

    Every candidate's decoded rectangle is scored with the rectangle metric
    against the sample's ground truths; the block being tuned minimises the
    BCE between candidate scores and those labels.  Gradients for STN blocks
    pass through the classifier and the samplers.

    ``phase_hook(event, name)`` is called with "start" and "end" around
    every phase.
    """
    for name in phases:
        if name not in ("stage1", "stage2", "stage3", "classifier"):
            raise ConfigError(f"unknown fine-tune block {name!r}")
    histories = {}
    dt = model.config.np_dtype
    for i, name in enumerate(phases):
        pool = [s for s in samples if name == "classifier" or s.positives]
        if not pool:
            histories[name] = []
            continue
        images = [np.asarray(s.image.channels, dtype=dt) for s in pool]
        params = model.component(name).parameters()
        rng = np.random.default_rng([seed, 100 + i])

        def loss_fn(idx):
            total = None
            for j in idx:
                out = model.forward_candidates(images[j])
                labels = candidate_labels(model, out, pool[j].positives)
                term = F.binary_cross_entropy(out.scores, labels)
                total = term if total is None else total + term
            return total / float(len(idx))

        if phase_hook is not None:
            phase_hook("start", name)
        with frozen_except(model, name):
            histories[name] = _fit(params, len(pool), loss_fn, phase, f"finetune:{name}", rng, betas, eps, log_fn)
        if phase_hook is not None:
            phase_hook("end", name)
    return histories


# ---------------------------------------------------------------------------
# full recipe
# ---------------------------------------------------------------------------

def train(model: GraspDetector, samples: Sequence[GraspSample], config: TrainConfig,
          phases: Sequence[str] | None = None, log_fn: LogFn | None = None, phase_hook=None) -> dict:
    """Pretrain every configured component in pipeline order, then fine-tune back to front."""
    backgrounds = make_background_patches(config.background_patches, seed=config.seed)
    results = {}
    for name in ("stage1", "stage2", "stage3", "classifier", "baseline"):
        if name not in config.pretrain or (name == "baseline" and model.baseline is None):
            continue
        data = list(samples) + backgrounds if name == "classifier" else list(samples)
        results[name] = pretrain_component(model, name, data, config.pretrain[name], seed=config.seed,
                                           log_fn=log_fn, betas=config.adam_betas, eps=config.adam_eps)
    ft_phases = list(config.finetune_phases if phases is None else phases)
    results["finetune"] = finetune_back_to_front(model, list(samples) + backgrounds, config.finetune,
                                                 ft_phases, seed=config.seed, log_fn=log_fn,
                                                 betas=config.adam_betas, eps=config.adam_eps,
                                                 phase_hook=phase_hook)
    return results


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    accuracy: float          # percent
    mean_ms: float
    median_ms: float
    outcomes: list

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        return format_table([self])


def format_table(reports: Sequence[EvalReport]) -> str:
    rows = [("Method", "Accuracy (%)", "Time / Image")]
    rows += [(r.method, f"{r.accuracy:.2f}", f"{r.mean_ms:.1f} msec") for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [line]
    for j, row in enumerate(rows):
        out.append("| " + " | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + " |")
        if j == 0:
            out.append(line.replace("-", "="))
    out.append(line)
    return "\n".join(out)


def evaluate(model: GraspDetector, samples: Sequence[GraspSample], detect_fn=None,
             method: str = "Multiple Stage STN") -> EvalReport:
    """Rectangle-metric accuracy and per-image wall time.

    One untimed warm-up call precedes the timed loop.  ``detect_fn(model,
    image) -> GraspRect`` overrides the detector (e.g. the regression baseline).
    """
    samples = [s for s in samples if s.positives]
    if not samples:
        raise ContractError("evaluation needs at least one sample with ground truth")
    if detect_fn is None:
        def detect_fn(m, img):
            return m.detect(img)[0]
    detect_fn(model, samples[0].image.channels)
    outcomes, times = [], []
    for s in samples:
        t0 = time.perf_counter()
        rect = detect_fn(model, s.image.channels)
        times.append(1000 * (time.perf_counter() - t0))
        ok, idx = is_success(rect, s.positives)
        outcomes.append({"id": s.sample_id, "success": bool(ok), "nearest_gt": idx, "rect": rect.to_dict()})
    acc = 100.0 * sum(o["success"] for o in outcomes) / len(outcomes)
    return EvalReport(method, acc, statistics.fmean(times), statistics.median(times), outcomes)


def success_rate(model: GraspDetector, samples: Sequence[GraspSample]) -> float:
    hits = [is_success(model.detect(s.image.channels)[0], s.positives)[0] for s in samples if s.positives]
    return 100.0 * sum(hits) / max(len(hits), 1)
