"""Spatial-transformer machinery: affine algebra, grid generation, bilinear sampling.

Coordinates are normalized with the align-corners convention: -1 is the
centre of pixel 0 and +1 the centre of pixel ``W - 1``.  A transform maps
*output* coordinates ``(x_o, y_o, 1)`` to the *input* location sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor

_FORM_TOL = 1e-12


@dataclass(frozen=True)
class AffineTransform2D:
    a11: float
    a12: float
    a13: float
    a21: float
    a22: float
    a23: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.coefficients()):
            raise NumericError(f"non-finite affine coefficients {self.coefficients()}")

    def coefficients(self) -> tuple:
        return (self.a11, self.a12, self.a13, self.a21, self.a22, self.a23)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform2D":
        return cls(1.0, 0.0, float(tx), 0.0, 1.0, float(ty))

    @classmethod
    def rotation(cls, theta: float) -> "AffineTransform2D":
        """Pure rotation by ``theta`` radians (counter-clockwise in y-down coordinates)."""
        c, s = math.cos(theta), math.sin(theta)
        return cls(c, -s, 0.0, s, c, 0.0)

    @classmethod
    def scale_translation(cls, sx: float, sy: float, tx: float = 0.0, ty: float = 0.0) -> "AffineTransform2D":
        if sx <= 0 or sy <= 0:
            raise ContractError(f"scale factors must be positive, got ({sx}, {sy})")
        return cls(float(sx), 0.0, float(tx), 0.0, float(sy), float(ty))

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform2D":
        m = np.asarray(m, dtype=np.float64)
        return cls(*(float(v) for v in m[:2, :3].ravel()))

    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12, self.a13], [self.a21, self.a22, self.a23]])

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix(), [0.0, 0.0, 1.0]])

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.matrix()[:, :2].T + self.matrix()[:, 2]

    def kind(self) -> str | None:
        """Name of the stage-restricted form this transform has, if any."""
        a11, a12, a13, a21, a22, a23 = self.coefficients()
        tol = _FORM_TOL
        if abs(a12) <= tol and abs(a21) <= tol:
            if abs(a11 - 1) <= tol and abs(a22 - 1) <= tol:
                return "translation"
            if a11 > 0 and a22 > 0:
                return "scale_translation"
            return None
        if abs(a13) <= tol and abs(a23) <= tol and abs(a11 - a22) <= tol and abs(a12 + a21) <= tol:
            if abs(a11 * a11 + a21 * a21 - 1) <= 1e-9:
                return "rotation"
        return None


def compose(outer: AffineTransform2D, inner: AffineTransform2D) -> AffineTransform2D:
    """Single transform equivalent to sampling with ``inner`` and then with ``outer``.

    ``inner`` is the earlier stage: its patch is what ``outer`` resamples.
    The result is the homogeneous product ``inner @ outer``.
    """
    return AffineTransform2D.from_matrix(inner.homogeneous() @ outer.homogeneous())


def compose_chain(chain: Sequence[AffineTransform2D]) -> AffineTransform2D:
    """Fold a list of stage transforms, earliest first."""
    result = AffineTransform2D.identity()
    for t in chain:
        result = compose(t, result)
    return result


# ---------------------------------------------------------------------------
# differentiable transform construction (batched [N, 3, 3] homogeneous tensors)
# ---------------------------------------------------------------------------

def _hom_rows(rows, n: int, dtype) -> Tensor:
    zeros = Tensor(np.zeros(n, dtype=dtype))
    ones = Tensor(np.ones(n, dtype=dtype))
    lift = lambda v: v if isinstance(v, Tensor) else Tensor(np.full(n, v, dtype=dtype))  # noqa: E731
    entries = [lift(v) for v in rows] + [zeros, zeros, ones]
    return F.reshape(F.stack(entries, axis=1), (n, 3, 3))


def translation_tensor(tx: Tensor, ty: Tensor) -> Tensor:
    n = tx.shape[0]
    return _hom_rows([1.0, 0.0, tx, 0.0, 1.0, ty], n, tx.dtype)


def rotation_tensor(theta: Tensor) -> Tensor:
    c, s = F.cos(theta), F.sin(theta)
    return _hom_rows([c, -s, 0.0, s, c, 0.0], theta.shape[0], theta.dtype)


def scale_translation_tensor(sx, sy, tx, ty) -> Tensor:
    n = next(v for v in (sx, sy, tx, ty) if isinstance(v, Tensor)).shape[0]
    dtype = next(v for v in (sx, sy, tx, ty) if isinstance(v, Tensor)).dtype
    return _hom_rows([sx, 0.0, tx, 0.0, sy, ty], n, dtype)


def compose_tensor(outer: Tensor, inner: Tensor) -> Tensor:
    """Batched counterpart of :func:`compose` on [N, 3, 3] homogeneous tensors."""
    return F.matmul(inner, outer)


def to_affine(hom: Tensor) -> Tensor:
    """Drop the homogeneous row: [N, 3, 3] -> [N, 2, 3]."""
    return hom[:, :2, :]


# ---------------------------------------------------------------------------
# grid generator and sampler
# ---------------------------------------------------------------------------

def base_lattice(h_out: int, w_out: int, dtype=np.float64) -> np.ndarray:
    """Homogeneous output lattice [h_out * w_out, 3] in row-major pixel order."""
    xs = np.linspace(-1.0, 1.0, w_out) if w_out > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h_out) if h_out > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.ones(h_out * w_out)], axis=1).astype(dtype)


def affine_grid(transform, h_out: int, w_out: int) -> Tensor:
    """Sampling grid for one or many affine transforms.

    Args:
        transform: an :class:`AffineTransform2D`, an array/Tensor [2, 3],
            or a batch [N, 2, 3].
        h_out, w_out: output size.

    Returns:
        Tensor [h_out, w_out, 2] for a single transform, else [N, h_out, w_out, 2].
        The last axis holds (x, y).
    """
    if h_out < 1 or w_out < 1:
        raise ContractError(f"grid size must be positive, got {h_out}x{w_out}")
    if isinstance(transform, AffineTransform2D):
        transform = Tensor(transform.matrix())
    theta = transform if isinstance(transform, Tensor) else Tensor(np.asarray(transform, dtype=np.float64))
    single = theta.ndim == 2
    if single:
        theta = F.reshape(theta, (1, 2, 3))
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ShapeError(f"affine parameters must be [N, 2, 3], got {theta.shape}")
    if not np.all(np.isfinite(theta.data)):
        raise NumericError("affine_grid received non-finite transform")
    base = base_lattice(h_out, w_out, theta.dtype)
    n = theta.shape[0]
    out = np.einsum("pc,nkc->npk", base, theta.data).reshape(n, h_out, w_out, 2)

    def bw(g):
        return (np.einsum("npk,pc->nkc", g.reshape(n, h_out * w_out, 2), base),)

    grid = Tensor._from_op(out, (theta,), bw, "affine_grid")
    return F.reshape(grid, (h_out, w_out, 2)) if single else grid


def bilinear_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear read of ``x`` at normalized grid positions, zero outside the image.

    Args:
        x: input [N, C, H, W].
        grid: [H', W', 2] shared by the whole batch, or [M, H', W', 2] with
            M == N (or N == 1, which broadcasts the single image).

    Returns:
        Tensor [M, C, H', W'].
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_sample input must be [N, C, H, W], got {x.shape}")
    if not isinstance(grid, Tensor):
        grid = Tensor(np.asarray(grid, dtype=x.dtype))
    shared = grid.ndim == 3
    g4 = grid.data[None] if shared else grid.data
    if g4.ndim != 4 or g4.shape[-1] != 2:
        raise ShapeError(f"grid must be [H', W', 2] or [M, H', W', 2], got {grid.shape}")
    if not np.all(np.isfinite(g4)):
        raise NumericError("bilinear_sample grid contains non-finite coordinates")
    N, C, H, W = x.shape
    if shared:
        g4 = np.broadcast_to(g4, (N,) + g4.shape[1:])
    M, Ho, Wo, _ = g4.shape
    if N not in (1, M):
        raise ShapeError(f"grid batch {M} incompatible with input batch {N}")

    px = (g4[..., 0] + 1) * 0.5 * (W - 1)
    py = (g4[..., 1] + 1) * 0.5 * (H - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    ax = px - x0
    ay = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    batch = (np.arange(M) if N == M else np.zeros(M, dtype=np.int64))[:, None, None]

    flat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(N * H * W, C)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = (batch * H + np.clip(yi, 0, H - 1)) * W + np.clip(xi, 0, W - 1)
        vals = flat[idx] * valid[..., None]  # M, Ho, Wo, C
        corners.append((idx, valid, vals))

    wx = (1 - ax, ax)
    wy = (1 - ay, ay)
    weights = [wy[0] * wx[0], wy[0] * wx[1], wy[1] * wx[0], wy[1] * wx[1]]
    out = np.zeros((M, Ho, Wo, C), dtype=x.dtype)
    for w, (_, _, vals) in zip(weights, corners):
        out += w[..., None] * vals
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gc = g.transpose(0, 2, 3, 1)  # M, Ho, Wo, C
        gx_in = None
        if x.requires_grad:
            acc = np.zeros((N * H * W, C), dtype=x.dtype)
            for w, (idx, valid, _) in zip(weights, corners):
                contrib = gc * (w * valid)[..., None]
                flat_idx = idx.ravel()
                for c in range(C):
                    acc[:, c] += np.bincount(flat_idx, weights=contrib[..., c].ravel(), minlength=N * H * W)
            gx_in = acc.reshape(N, H, W, C).transpose(0, 3, 1, 2)
        g_grid = None
        if grid.requires_grad:
            v00, v01, v10, v11 = (vals for _, _, vals in corners)
            d_ax = (1 - ay)[..., None] * (v01 - v00) + ay[..., None] * (v11 - v10)
            d_ay = (1 - ax)[..., None] * (v10 - v00) + ax[..., None] * (v11 - v01)
            gpx = (gc * d_ax).sum(axis=-1) * 0.5 * (W - 1)
            gpy = (gc * d_ay).sum(axis=-1) * 0.5 * (H - 1)
            g_grid = np.stack([gpx, gpy], axis=-1)
            if shared:
                g_grid = g_grid.sum(axis=0)
        return gx_in, g_grid

    return Tensor._from_op(out, (x, grid), bw, "bilinear_sample")


# ---------------------------------------------------------------------------
# decoding a transform chain into a grasp rectangle
# ---------------------------------------------------------------------------

def normalized_to_pixels(points, image_w: float, image_h: float) -> np.ndarray:
    """Map normalized coordinates to continuous pixel coordinates (centre at W/2, H/2)."""
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([(pts[..., 0] + 1) * image_w / 2, (pts[..., 1] + 1) * image_h / 2], axis=-1)


def pixels_to_normalized(points, image_w: float, image_h: float) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([pts[..., 0] * 2 / image_w - 1, pts[..., 1] * 2 / image_h - 1], axis=-1)


def transform_to_grasp(chain: Sequence[AffineTransform2D], image_w: float, image_h: float,
                       canonical_w: float, canonical_h: float):
    """Decode a chain of stage transforms into a :class:`~stngrasp.geometry.GraspRect`.

    The canonical rectangle is centred in the image with angle 0, so its
    plate edge (length ``canonical_h``) runs along +x and its opening
    (``canonical_w``) along +y.  The rectangle returned is its image under the
    composed chain.
    """
    from .geometry import GraspRect

    for i, t in enumerate(chain):
        if t.kind() is None:
            raise ContractError(f"chain element {i} is not a translation, rotation or scale+translation: {t}")
    total = compose_chain(chain).matrix()
    # linear part expressed in pixel units
    lin = np.array([[total[0, 0], total[0, 1] * image_h / image_w],
                    [total[1, 0] * image_w / image_h, total[1, 1]]])
    if abs(float(lin[:, 0] @ lin[:, 1])) > 1e-9 * max(1.0, float(np.abs(lin).max()) ** 2):
        raise ContractError("composed chain shears the canonical rectangle; stage order is invalid")
    cx, cy = normalized_to_pixels(total[:, 2], image_w, image_h)
    theta = math.degrees(math.atan2(lin[1, 0], lin[0, 0]))
    h = canonical_h * math.hypot(lin[0, 0], lin[1, 0])
    w = canonical_w * math.hypot(lin[0, 1], lin[1, 1])
    return GraspRect(float(cx), float(cy), theta, w, h)
