"""Thin-plate-spline fitting with regularization, deformation-field
evaluation and composition, image/mask warping, ground-truth correspondence
construction, and training augmentations.

A deformation field is a float64 array [H,W,2] of per-pixel (dx, dy)
displacements: the point (x, y) corresponds to (x + dx, y + dy) in the other
frame. Composition of a coarse and fine field follows
D(x,y) = D_c(x + D_f(x,y)_x, y + D_f(x,y)_y) + D_f(x,y).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, RidgeAlignError
from .fine_refine import CorrespondenceSet

log = logging.getLogger("ridgealign.warpfield")

DFL_MAGIC = b"DFL1"


@dataclass
class TpsModel:
    """Fitted thin-plate spline: f(x) = affine + sum_i w_i U(|x - src_i|)."""
    src: np.ndarray        # [N,2] control points
    w: np.ndarray          # [N,2] kernel coefficients per axis
    affine: np.ndarray     # [3,2] rows: constant, x, y
    lam: float


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log(r^2) with U(0) = 0, given squared radii."""
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def tps_fit(src: np.ndarray, dst: np.ndarray, lam: float = 0.0) -> TpsModel:
    """Solve the regularized TPS system [[K + lam*I, P], [P^T, 0]].

    lam = 0 interpolates the control points exactly; lam > 0 trades
    control-point fidelity for smoothness (lam*I added to the kernel block).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise DimensionError(f"tps_fit: src {src.shape} vs dst {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise RidgeAlignError(f"tps_fit needs >= 3 control points, got {n}")
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] < 1e-9 * max(1.0, sv[0]):
        raise RidgeAlignError("tps_fit: control points are (near-)collinear")
    d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(-1)
    k = _tps_kernel(d2) + lam * np.eye(n)
    p = np.hstack([np.ones((n, 1)), src])
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = k
    a[:n, n:] = p
    a[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(a, rhs)
        # one step of iterative refinement: the kernel entries grow like
        # r^2 log r^2, so the raw solve loses a few digits on large frames
        sol += np.linalg.solve(a, rhs - a @ sol)
    except np.linalg.LinAlgError as e:
        raise RidgeAlignError(f"tps_fit: singular system ({e})") from None
    return TpsModel(src=src.copy(), w=sol[:n], affine=sol[n:], lam=lam)


def tps_apply(model: TpsModel, pts: np.ndarray) -> np.ndarray:
    """Evaluate the fitted spline at [M,2] query points."""
    pts = np.asarray(pts, dtype=np.float64)
    d2 = ((pts[:, None, :] - model.src[None, :, :]) ** 2).sum(-1)
    u = _tps_kernel(d2)
    return (model.affine[0] + pts @ model.affine[1:] + u @ model.w)


def tps_evaluate(model: TpsModel, h: int, w: int) -> np.ndarray:
    """Dense displacement field f(x) - x on the h x w pixel grid."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    field = np.empty((h * w, 2))
    chunk = 65536
    for i in range(0, pts.shape[0], chunk):
        field[i:i + chunk] = tps_apply(model, pts[i:i + chunk]) - pts[i:i + chunk]
    return field.reshape(h, w, 2)


def sample_bilinear(arr: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sampling of [H,W] or [H,W,C] with border clamping."""
    h, w = arr.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0, h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = arr[y0, x0] * (1 - fx) + arr[y0, x1] * fx
    bot = arr[y1, x0] * (1 - fx) + arr[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def compose(dc: np.ndarray, df: np.ndarray) -> np.ndarray:
    """D(x,y) = D_c(x + D_f(x,y)_x, y + D_f(x,y)_y) + D_f(x,y)."""
    if dc.shape != df.shape:
        raise DimensionError(f"compose: {dc.shape} vs {df.shape}")
    h, w = dc.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = xs + df[..., 0]
    sy = ys + df[..., 1]
    return sample_bilinear(dc, sx, sy) + df


def warp_image(img: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Backward warping: out(x,y) = bilinear(img, (x,y) + d(x,y))."""
    if img.shape[:2] != d.shape[:2]:
        raise DimensionError(f"warp_image: {img.shape} vs {d.shape}")
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return sample_bilinear(img, xs + d[..., 0], ys + d[..., 1])


def warp_mask(mask: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Nearest-neighbor warp of a boolean mask, re-binarized at 0.5."""
    if mask.shape != d.shape[:2]:
        raise DimensionError(f"warp_mask: {mask.shape} vs {d.shape}")
    h, w = mask.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = np.clip(np.rint(xs + d[..., 0]).astype(int), 0, w - 1)
    sy = np.clip(np.rint(ys + d[..., 1]).astype(int), 0, h - 1)
    return mask.astype(np.float64)[sy, sx] >= 0.5


def build_gt(d: np.ndarray, mask_a: np.ndarray, mask_b: np.ndarray,
             grid_stride: int = 8) -> CorrespondenceSet:
    """Sample the deformation field on a regular grid, keep foreground pairs.

    M = warp_mask(mask_a, d) & mask_b. Grid points sit at cell centers of the
    given stride; a pair (p, p + D(p)) is emitted when p is inside mask_a and
    its correspondence lands inside M.
    """
    if d.shape[:2] != mask_a.shape or mask_a.shape != mask_b.shape:
        raise DimensionError("build_gt: field and mask dims disagree")
    h, w = mask_a.shape
    m = warp_mask(mask_a, d) & mask_b
    half = grid_stride / 2.0 - 0.5
    gx = np.arange(w // grid_stride) * grid_stride + half
    gy = np.arange(h // grid_stride) * grid_stride + half
    xs, ys = np.meshgrid(gx, gy)
    px = xs.ravel()
    py = ys.ravel()
    disp = sample_bilinear(d, px, py)
    qx = px + disp[:, 0]
    qy = py + disp[:, 1]
    in_a = sample_bilinear(mask_a.astype(np.float64), px, py) >= 0.5
    inside = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    in_m = np.zeros_like(in_a)
    in_m[inside] = sample_bilinear(m.astype(np.float64),
                                   qx[inside], qy[inside]) >= 0.5
    keep = in_a & in_m
    if not keep.any():
        log.warning("build_gt: empty mask overlap, no correspondences")
    ones = np.ones(int(keep.sum()))
    return CorrespondenceSet(px[keep], py[keep], qx[keep], qy[keep], ones)


# ---------------------------------------------------------------------------
# Training pair augmentations
# ---------------------------------------------------------------------------

@dataclass
class TrainingPair:
    image_a: np.ndarray
    image_b: np.ndarray
    corr: CorrespondenceSet


def augment_rigid(pair: TrainingPair, seed: int) -> TrainingPair:
    """Random rotation in [-30, 30] degrees plus translation up to 32 px,
    applied to image B and its ground-truth coordinates."""
    rng = np.random.default_rng(seed)
    theta = np.deg2rad(rng.uniform(-30.0, 30.0))
    tx, ty = rng.uniform(-32.0, 32.0, size=2)
    h, w = pair.image_b.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ct, st = np.cos(theta), np.sin(theta)
    # backward warp of B: sample source at inverse transform of each pixel
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rx = xs - cx - tx
    ry = ys - cy - ty
    sx = ct * rx + st * ry + cx
    sy = -st * rx + ct * ry + cy
    img_b = sample_bilinear(pair.image_b, sx, sy)
    inb = (sx < 0) | (sx > w - 1) | (sy < 0) | (sy > h - 1)
    img_b[inb] = 0.0
    px = pair.corr.xb - cx
    py = pair.corr.yb - cy
    nxb = ct * px - st * py + cx + tx
    nyb = st * px + ct * py + cy + ty
    keep = (nxb >= 0) & (nxb <= w - 1) & (nyb >= 0) & (nyb <= h - 1)
    corr = CorrespondenceSet(pair.corr.xa[keep], pair.corr.ya[keep],
                             nxb[keep], nyb[keep], pair.corr.conf[keep])
    return TrainingPair(pair.image_a.copy(), img_b, corr)


def augment_swap(pair: TrainingPair) -> TrainingPair:
    """Exchange roles A <-> B and invert every correspondence (involution)."""
    c = pair.corr
    return TrainingPair(pair.image_b.copy(), pair.image_a.copy(),
                        CorrespondenceSet(c.xb.copy(), c.yb.copy(),
                                          c.xa.copy(), c.ya.copy(),
                                          c.conf.copy()))


def augment_occlude(pair: TrainingPair, seed: int, side: str | None = None
                    ) -> TrainingPair:
    """Zero 1-3 random rectangles (each <= 20% of area) in one image and drop
    the correspondences whose endpoint falls inside an occluded rectangle."""
    rng = np.random.default_rng(seed)
    if side is None:
        side = "a" if rng.random() < 0.5 else "b"
    img = (pair.image_a if side == "a" else pair.image_b).copy()
    h, w = img.shape
    xs = pair.corr.xa if side == "a" else pair.corr.xb
    ys = pair.corr.ya if side == "a" else pair.corr.yb
    keep = np.ones(len(pair.corr), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        rw = int(rng.integers(1, max(2, int(w * 0.45)) + 1))
        rh = int(rng.integers(1, min(h, max(1, int(0.2 * h * w / rw))) + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        img[y0:y0 + rh, x0:x0 + rw] = 0.0
        keep &= ~((xs >= x0) & (xs < x0 + rw) & (ys >= y0) & (ys < y0 + rh))
    corr = CorrespondenceSet(pair.corr.xa[keep], pair.corr.ya[keep],
                             pair.corr.xb[keep], pair.corr.yb[keep],
                             pair.corr.conf[keep])
    if side == "a":
        return TrainingPair(img, pair.image_b.copy(), corr)
    return TrainingPair(pair.image_a.copy(), img, corr)


# ---------------------------------------------------------------------------
# DFL1 file format
# ---------------------------------------------------------------------------

def save_dfl(field: np.ndarray, path):
    """Write a deformation field: magic DFL1, u32 H, W, f32 (dx,dy) pairs."""
    h, w = field.shape[:2]
    with open(path, "wb") as f:
        f.write(DFL_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(field.astype("<f4").tobytes())


def load_dfl(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DFL_MAGIC:
        raise RidgeAlignError(f"bad DFL1 magic in {path!r}")
    h, w = struct.unpack("<II", blob[4:12])
    arr = np.frombuffer(blob[12:12 + 8 * h * w], dtype="<f4")
    if arr.size != 2 * h * w:
        raise RidgeAlignError("truncated DFL1 payload")
    return arr.reshape(h, w, 2).astype(np.float64)
