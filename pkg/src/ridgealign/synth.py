"""Synthetic ridge-pattern images and warped training/eval fixtures.

Used by the toy training loop, the self test, and the test suite; real
fingerprint data is never required.
"""

from __future__ import annotations

import numpy as np

from .fine_refine import CorrespondenceSet
from .warpfield import TrainingPair, tps_evaluate, tps_fit, warp_image


def _smooth_noise(h: int, w: int, cells: int, rng) -> np.ndarray:
    """Low-resolution Gaussian noise bilinearly upsampled to h x w."""
    base = rng.normal(size=(cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.floor(ys).astype(int).clip(0, cells - 2)
    x0 = np.floor(xs).astype(int).clip(0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = base[np.ix_(y0, x0)]
    tr = base[np.ix_(y0, x0 + 1)]
    bl = base[np.ix_(y0 + 1, x0)]
    br = base[np.ix_(y0 + 1, x0 + 1)]
    return tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx \
        + bl * fy * (1 - fx) + br * fy * fx


def ridge_image(h: int, w: int, seed: int) -> np.ndarray:
    """Oriented sinusoidal ridges with a smoothly varying orientation field,
    blended with multi-scale noise so patterns are locally distinctive."""
    rng = np.random.default_rng(seed)
    theta = _smooth_noise(h, w, 4, rng) * 0.9 + rng.uniform(0, np.pi)
    phase = _smooth_noise(h, w, 4, rng) * 3.0
    period = rng.uniform(7.0, 11.0)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ridges = np.cos(2 * np.pi / period * (xs * np.cos(theta)
                                          + ys * np.sin(theta)) + phase)
    texture = (_smooth_noise(h, w, 8, rng) + 0.5 * _smooth_noise(h, w, 16, rng))
    texture = texture / (np.abs(texture).max() + 1e-9)
    img = 0.5 + 0.22 * ridges + 0.33 * texture
    return np.clip(img, 0.0, 1.0)


def random_tps_field(h: int, w: int, seed: int, n_ctrl: int = 6,
                     max_disp: float = 8.0) -> np.ndarray:
    """Smooth random deformation field from a TPS with bounded displacements."""
    rng = np.random.default_rng(seed)
    margin = 4.0
    src = np.stack([rng.uniform(margin, w - 1 - margin, n_ctrl),
                    rng.uniform(margin, h - 1 - margin, n_ctrl)], axis=-1)
    dst = src + rng.uniform(-max_disp, max_disp, size=(n_ctrl, 2))
    model = tps_fit(src, dst, lam=0.0)
    return tps_evaluate(model, h, w)


def warped_pair(img: np.ndarray, seed: int, n_ctrl: int = 6,
                max_disp: float = 6.0, gt_stride: int = 4) -> TrainingPair:
    """Image B = backward warp of A by a random TPS field, with exact GT.

    B(q) = A(q + d(q)), so the point q + d(q) in A corresponds to q in B;
    correspondences are sampled on a stride gt_stride grid of B.
    """
    h, w = img.shape
    d = random_tps_field(h, w, seed, n_ctrl, max_disp)
    img_b = warp_image(img, d)
    half = gt_stride / 2.0 - 0.5
    gx = np.arange(w // gt_stride) * gt_stride + half
    gy = np.arange(h // gt_stride) * gt_stride + half
    qx, qy = np.meshgrid(gx, gy)
    qx = qx.ravel()
    qy = qy.ravel()
    from .warpfield import sample_bilinear
    disp = sample_bilinear(d, qx, qy)
    xa = qx + disp[:, 0]
    ya = qy + disp[:, 1]
    keep = (xa >= 0) & (xa <= w - 1) & (ya >= 0) & (ya <= h - 1)
    corr = CorrespondenceSet(xa[keep], ya[keep], qx[keep], qy[keep],
                             np.ones(int(keep.sum())))
    return TrainingPair(img.copy(), img_b, corr)
