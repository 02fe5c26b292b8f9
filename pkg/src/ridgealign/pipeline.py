"""End-to-end registration of an image pair: features -> coarse interaction
-> dual-softmax matching -> fine refinement -> regularized TPS -> warp -> NCC.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import backbone, coarse_gla, fine_refine, match_layer, scorer, warpfield
from .config import ModelConfig
from .errors import MetricError, RegistrationError, RidgeAlignError
from .fine_refine import CorrespondenceSet
from .numkit import DTYPE
from .weights import WeightArchive

log = logging.getLogger("ridgealign.pipeline")


@dataclass
class RegistrationResult:
    corr: CorrespondenceSet
    field: np.ndarray            # [H,W,2] on B's (padded) frame, pointing into A
    warped_a: np.ndarray
    mask: np.ndarray             # overlap mask in B's frame
    ncc_before: float
    ncc_after: float
    n_matches: int


def auto_segment(img: np.ndarray, block: int = 16) -> np.ndarray:
    """Block intensity-variance foreground mask with morphological closing.

    Blocks whose variance exceeds 10% of the global variance count as
    foreground; used when no mask is supplied.
    """
    h, w = img.shape
    hb, wb = h // block, w // block
    crop = img[:hb * block, :wb * block]
    blocks = crop.reshape(hb, block, wb, block)
    var = blocks.var(axis=(1, 3))
    gv = img.var()
    fg = var > 0.1 * gv if gv > 0 else np.zeros_like(var, dtype=bool)
    fg = _binary_close(fg)
    mask = np.zeros((h, w), dtype=bool)
    mask[:hb * block, :wb * block] = np.kron(fg, np.ones((block, block), dtype=bool))
    return mask


def _binary_close(m: np.ndarray) -> np.ndarray:
    def dilate(x):
        y = x.copy()
        y[1:] |= x[:-1]
        y[:-1] |= x[1:]
        y[:, 1:] |= x[:, :-1]
        y[:, :-1] |= x[:, 1:]
        return y

    def erode(x):
        return ~dilate(~x)

    return erode(dilate(m))


def match_pair(img_a: np.ndarray, img_b: np.ndarray, wa: WeightArchive,
               cfg: ModelConfig) -> CorrespondenceSet:
    """Padded images -> refined sub-pixel correspondences (original pixels)."""
    ta = torch.as_tensor(img_a, dtype=DTYPE)
    tb = torch.as_tensor(img_b, dtype=DTYPE)
    with torch.no_grad():
        fa0, fine_a = backbone.extract_features(ta, wa)
        fb0, fine_b = backbone.extract_features(tb, wa)
        fa, fb, _, _ = coarse_gla.coarse_interact(fa0, fb0, wa, cfg)
        c = match_layer.correlation(fa, fb, wa["match.tau"])
        p_c = match_layer.dual_softmax(c)
    matches = match_layer.mnn_filter(p_c, cfg.theta,
                                     (fa.shape[0], fa.shape[1]),
                                     (fb.shape[0], fb.shape[1]))
    return fine_refine.refine(fine_a, fine_b, matches, wa, cfg)


def register_pair(img_a: np.ndarray, img_b: np.ndarray, wa: WeightArchive,
                  cfg: ModelConfig, mask_a: np.ndarray | None = None,
                  mask_b: np.ndarray | None = None) -> RegistrationResult:
    """Register A onto B and score the result with masked NCC.

    The TPS is fitted from B-points to A-points so the evaluated field lives
    on B's frame and backward-warps A toward B.
    """
    pa, pad_mask_a = backbone.pad_to_multiple(img_a)
    pb, pad_mask_b = backbone.pad_to_multiple(img_b)
    if pa.shape != pb.shape:
        h = max(pa.shape[0], pb.shape[0])
        w = max(pa.shape[1], pb.shape[1])
        pa2 = np.zeros((h, w)); pa2[:pa.shape[0], :pa.shape[1]] = pa
        pb2 = np.zeros((h, w)); pb2[:pb.shape[0], :pb.shape[1]] = pb
        ma2 = np.zeros((h, w), dtype=bool); ma2[:pa.shape[0], :pa.shape[1]] = pad_mask_a
        mb2 = np.zeros((h, w), dtype=bool); mb2[:pb.shape[0], :pb.shape[1]] = pad_mask_b
        pa, pb, pad_mask_a, pad_mask_b = pa2, pb2, ma2, mb2

    def lift_mask(m, pad_m, img_shape):
        out = np.zeros(pa.shape, dtype=bool)
        if m is None:
            seg = auto_segment(pa if img_shape == "a" else pb)
            return seg & pad_m
        out[:m.shape[0], :m.shape[1]] = m
        return out & pad_m

    ma = lift_mask(mask_a, pad_mask_a, "a")
    mb = lift_mask(mask_b, pad_mask_b, "b")

    corr = match_pair(pa, pb, wa, cfg)
    if len(corr) < 3:
        raise RegistrationError(
            f"registration failed: insufficient matches ({len(corr)})")
    src = np.stack([corr.xb, corr.yb], axis=-1)
    dst = np.stack([corr.xa, corr.ya], axis=-1)
    try:
        model = warpfield.tps_fit(src, dst, cfg.tps_lambda)
    except RidgeAlignError as e:
        raise RegistrationError(f"registration failed: {e}") from None
    field = warpfield.tps_evaluate(model, pa.shape[0], pa.shape[1])
    warped = warpfield.warp_image(pa, field)
    warped_ma = warpfield.warp_mask(ma, field)
    overlap = warped_ma & mb

    def safe_ncc(a, b, m):
        try:
            return scorer.ncc(a, b, m)
        except MetricError:
            return 0.0

    ncc_before = safe_ncc(pa, pb, ma & mb)
    ncc_after = safe_ncc(warped, pb, overlap)
    return RegistrationResult(corr, field, warped, overlap,
                              ncc_before, ncc_after, len(corr))


def _binarize_ridges(img: np.ndarray, mask: np.ndarray, block: int = 9) -> np.ndarray:
    """Ridge pixels = darker than the local mean (box filter)."""
    pad = block // 2
    padded = np.pad(img, pad, mode="edge")
    cs = padded.cumsum(0).cumsum(1)
    cs = np.pad(cs, ((1, 0), (1, 0)))
    h, w = img.shape
    total = (cs[block:block + h, block:block + w] - cs[:h, block:block + w]
             - cs[block:block + h, :w] + cs[:h, :w])
    local_mean = total / (block * block)
    return (img < local_mean) & mask


def overlay_image(warped_a: np.ndarray, img_b: np.ndarray,
                  mask: np.ndarray) -> np.ndarray:
    """RGB overlay: green = overlapping ridges, red = ridges only in A,
    gray = ridges only in B."""
    ra = _binarize_ridges(warped_a, mask)
    rb = _binarize_ridges(img_b, mask)
    h, w = img_b.shape
    rgb = np.full((h, w, 3), 255, dtype=np.uint8)
    rgb[ra & rb] = (0, 160, 0)
    rgb[ra & ~rb] = (200, 60, 60)
    rgb[~ra & rb] = (128, 128, 128)
    return rgb
