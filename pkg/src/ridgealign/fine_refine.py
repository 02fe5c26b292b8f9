"""Fine-level position rectification.

Coarse matches are lifted to the stride-2 grid, w x w patches around each
endpoint run n_f rounds of self- then cross-attention, and the refined B-side
position is the expectation of patch coordinates under the softmax of the
similarity between A's center feature and every B-patch cell. The variance of
the same distribution is reported per match for the fine loss.

Coordinate conventions: cell (r,c) at stride s sits at pixel
(s*c + s/2 - 0.5, s*r + s/2 - 0.5); the same convention converts between
strides and back to original pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .coarse_gla import _blocked_attention
from .config import ModelConfig
from .match_layer import MatchSet
from .weights import WeightArchive


@dataclass
class CorrespondenceSet:
    """Sub-pixel point pairs in original image pixels."""
    xa: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ya: np.ndarray = field(default_factory=lambda: np.zeros(0))
    xb: np.ndarray = field(default_factory=lambda: np.zeros(0))
    yb: np.ndarray = field(default_factory=lambda: np.zeros(0))
    conf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    var: np.ndarray | None = None  # positional variance per pair (fine cells^2)

    def __len__(self):
        return len(self.xa)

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["xA", "yA", "xB", "yB", "conf"])
            for i in range(len(self)):
                wr.writerow([f"{v:.6f}" for v in
                             (self.xa[i], self.ya[i], self.xb[i], self.yb[i],
                              self.conf[i] if len(self.conf) else 0.0)])

    @classmethod
    def load_csv(cls, path) -> "CorrespondenceSet":
        rows = []
        with open(path, newline="") as f:
            rd = csv.reader(f)
            header = next(rd, None)
            assert header is not None
            for row in rd:
                rows.append([float(v) for v in row])
        if not rows:
            z = np.zeros(0)
            return cls(z, z.copy(), z.copy(), z.copy(), z.copy())
        a = np.asarray(rows)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4])


def cell_center(idx: np.ndarray, stride: int) -> np.ndarray:
    """Pixel coordinate of a cell center at the given stride."""
    return stride * np.asarray(idx, dtype=np.float64) + stride / 2.0 - 0.5


def pixel_to_cell(x: np.ndarray, stride: int) -> np.ndarray:
    """Continuous cell coordinate of a pixel position."""
    return (np.asarray(x, dtype=np.float64) - (stride / 2.0 - 0.5)) / stride


def lift_to_fine(matches: MatchSet) -> np.ndarray:
    """Coarse match pairs -> [N,4] fine-grid coordinates (xa, ya, xb, yb).

    Coarse cell c maps to fine coordinate 4*c + 1.5 (center convention,
    stride 8 -> stride 2).
    """
    if len(matches) == 0:
        return np.zeros((0, 4))
    _, wa_cells = matches.grid_a
    _, wb_cells = matches.grid_b
    out = np.zeros((len(matches), 4))
    for n, (i, j, _) in enumerate(matches.pairs):
        ra, ca = divmod(i, wa_cells)
        rb, cb = divmod(j, wb_cells)
        out[n] = [4 * ca + 1.5, 4 * ra + 1.5, 4 * cb + 1.5, 4 * rb + 1.5]
    return out


def _gather_patches(fmap: torch.Tensor, cx: torch.Tensor, cy: torch.Tensor, w: int):
    """Crop w x w windows centered at integer cells (cx, cy) with border masking.

    Returns (patch [N,w*w,C], pos [N,w*w,2] nominal cell coords, valid [N,w*w]).
    """
    h, ww = fmap.shape[0], fmap.shape[1]
    half = w // 2
    off = torch.arange(-half, half + 1, dtype=torch.long)
    gy = cy.view(-1, 1, 1) + off.view(1, -1, 1)
    gx = cx.view(-1, 1, 1) + off.view(1, 1, -1)
    gy = gy.expand(-1, w, w)
    gx = gx.expand(-1, w, w)
    valid = (gy >= 0) & (gy < h) & (gx >= 0) & (gx < ww)
    patch = fmap[gy.clamp(0, h - 1), gx.clamp(0, ww - 1)]
    pos = torch.stack([gx, gy], dim=-1).to(fmap.dtype)
    n = cx.shape[0]
    return (patch.reshape(n, w * w, -1), pos.reshape(n, w * w, 2),
            valid.reshape(n, w * w))


def refine_positions(fine_a: torch.Tensor, fine_b: torch.Tensor,
                     lifted: np.ndarray, wa: WeightArchive, cfg: ModelConfig):
    """Differentiable core of the refinement.

    lifted: [N,4] fine-grid (xa, ya, xb, yb). Returns torch tensors
    (j_prime [N,2] fine coords, var_xy [N,2], sim distribution aux) for the
    loss path.
    """
    w = cfg.window
    n = lifted.shape[0]
    if n == 0:
        z = torch.zeros((0, 2), dtype=fine_a.dtype)
        return z, z.clone()
    lf = torch.as_tensor(lifted, dtype=fine_a.dtype)
    cax = torch.floor(lf[:, 0] + 0.5).long()
    cay = torch.floor(lf[:, 1] + 0.5).long()
    cbx = torch.floor(lf[:, 2] + 0.5).long()
    cby = torch.floor(lf[:, 3] + 0.5).long()
    pa, _, va = _gather_patches(fine_a, cax, cay, w)
    pb, posb, vb = _gather_patches(fine_b, cbx, cby, w)
    for t in range(cfg.n_f):
        pa = pa + _blocked_attention(pa, pa, pa, wa, f"fine{t}.self",
                                     cfg.heads, key_mask=va)
        pb = pb + _blocked_attention(pb, pb, pb, wa, f"fine{t}.self",
                                     cfg.heads, key_mask=vb)
        ma = _blocked_attention(pa, pb, pb, wa, f"fine{t}.cross",
                                cfg.heads, key_mask=vb)
        mb = _blocked_attention(pb, pa, pa, wa, f"fine{t}.cross",
                                cfg.heads, key_mask=va)
        pa = pa + ma
        pb = pb + mb
    center = (w * w) // 2
    ca = pa[:, center, :]                                     # [N,C]
    sim = torch.einsum("nc,nkc->nk", ca, pb) / (ca.shape[-1] ** 0.5)
    sim = sim.masked_fill(~vb, -1e30)
    m = sim.max(dim=-1, keepdim=True).values
    e = torch.exp(sim - m)
    p = e / e.sum(dim=-1, keepdim=True)
    j_prime = torch.einsum("nk,nkd->nd", p, posb)
    dev = posb - j_prime.unsqueeze(1)
    var_xy = torch.einsum("nk,nkd->nd", p, dev * dev)
    return j_prime, var_xy


def refine(fine_a: torch.Tensor, fine_b: torch.Tensor, matches: MatchSet,
           wa: WeightArchive, cfg: ModelConfig) -> CorrespondenceSet:
    """Refine every coarse match to sub-pixel pixel coordinates.

    Refinement never drops pairs; the output count equals the match count.
    """
    lifted = lift_to_fine(matches)
    with torch.no_grad():
        j_prime, var_xy = refine_positions(fine_a, fine_b, lifted, wa, cfg)
    jp = j_prime.numpy()
    var = var_xy.sum(dim=-1).numpy()
    conf = np.array([c for (_, _, c) in matches.pairs])
    # fine cell coordinate f sits at original pixel 2f + 0.5
    return CorrespondenceSet(
        xa=2.0 * lifted[:, 0] + 0.5, ya=2.0 * lifted[:, 1] + 0.5,
        xb=2.0 * jp[:, 0] + 0.5, yb=2.0 * jp[:, 1] + 0.5,
        conf=conf, var=var)
