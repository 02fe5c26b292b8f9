"""Coarse matching: correlation, dual-softmax, mutual-nearest-neighbor filter."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import numkit
from .errors import DimensionError


@dataclass
class MatchSet:
    """Filtered coarse matches between two flattened stride-8 grids.

    pairs: (i, j, confidence) with i indexing A's grid and j indexing B's,
    row-major. One-to-one by construction.
    """
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    grid_a: tuple[int, int] = (0, 0)
    grid_b: tuple[int, int] = (0, 0)

    def __len__(self):
        return len(self.pairs)


def correlation(fa: torch.Tensor, fb: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """C[i,j] = tau * dot(fa_i, fb_j) over row-major flattened feature maps."""
    if fa.shape[-1] != fb.shape[-1]:
        raise DimensionError(
            f"correlation channel mismatch: {fa.shape[-1]} vs {fb.shape[-1]}")
    a = fa.reshape(-1, fa.shape[-1])
    b = fb.reshape(-1, fb.shape[-1])
    return tau * (a @ b.transpose(0, 1))


def dual_softmax(c: torch.Tensor) -> torch.Tensor:
    """Elementwise product of row-wise and column-wise softmax of c.

    Not a stochastic matrix: rows need not sum to 1.
    """
    return numkit.softmax_rows(c) * numkit.softmax_rows(c.transpose(0, 1)).transpose(0, 1)


def mnn_filter(p: torch.Tensor, theta: float,
               grid_a: tuple[int, int] = (0, 0),
               grid_b: tuple[int, int] = (0, 0)) -> MatchSet:
    """Keep (i,j) iff p[i,j] maximizes both row i and column j and >= theta.

    Ties broken deterministically toward the smallest flat index (argmax of
    torch returns the first maximum).
    """
    if p.numel() == 0:
        return MatchSet([], grid_a, grid_b)
    row_best = p.argmax(dim=1)
    col_best = p.argmax(dim=0)
    i_idx = torch.arange(p.shape[0])
    mutual = col_best[row_best] == i_idx
    keep = mutual & (p[i_idx, row_best] >= theta)
    pairs = [(int(i), int(row_best[i]), float(p[i, row_best[i]]))
             for i in i_idx[keep]]
    return MatchSet(pairs, grid_a, grid_b)
