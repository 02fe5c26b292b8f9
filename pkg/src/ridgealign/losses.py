"""Ground-truth quantization, the three training losses, gradient checking
against finite differences, and a toy gradient-descent loop.

All loss values are computed on the float64 autograd graph; the finite
difference oracle in grad_check is the independent check of the analytic
gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import backbone, coarse_gla, fine_refine, match_layer
from .config import ModelConfig
from .errors import RidgeAlignError
from .fine_refine import CorrespondenceSet
from .numkit import DTYPE
from .weights import WeightArchive

log = logging.getLogger("ridgealign.losses")

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GtMatches:
    """Quantized coarse ground truth plus the unquantized fine targets."""
    pairs: list[tuple[int, int]]                 # (flat A cell, flat B cell)
    fine_targets: np.ndarray                     # [M,2] B target, stride-2 cells
    dgt: np.ndarray                              # [H8,W8,2] B target, coarse cells
    valid: np.ndarray                            # [H8,W8] bool
    grid_a: tuple[int, int] = (0, 0)
    grid_b: tuple[int, int] = (0, 0)


@dataclass
class LossReport:
    l_c: float
    l_f: float
    l_flow: float
    l_total: float
    alpha: float
    warnings: list[str] = field(default_factory=list)


def quantize_gt(corr: CorrespondenceSet, grid_a: tuple[int, int],
                grid_b: tuple[int, int]) -> GtMatches:
    """Snap correspondences (original pixels) to stride-8 cells.

    A-points take their containing cell; when several A-cells map into one
    B-cell only the pair whose unquantized B-point is nearest that cell's
    center survives (ties: smallest A flat index). Points from the same
    A-cell are deduplicated first by nearness to the A-cell center.
    """
    ha, wa = grid_a
    hb, wb = grid_b
    best_a: dict[int, tuple[float, int]] = {}
    for n in range(len(corr)):
        ca = int(corr.xa[n] // 8)
        ra = int(corr.ya[n] // 8)
        cb = int(corr.xb[n] // 8)
        rb = int(corr.yb[n] // 8)
        if not (0 <= ra < ha and 0 <= ca < wa and 0 <= rb < hb and 0 <= cb < wb):
            continue
        ia = ra * wa + ca
        dax = corr.xa[n] - (8 * ca + 3.5)
        day = corr.ya[n] - (8 * ra + 3.5)
        d = dax * dax + day * day
        if ia not in best_a or d < best_a[ia][0]:
            best_a[ia] = (d, n)
    best_b: dict[int, tuple[float, int, int]] = {}
    for ia, (_, n) in sorted(best_a.items()):
        cb = int(corr.xb[n] // 8)
        rb = int(corr.yb[n] // 8)
        jb = rb * wb + cb
        dbx = corr.xb[n] - (8 * cb + 3.5)
        dby = corr.yb[n] - (8 * rb + 3.5)
        d = dbx * dbx + dby * dby
        cur = best_b.get(jb)
        if cur is None or d < cur[0] or (d == cur[0] and ia < cur[1]):
            best_b[jb] = (d, ia, n)
    pairs = []
    fine_targets = []
    dgt = np.zeros((ha, wa, 2))
    valid = np.zeros((ha, wa), dtype=bool)
    for jb, (_, ia, n) in sorted(best_b.items(), key=lambda kv: kv[1][1]):
        pairs.append((ia, jb))
        fine_targets.append([fine_refine.pixel_to_cell(corr.xb[n], 2),
                             fine_refine.pixel_to_cell(corr.yb[n], 2)])
        r, c = divmod(ia, wa)
        dgt[r, c, 0] = fine_refine.pixel_to_cell(corr.xb[n], 8)
        dgt[r, c, 1] = fine_refine.pixel_to_cell(corr.yb[n], 8)
        valid[r, c] = True
    ft = np.asarray(fine_targets) if fine_targets else np.zeros((0, 2))
    return GtMatches(pairs, ft, dgt, valid, grid_a, grid_b)


def coarse_loss(p_c: torch.Tensor, gt: GtMatches) -> torch.Tensor:
    """Negative log-likelihood of the dual-softmax probabilities at GT cells."""
    if not gt.pairs:
        log.warning("coarse_loss: empty ground truth, returning 0")
        return torch.zeros((), dtype=p_c.dtype)
    ii = torch.tensor([p[0] for p in gt.pairs])
    jj = torch.tensor([p[1] for p in gt.pairs])
    return -(torch.log(p_c[ii, jj])).mean()


def fine_loss(j_prime: torch.Tensor, var_xy: torch.Tensor,
              targets: np.ndarray, window: int,
              sigma2_override: torch.Tensor | None = None) -> torch.Tensor:
    """Variance-weighted l2 distance between refined and target positions.

    The 1/sigma^2 weight is detached (no gradient through the variance), and
    pairs whose target lies outside the w-window centered at the prediction
    are ignored. sigma2_override substitutes a fixed weight vector; the
    finite-difference oracle uses it to emulate the stop-gradient.
    """
    if j_prime.shape[0] == 0:
        log.warning("fine_loss: no pairs, returning 0")
        return torch.zeros((), dtype=DTYPE)
    tg = torch.as_tensor(targets, dtype=j_prime.dtype)
    diff = j_prime - tg
    inside = (diff.detach().abs() <= window / 2.0).all(dim=-1)
    if not bool(inside.any()):
        log.warning("fine_loss: every pair gated out, returning 0")
        return torch.zeros((), dtype=j_prime.dtype)
    if sigma2_override is not None:
        sigma2 = sigma2_override
    else:
        sigma2 = var_xy.sum(dim=-1).detach().clamp_min(1e-12)
    dist = torch.sqrt((diff * diff).sum(dim=-1) + 1e-30)
    return ((dist / sigma2)[inside]).mean()


def flow_loss(flows: list[torch.Tensor], dgt: np.ndarray,
              valid: np.ndarray) -> torch.Tensor:
    """Gaussian NLL of the GT flow under each layer's predicted flow map.

    Per valid cell: log 2pi + log sx + log sy
                    + (x-ux)^2/(2 sx^2) + (y-uy)^2/(2 sy^2),
    averaged over valid cells and summed over layers.
    """
    if not valid.any() or not flows:
        if flows:
            log.warning("flow_loss: no valid cells, returning 0")
        return torch.zeros((), dtype=DTYPE)
    vt = torch.as_tensor(valid)
    gt = torch.as_tensor(dgt, dtype=flows[0].dtype)
    total = torch.zeros((), dtype=flows[0].dtype)
    for fl in flows:
        u = fl[..., 0:2]
        s = fl[..., 2:4]
        per_cell = (LOG_2PI + torch.log(s[..., 0]) + torch.log(s[..., 1])
                    + (gt[..., 0] - u[..., 0]) ** 2 / (2 * s[..., 0] ** 2)
                    + (gt[..., 1] - u[..., 1]) ** 2 / (2 * s[..., 1] ** 2))
        total = total + per_cell[vt].mean()
    return total


@dataclass
class TrainingBatchOutput:
    report: LossReport
    total: torch.Tensor
    fine_sigma2: torch.Tensor | None = None


def training_forward(img_a: torch.Tensor, img_b: torch.Tensor,
                     corr: CorrespondenceSet, wa: WeightArchive,
                     cfg: ModelConfig,
                     frozen_sigma2: torch.Tensor | None = None
                     ) -> TrainingBatchOutput:
    """Full differentiable loss of one image pair with GT correspondences.

    The coarse loss supervises the dual-softmax probabilities, the fine loss
    refines at the GT coarse matches, and the flow loss supervises every GLA
    layer in both directions (the reversed GT comes from swapping the
    correspondence roles).
    """
    fa0, fine_a = backbone.extract_features(img_a, wa)
    fb0, fine_b = backbone.extract_features(img_b, wa)
    fa, fb, flows_a, flows_b = coarse_gla.coarse_interact(fa0, fb0, wa, cfg)
    grid_a = (fa.shape[0], fa.shape[1])
    grid_b = (fb.shape[0], fb.shape[1])
    c = match_layer.correlation(fa, fb, wa["match.tau"])
    p_c = match_layer.dual_softmax(c)

    gt_ab = quantize_gt(corr, grid_a, grid_b)
    corr_ba = CorrespondenceSet(corr.xb, corr.yb, corr.xa, corr.ya, corr.conf)
    gt_ba = quantize_gt(corr_ba, grid_b, grid_a)

    l_c = coarse_loss(p_c, gt_ab)

    # fine refinement at the GT coarse matches (their cell centers)
    lifted = np.zeros((len(gt_ab.pairs), 4))
    for n, (ia, jb) in enumerate(gt_ab.pairs):
        ra, ca = divmod(ia, grid_a[1])
        rb, cb = divmod(jb, grid_b[1])
        lifted[n] = [4 * ca + 1.5, 4 * ra + 1.5, 4 * cb + 1.5, 4 * rb + 1.5]
    j_prime, var_xy = fine_refine.refine_positions(fine_a, fine_b, lifted, wa, cfg)
    l_f = fine_loss(j_prime, var_xy, gt_ab.fine_targets, cfg.window,
                    sigma2_override=frozen_sigma2)

    l_flow = (flow_loss(flows_a, gt_ab.dgt, gt_ab.valid)
              + flow_loss(flows_b, gt_ba.dgt, gt_ba.valid))
    total = l_c + l_f + cfg.alpha * l_flow
    report = LossReport(float(l_c.detach()), float(l_f.detach()),
                        float(l_flow.detach()), float(total.detach()), cfg.alpha)
    sigma2 = var_xy.sum(dim=-1).detach().clamp_min(1e-12)
    return TrainingBatchOutput(report, total, sigma2)


def total_loss(l_c: torch.Tensor, l_f: torch.Tensor, l_flow: torch.Tensor,
               alpha: float) -> torch.Tensor:
    return l_c + l_f + alpha * l_flow


def grad_check(img_a, img_b, corr: CorrespondenceSet, wa: WeightArchive,
               cfg: ModelConfig, eps: float = 1e-5, n_samples: int = 200,
               seed: int = 0) -> float:
    """Compare autograd parameter gradients of the total loss against central
    finite differences on a random parameter sample covering every tensor.

    The fine loss stops gradients at its 1/sigma^2 weight, so the oracle
    evaluates the loss with sigma^2 frozen at the base point (the function
    actually being differentiated). Returns the maximum relative error.

    Weights are jittered to a generic point first: bilinear sampling is only
    piecewise-differentiable, and freshly initialized (zero) flow heads place
    every sampling point exactly on a grid kink, where one-sided analytic and
    central finite differences legitimately disagree.
    """
    jitter = torch.Generator().manual_seed(seed + 1)
    wa = wa.clone()
    for t in wa.tensors.values():
        t += 0.02 * torch.randn(t.shape, generator=jitter, dtype=t.dtype)
    wa.requires_grad_(True)
    out = training_forward(img_a, img_b, corr, wa, cfg)
    out.total.backward()
    grads = {k: (t.grad.detach().clone() if t.grad is not None
                 else torch.zeros_like(t))
             for k, t in wa.tensors.items()}
    sigma2 = out.fine_sigma2
    wa.requires_grad_(False)

    rng = np.random.default_rng(seed)
    names = list(wa.tensors.keys())
    per = max(1, int(np.ceil(n_samples / len(names))))
    worst = 0.0
    for name in names:
        t = wa.tensors[name]
        flat = t.view(-1)
        idxs = rng.choice(flat.numel(), size=min(per, flat.numel()), replace=False)
        for idx in idxs:
            orig = float(flat[idx])
            flat[idx] = orig + eps
            lp = float(training_forward(img_a, img_b, corr, wa, cfg,
                                        frozen_sigma2=sigma2).total)
            flat[idx] = orig - eps
            lm = float(training_forward(img_a, img_b, corr, wa, cfg,
                                        frozen_sigma2=sigma2).total)
            flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = float(grads[name].view(-1)[idx])
            if abs(an - fd) <= 1e-8:  # FD roundoff noise on ~zero gradients
                continue
            rel = abs(an - fd) / max(abs(an) + abs(fd), 1e-6)
            if rel > worst:
                worst = rel
    return worst


def train_toy(pairs, wa: WeightArchive, cfg: ModelConfig, steps: int = 200,
              lr: float = 1e-2) -> tuple[list[LossReport], WeightArchive]:
    """Gradient descent on one or more synthetic pairs.

    Uses global gradient-norm clipping and a 1/(1 + t/100) learning-rate
    decay so the loss trace settles instead of bouncing near the optimum.
    Returns the per-step loss reports and the trained weights. Aborts on
    divergence (NaN) naming the step.
    """
    if not isinstance(pairs, list):
        pairs = [pairs]
    wa = wa.clone()
    trace: list[LossReport] = []
    tens = [(torch.as_tensor(p.image_a, dtype=DTYPE),
             torch.as_tensor(p.image_b, dtype=DTYPE), p.corr) for p in pairs]
    for step in range(steps):
        wa.requires_grad_(True)
        totals = []
        reports = []
        for ia, ib, corr in tens:
            out = training_forward(ia, ib, corr, wa, cfg)
            totals.append(out.total)
            reports.append(out.report)
        total = torch.stack(totals).mean()
        if not math.isfinite(float(total.detach())):
            raise RidgeAlignError(f"train_toy diverged (NaN) at step {step}")
        total.backward()
        with torch.no_grad():
            gnorm = math.sqrt(sum(float((t.grad ** 2).sum())
                                  for t in wa.tensors.values()
                                  if t.grad is not None))
            scale = min(1.0, 5.0 / gnorm) if gnorm > 0 else 1.0
            step_lr = lr * scale / (1.0 + step / 100.0)
            for t in wa.tensors.values():
                if t.grad is not None:
                    t -= step_lr * t.grad
                    t.grad = None
        wa.requires_grad_(False)
        trace.append(LossReport(
            float(np.mean([r.l_c for r in reports])),
            float(np.mean([r.l_f for r in reports])),
            float(np.mean([r.l_flow for r in reports])),
            float(total.detach()), cfg.alpha))
    return trace, wa


def save_trace_csv(path, trace: list[LossReport]):
    with open(path, "w", newline="") as f:
        f.write("step,L_c,L_f,L_flow,L_total\n")
        for i, r in enumerate(trace):
            f.write(f"{i},{r.l_c:.6f},{r.l_f:.6f},{r.l_flow:.6f},{r.l_total:.6f}\n")
