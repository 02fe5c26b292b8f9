"""Built-in invariant and oracle suite, runnable from the CLI.

Each check is independent and deterministic; the CLI prints one line per
check and fails if any check fails.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
import torch

from . import match_layer, numkit, scorer, synth, warpfield
from .config import TOY
from .fine_refine import CorrespondenceSet
from .losses import grad_check
from .numkit import DTYPE
from .weights import WeightArchive, init_weights


def _check_tps_interpolation():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(4, 51))
        src = rng.uniform(0, 511, size=(n, 2))
        dst = src + rng.uniform(-40, 40, size=(n, 2))
        model = warpfield.tps_fit(src, dst, 0.0)
        res = np.abs(warpfield.tps_apply(model, src) - dst).max()
        worst = max(worst, res)
    return worst <= 1e-9, f"max residual {worst:.2e}"


def _check_tps_affine():
    rng = np.random.default_rng(3)
    src = rng.uniform(0, 511, size=(12, 2))
    th = np.deg2rad(10.0)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    dst = src @ rot.T + np.array([7.0, -3.0])
    worst = 0.0
    q = rng.uniform(0, 511, size=(200, 2))
    expected = q @ rot.T + np.array([7.0, -3.0])
    for lam in (0.0, 0.2):
        model = warpfield.tps_fit(src, dst, lam)
        worst = max(worst, np.abs(warpfield.tps_apply(model, q) - expected).max())
    return worst <= 1e-8, f"max affine error {worst:.2e}"


def _check_tps_lambda_monotone():
    rng = np.random.default_rng(5)
    src = rng.uniform(0, 255, size=(15, 2))
    dst = src + rng.uniform(-20, 20, size=(15, 2))
    prev = -1.0
    for lam in (0.0, 0.05, 0.2, 1.0):
        model = warpfield.tps_fit(src, dst, lam)
        res = ((warpfield.tps_apply(model, src) - dst) ** 2).sum()
        if res < prev - 1e-12:
            return False, f"residual decreased at lambda={lam}"
        prev = res
    return True, "residual non-decreasing in lambda"


def _check_dual_softmax_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        m, n = int(rng.integers(2, 13)), int(rng.integers(2, 16))
        c = torch.as_tensor(rng.normal(size=(m, n)), dtype=DTYPE)
        p = match_layer.dual_softmax(c)
        ref = np.zeros((m, n))
        cn = c.numpy()
        for i in range(m):
            for j in range(n):
                ri = np.exp(cn[i, j] - cn[i].max()) / np.exp(cn[i] - cn[i].max()).sum()
                cj = np.exp(cn[i, j] - cn[:, j].max()) / np.exp(cn[:, j] - cn[:, j].max()).sum()
                ref[i, j] = ri * cj
        worst = max(worst, np.abs(p.numpy() - ref).max())
    return worst <= 1e-12, f"max oracle gap {worst:.2e}"


def _check_mnn_oracle():
    rng = np.random.default_rng(13)
    for _ in range(50):
        m, n = int(rng.integers(2, 10)), int(rng.integers(2, 12))
        p = torch.as_tensor(rng.uniform(size=(m, n)), dtype=DTYPE)
        got = {(i, j) for i, j, _ in match_layer.mnn_filter(p, 0.3).pairs}
        ref = set()
        pn = p.numpy()
        for i in range(m):
            for j in range(n):
                if (pn[i, j] >= 0.3 and pn[i, j] == pn[i].max()
                        and pn[i, j] == pn[:, j].max()
                        and j == int(pn[i].argmax()) and i == int(pn[:, j].argmax())):
                    ref.add((i, j))
        if got != ref:
            return False, f"pair sets differ: {got ^ ref}"
    return True, "pair sets identical on 50 random matrices"


def _check_compose():
    rng = np.random.default_rng(17)
    dc = np.full((16, 16, 2), 1.5)
    df = np.full((16, 16, 2), -0.5)
    if np.abs(warpfield.compose(dc, df) - 1.0).max() > 1e-12:
        return False, "constant-field addition failed"
    dc = synth.random_tps_field(32, 32, 19, max_disp=3)
    df = synth.random_tps_field(32, 32, 23, max_disp=3)
    d = warpfield.compose(dc, df)
    worst = 0.0
    for _ in range(100):
        x = int(rng.integers(0, 32))
        y = int(rng.integers(0, 32))
        sx = x + df[y, x, 0]
        sy = y + df[y, x, 1]
        ref = warpfield.sample_bilinear(dc, np.array([sx]), np.array([sy]))[0] + df[y, x]
        worst = max(worst, np.abs(d[y, x] - ref).max())
    return worst <= 1e-10, f"max scalar-oracle gap {worst:.2e}"


def _check_ncc():
    img = synth.ridge_image(64, 64, 2)
    m = np.ones((64, 64), dtype=bool)
    ok = abs(scorer.ncc(img, img, m) - 1.0) <= 1e-12
    ok &= abs(scorer.ncc(img, 1.0 - img, m) + 1.0) <= 1e-12
    return ok, "identity/anti-correlation exact"


def _check_metrics():
    s = scorer.ScoreSet(genuine=[0.5, 0.6, 0.7], impostor=[0.5, 0.6, 0.7])
    ok = abs(scorer.eer(s) - 0.5) <= 1e-12
    s2 = scorer.ScoreSet(genuine=[0.9, 0.8, 0.3], impostor=[0.7, 0.2, 0.1])
    ok &= abs(scorer.zero_fmr(s2) - 1.0 / 3.0) <= 1e-12
    mat = np.array([[0.9, 0.1], [0.2, 0.5], [0.3, 0.8]])
    ok &= abs(scorer.rank1(mat, np.array([0, 0, 1])) - 2.0 / 3.0) <= 1e-12
    return ok, "eer/zerofmr/rank1 fixtures exact"


def _check_softmax_rows():
    rng = np.random.default_rng(29)
    x = torch.as_tensor(rng.normal(scale=50, size=(40, 17)), dtype=DTYPE)
    s = numkit.softmax_rows(x).sum(dim=-1)
    gap = float((s - 1.0).abs().max())
    return gap <= 1e-12, f"row-sum gap {gap:.2e}"


def _check_bilinear_grid():
    rng = np.random.default_rng(31)
    src = torch.as_tensor(rng.normal(size=(9, 7, 3)), dtype=DTYPE)
    pts = torch.tensor([[3.0, 5.0], [0.0, 0.0], [6.0, 8.0]], dtype=DTYPE)
    got = numkit.bilinear_sample(src, pts)
    ref = torch.stack([src[5, 3], src[0, 0], src[8, 6]])
    gap = float((got - ref).abs().max())
    return gap == 0.0, f"integer-grid gap {gap:.2e}"


def _check_rwa_roundtrip():
    wa = init_weights(TOY, seed=1)
    with tempfile.TemporaryDirectory() as td:
        p1 = os.path.join(td, "a.rwa")
        p2 = os.path.join(td, "b.rwa")
        wa.save(p1)
        WeightArchive.load(p1).save(p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            same = f1.read() == f2.read()
    return same, "write-read-write bitwise identical"


def _check_gradients():
    img = synth.ridge_image(32, 32, 40)
    pair = synth.warped_pair(img, 41, max_disp=3.0)
    wa = init_weights(TOY, seed=2)
    worst = grad_check(torch.as_tensor(pair.image_a, dtype=DTYPE),
                       torch.as_tensor(pair.image_b, dtype=DTYPE),
                       pair.corr, wa, TOY, n_samples=40, seed=3)
    return worst <= 1e-5, f"max relative gradient error {worst:.2e}"


CHECKS = [
    ("tps_interpolation", _check_tps_interpolation),
    ("tps_affine_reproduction", _check_tps_affine),
    ("tps_lambda_monotonicity", _check_tps_lambda_monotone),
    ("dual_softmax_oracle", _check_dual_softmax_oracle),
    ("mnn_oracle", _check_mnn_oracle),
    ("field_composition", _check_compose),
    ("ncc", _check_ncc),
    ("score_metrics", _check_metrics),
    ("softmax_row_sums", _check_softmax_rows),
    ("bilinear_integer_grid", _check_bilinear_grid),
    ("weight_archive_roundtrip", _check_rwa_roundtrip),
    ("gradient_check", _check_gradients),
]


def run_selftest(verbose_print=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        all_ok &= ok
        verbose_print(f"{'PASS' if ok else 'FAIL'}  {name:28s} {detail}")
    return all_ok
