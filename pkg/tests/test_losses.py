import math

import numpy as np
import pytest
import torch

from ridgealign import losses
from ridgealign.config import TOY
from ridgealign.errors import RidgeAlignError
from ridgealign.fine_refine import CorrespondenceSet
from ridgealign.losses import (LOG_2PI, coarse_loss, fine_loss, flow_loss,
                               quantize_gt, total_loss, train_toy,
                               training_forward)
from ridgealign.numkit import DTYPE
from ridgealign.warpfield import TrainingPair
from ridgealign.weights import init_weights


def t(a):
    return torch.as_tensor(np.asarray(a), dtype=DTYPE)


class TestQuantizeGt:
    def test_containing_cell(self):
        corr = CorrespondenceSet(np.array([3.0]), np.array([11.0]),
                                 np.array([19.0]), np.array([5.0]),
                                 np.array([1.0]))
        gt = quantize_gt(corr, (4, 4), (4, 4))
        # A pixel (3,11) -> cell (row 1, col 0) -> flat 4; B (19,5) -> flat 2
        assert gt.pairs == [(4, 2)]
        assert gt.valid[1, 0]
        # dgt stores the continuous coarse-cell coordinate of the B point
        assert np.allclose(gt.dgt[1, 0], [(19.0 - 3.5) / 8, (5.0 - 3.5) / 8])
        assert np.allclose(gt.fine_targets, [[(19.0 - 0.5) / 2, (5.0 - 0.5) / 2]])

    def test_a_cell_dedup_keeps_nearest_center(self):
        # both points in A cell 0 (center 3.5,3.5); the second is nearer
        corr = CorrespondenceSet(np.array([1.0, 3.0]), np.array([1.0, 3.0]),
                                 np.array([9.0, 17.0]), np.array([1.0, 1.0]),
                                 np.ones(2))
        gt = quantize_gt(corr, (4, 4), (4, 4))
        assert gt.pairs == [(0, 2)]  # B cell of the second point

    def test_b_cell_dedup_keeps_nearest_b_center(self):
        # two different A cells into one B cell; second B point nearer its center
        corr = CorrespondenceSet(np.array([3.0, 11.0]), np.array([3.0, 3.0]),
                                 np.array([9.0, 11.0]), np.array([3.0, 3.5]),
                                 np.ones(2))
        gt = quantize_gt(corr, (4, 4), (4, 4))
        assert gt.pairs == [(1, 1)]

    def test_out_of_grid_dropped(self):
        corr = CorrespondenceSet(np.array([100.0]), np.array([1.0]),
                                 np.array([1.0]), np.array([1.0]), np.ones(1))
        gt = quantize_gt(corr, (4, 4), (4, 4))
        assert gt.pairs == []


class TestCoarseLoss:
    def test_known_probability(self):
        p = torch.full((2, 2), 0.1, dtype=DTYPE)
        p[0, 1] = math.exp(-1.0)
        gt = losses.GtMatches([(0, 1)], np.zeros((1, 2)), np.zeros((2, 2, 2)),
                              np.zeros((2, 2), dtype=bool))
        assert abs(float(coarse_loss(p, gt)) - 1.0) <= 1e-12

    def test_mean_over_pairs(self):
        p = torch.tensor([[0.5, 0.25], [0.25, 0.125]], dtype=DTYPE)
        gt = losses.GtMatches([(0, 0), (1, 1)], np.zeros((2, 2)),
                              np.zeros((2, 2, 2)), np.zeros((2, 2), dtype=bool))
        ref = -(math.log(0.5) + math.log(0.125)) / 2.0
        assert abs(float(coarse_loss(p, gt)) - ref) <= 1e-12

    def test_empty_gt_returns_zero(self):
        p = torch.full((2, 2), 0.25, dtype=DTYPE)
        gt = losses.GtMatches([], np.zeros((0, 2)), np.zeros((2, 2, 2)),
                              np.zeros((2, 2), dtype=bool))
        assert float(coarse_loss(p, gt)) == 0.0


class TestFineLoss:
    def test_three_four_five_over_sigma(self):
        # displacement (3,4) -> distance 5, sigma^2 = 2 -> loss 2.5
        j_prime = t([[3.0, 4.0]])
        var_xy = t([[1.5, 0.5]])
        targets = np.array([[0.0, 0.0]])
        got = float(fine_loss(j_prime, var_xy, targets, window=11))
        assert abs(got - 2.5) <= 1e-9

    def test_window_gates_far_pairs(self):
        j_prime = t([[3.0, 4.0], [0.1, 0.0]])
        var_xy = t([[0.5, 0.5], [0.5, 0.5]])
        targets = np.zeros((2, 2))
        # w=5 halves at 2.5: the first pair (|dx|=3) is gated out
        got = float(fine_loss(j_prime, var_xy, targets, window=5))
        assert abs(got - 0.1 / 1.0) <= 1e-9

    def test_stop_gradient_on_variance(self):
        # loss = dist(p) / sigma^2(p) with sigma^2 detached: the gradient is
        # d(dist)/dp / sigma^2 only. Without the stop-gradient the full
        # derivative of (p/2)/(2p) would be exactly 0.
        p = torch.tensor(2.0, dtype=DTYPE, requires_grad=True)
        j_prime = torch.stack([p / 2.0, torch.zeros((), dtype=DTYPE)]).view(1, 2)
        var_xy = torch.stack([p, p]).view(1, 2)
        loss = fine_loss(j_prime, var_xy, np.zeros((1, 2)), window=9)
        loss.backward()
        assert abs(float(p.grad) - 0.5 / 4.0) <= 1e-12

    def test_sigma_override(self):
        j_prime = t([[3.0, 4.0]])
        var_xy = t([[100.0, 100.0]])
        got = float(fine_loss(j_prime, var_xy, np.zeros((1, 2)), window=11,
                              sigma2_override=t([2.0])))
        assert abs(got - 2.5) <= 1e-9

    def test_empty_returns_zero(self):
        got = fine_loss(torch.zeros(0, 2, dtype=DTYPE),
                        torch.zeros(0, 2, dtype=DTYPE),
                        np.zeros((0, 2)), window=5)
        assert float(got) == 0.0


class TestFlowLoss:
    def test_closed_form_log_2pi(self):
        # u = gt, sigma = 1: per-cell loss is exactly log(2*pi)
        h = w = 4
        gt = np.random.default_rng(0).normal(size=(h, w, 2))
        flow = torch.cat([t(gt), torch.ones(h, w, 2, dtype=DTYPE)], dim=-1)
        valid = np.ones((h, w), dtype=bool)
        got = float(flow_loss([flow], gt, valid))
        assert abs(got - 1.8378770664) <= 1e-10
        assert abs(got - LOG_2PI) <= 1e-12

    def test_nll_equals_expanded_form(self, rng):
        # direct Gaussian negative log density == the expanded expression
        h = w = 5
        gt = rng.normal(size=(h, w, 2))
        u = rng.normal(size=(h, w, 2))
        s = np.exp(rng.normal(size=(h, w, 2)) * 0.5)
        flow = torch.cat([t(u), t(s)], dim=-1)
        valid = rng.uniform(size=(h, w)) < 0.7
        got = float(flow_loss([flow], gt, valid))
        pdf = (1.0 / (2 * np.pi * s[..., 0] * s[..., 1])
               * np.exp(-(gt[..., 0] - u[..., 0]) ** 2 / (2 * s[..., 0] ** 2)
                        - (gt[..., 1] - u[..., 1]) ** 2 / (2 * s[..., 1] ** 2)))
        ref = (-np.log(pdf))[valid].mean()
        assert abs(got - ref) <= 1e-12

    def test_sums_over_layers(self, rng):
        h = w = 4
        gt = rng.normal(size=(h, w, 2))
        flow = torch.cat([t(gt), torch.ones(h, w, 2, dtype=DTYPE)], dim=-1)
        valid = np.ones((h, w), dtype=bool)
        one = float(flow_loss([flow], gt, valid))
        three = float(flow_loss([flow, flow.clone(), flow.clone()], gt, valid))
        assert abs(three - 3.0 * one) <= 1e-12

    def test_no_valid_cells_returns_zero(self):
        flow = torch.ones(2, 2, 4, dtype=DTYPE)
        got = flow_loss([flow], np.zeros((2, 2, 2)), np.zeros((2, 2), dtype=bool))
        assert float(got) == 0.0


class TestTotalLoss:
    def test_weighted_sum(self):
        got = total_loss(t(1.0), t(2.0), t(4.0), 0.25)
        assert abs(float(got) - 4.0) <= 1e-12


class TestTrainingForward:
    def test_report_consistent(self, toy_pair_tensors, toy_pair, toy_weights):
        ia, ib = toy_pair_tensors
        out = training_forward(ia, ib, toy_pair.corr, toy_weights, TOY)
        r = out.report
        assert abs(r.l_total - (r.l_c + r.l_f + TOY.alpha * r.l_flow)) <= 1e-9
        assert math.isfinite(r.l_total)
        assert out.fine_sigma2 is not None and (out.fine_sigma2 > 0).all()

    def test_deterministic(self, toy_pair_tensors, toy_pair, toy_weights):
        ia, ib = toy_pair_tensors
        a = training_forward(ia, ib, toy_pair.corr, toy_weights, TOY)
        b = training_forward(ia, ib, toy_pair.corr, toy_weights, TOY)
        assert float(a.total) == float(b.total)


class TestTrainToy:
    def test_loss_decreases(self, toy_pair):
        wa = init_weights(TOY, seed=0)
        trace, trained = train_toy([toy_pair], wa, TOY, steps=20, lr=0.02)
        assert len(trace) == 20
        assert trace[-1].l_total < trace[0].l_total
        # input weights are untouched; the trained copy differs
        assert torch.equal(wa["match.tau"], init_weights(TOY, seed=0)["match.tau"])
        assert not torch.equal(wa["match.tau"], trained["match.tau"])

    def test_divergence_raises(self, toy_pair):
        wa = init_weights(TOY, seed=0)
        with pytest.raises(RidgeAlignError):
            train_toy([toy_pair], wa, TOY, steps=50, lr=1e6)


def test_save_trace_csv(tmp_path):
    trace = [losses.LossReport(1.0, 2.0, 3.0, 3.75, 0.25)]
    p = tmp_path / "trace.csv"
    losses.save_trace_csv(p, trace)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,L_c,L_f,L_flow,L_total"
    assert lines[1] == "0,1.000000,2.000000,3.000000,3.750000"
