import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ridgealign import numkit
from ridgealign.errors import DimensionError
from ridgealign.numkit import DTYPE


def t(a):
    return torch.as_tensor(np.asarray(a), dtype=DTYPE)


class TestMatmul:
    def test_matches_numpy(self, rng):
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 9))
        got = numkit.matmul(t(a), t(b)).numpy()
        assert np.allclose(got, a @ b, atol=1e-12, rtol=0)

    def test_rejects_bad_ranks(self):
        with pytest.raises(DimensionError):
            numkit.matmul(t(np.zeros(3)), t(np.zeros((3, 3))))

    def test_rejects_inner_mismatch(self):
        with pytest.raises(DimensionError):
            numkit.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 2))))


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        x = t(rng.normal(scale=30, size=(12, 9)))
        s = numkit.softmax_rows(x).sum(dim=-1)
        assert float((s - 1.0).abs().max()) <= 1e-12

    def test_shift_invariance(self, rng):
        x = t(rng.normal(size=(4, 6)))
        shifted = numkit.softmax_rows(x + 123.0)
        assert float((shifted - numkit.softmax_rows(x)).abs().max()) <= 1e-12

    def test_extreme_values_stay_finite(self):
        x = t([[1e4, -1e4, 0.0]])
        s = numkit.softmax_rows(x)
        assert torch.isfinite(s).all()
        assert abs(float(s[0, 0]) - 1.0) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
                    min_size=1, max_size=5).filter(
        lambda rows: len({len(r) for r in rows}) == 1))
    def test_matches_reference(self, rows):
        x = np.asarray(rows)
        ref = np.exp(x - x.max(-1, keepdims=True))
        ref = ref / ref.sum(-1, keepdims=True)
        got = numkit.softmax_rows(t(x)).numpy()
        assert np.allclose(got, ref, atol=1e-12, rtol=0)


class TestBilinearSample:
    def test_integer_grid_exact(self, rng):
        src = t(rng.normal(size=(6, 5, 2)))
        pts = t([[2.0, 3.0], [0.0, 0.0], [4.0, 5.0]])
        got = numkit.bilinear_sample(src, pts)
        ref = torch.stack([src[3, 2], src[0, 0], src[5, 4]])
        assert float((got - ref).abs().max()) == 0.0

    def test_reproduces_bilinear_functions(self):
        ys, xs = np.meshgrid(np.arange(8), np.arange(9), indexing="ij")
        field = 2.0 * xs + 3.0 * ys - 1.0
        src = t(field[..., None])
        pts = t([[0.25, 0.75], [3.5, 6.125], [7.0, 0.0]])
        got = numkit.bilinear_sample(src, pts)[:, 0].numpy()
        ref = 2.0 * pts.numpy()[:, 0] + 3.0 * pts.numpy()[:, 1] - 1.0
        assert np.allclose(got, ref, atol=1e-12, rtol=0)

    def test_out_of_bounds_clamps_to_border(self, rng):
        src = t(rng.normal(size=(4, 4, 1)))
        pts = t([[-5.0, -5.0], [100.0, 100.0]])
        got = numkit.bilinear_sample(src, pts)
        assert float(got[0, 0]) == float(src[0, 0, 0])
        assert float(got[1, 0]) == float(src[3, 3, 0])

    def test_gradient_matches_finite_difference(self, rng):
        src = t(rng.normal(size=(6, 6, 2)))
        base = t(rng.uniform(0.3, 4.7, size=(10, 2)))
        direction = t(rng.normal(size=(10, 2)))
        p = torch.zeros((), dtype=DTYPE, requires_grad=True)

        def f(pv):
            out = numkit.bilinear_sample(src, base + pv * direction)
            return (out * out).sum()

        f(p).backward()
        eps = 1e-6
        fd = (float(f(torch.tensor(eps, dtype=DTYPE)))
              - float(f(torch.tensor(-eps, dtype=DTYPE)))) / (2 * eps)
        assert abs(float(p.grad) - fd) <= 1e-6 * max(1.0, abs(fd))

    def test_rejects_bad_rank(self):
        with pytest.raises(DimensionError):
            numkit.bilinear_sample(t(np.zeros((4, 4))), t(np.zeros((1, 2))))


class TestConv2d:
    def test_matches_naive_loop(self, rng):
        x = rng.normal(size=(5, 6, 2))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = numkit.conv2d(t(x), t(k), t(b), pad=1).numpy()
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        ref = np.zeros((5, 6, 3))
        for i in range(5):
            for j in range(6):
                patch = xp[i:i + 3, j:j + 3]          # [3,3,cin]
                for co in range(3):
                    ref[i, j, co] = (patch * k[co].transpose(1, 2, 0)).sum() + b[co]
        assert np.allclose(got, ref, atol=1e-12, rtol=0)

    def test_stride_two_shape(self, rng):
        x = t(rng.normal(size=(8, 8, 1)))
        k = t(rng.normal(size=(4, 1, 3, 3)))
        y = numkit.conv2d(x, k, stride=2, pad=1)
        assert tuple(y.shape) == (4, 4, 4)

    def test_rejects_channel_mismatch(self):
        with pytest.raises(DimensionError):
            numkit.conv2d(t(np.zeros((4, 4, 2))), t(np.zeros((1, 3, 3, 3))))


class TestAvgPool:
    def test_small_oracle(self):
        x = t(np.arange(16, dtype=float).reshape(4, 4, 1))
        y = numkit.avgpool2d(x, 2)[:, :, 0].numpy()
        ref = np.array([[2.5, 4.5], [10.5, 12.5]])
        assert np.allclose(y, ref, atol=0, rtol=0)

    def test_rejects_non_divisible(self):
        with pytest.raises(DimensionError):
            numkit.avgpool2d(t(np.zeros((5, 4, 1))), 2)


class TestUpsample:
    def test_doubles_dims(self, rng):
        y = numkit.upsample2x(t(rng.normal(size=(3, 5, 2))))
        assert tuple(y.shape) == (6, 10, 2)

    def test_constant_preserved(self):
        y = numkit.upsample2x(t(np.full((4, 4, 1), 3.25)))
        assert float((y - 3.25).abs().max()) <= 1e-12


class TestLayerNorm:
    def test_normalizes_channels(self, rng):
        x = t(rng.normal(size=(3, 4, 8)))
        g = torch.ones(8, dtype=DTYPE)
        b = torch.zeros(8, dtype=DTYPE)
        y = numkit.layer_norm(x, g, b)
        assert float(y.mean(dim=-1).abs().max()) <= 1e-12
        assert abs(float(y.var(dim=-1, unbiased=False).mean()) - 1.0) <= 1e-5

    def test_gain_bias_applied(self, rng):
        x = t(rng.normal(size=(2, 2, 4)))
        g = t([2.0, 2.0, 2.0, 2.0])
        b = t([1.0, 1.0, 1.0, 1.0])
        base = numkit.layer_norm(x, torch.ones(4, dtype=DTYPE),
                                 torch.zeros(4, dtype=DTYPE))
        y = numkit.layer_norm(x, g, b)
        assert float((y - (2.0 * base + 1.0)).abs().max()) <= 1e-12

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionError):
            numkit.layer_norm(t(np.zeros((2, 2, 4))), torch.ones(3, dtype=DTYPE),
                              torch.zeros(3, dtype=DTYPE))


def test_default_dtype_is_float64():
    assert numkit.as_tensor([1.0]).dtype == torch.float64
