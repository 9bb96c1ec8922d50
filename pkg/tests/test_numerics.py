"""Tensor primitives: shape contracts, stability, degenerate inputs and gradients."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sensorlang.numerics import (
    DimensionError,
    EvaluationError,
    attention,
    attention_reference,
    grad_check,
    l2_normalize,
    layer_norm,
    logsumexp,
    matmul,
    softmax,
)

SEEDS = range(20)


def _rand(seed, *shape):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


class TestMatmul:
    def test_inner_extent_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(torch.zeros(2, 3), torch.zeros(4, 5))

    def test_matches_numpy(self):
        a, b = _rand(0, 3, 4), _rand(1, 4, 2)
        np.testing.assert_allclose(matmul(a, b).numpy(), a.numpy() @ b.numpy(), rtol=1e-12)

    def test_batched_broadcast(self):
        a, b = _rand(0, 5, 3, 4), _rand(1, 4, 2)
        assert matmul(a, b).shape == (5, 3, 2)


class TestSoftmax:
    def test_large_logits_stay_finite(self):
        """Max subtraction keeps [1000, 1000] from overflowing."""
        out = softmax(torch.tensor([1000.0, 1000.0]))
        assert torch.equal(out, torch.tensor([0.5, 0.5]))

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(torch.zeros(3), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, xs, c):
        x = torch.tensor(xs, dtype=torch.float64)
        torch.testing.assert_close(softmax(x + c), softmax(x), atol=1e-12, rtol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-80, 80), min_size=1, max_size=12))
    def test_sums_to_one(self, xs):
        assert abs(float(softmax(torch.tensor(xs, dtype=torch.float64)).sum()) - 1.0) < 1e-12


class TestLogsumexp:
    def test_against_math(self):
        x = [0.3, -1.2, 2.5]
        ref = math.log(sum(math.exp(v) for v in x))
        assert abs(float(logsumexp(torch.tensor(x, dtype=torch.float64))) - ref) < 1e-14

    def test_huge_values(self):
        assert float(logsumexp(torch.tensor([1e4, 1e4], dtype=torch.float64))) == pytest.approx(1e4 + math.log(2))


class TestLayerNorm:
    def test_gain_shape_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(torch.zeros(2, 4), torch.ones(3), torch.zeros(4))

    def test_constant_row_is_finite(self):
        """A zero-variance row normalizes to the bias, not NaN."""
        out = layer_norm(torch.full((1, 6), 3.0), torch.ones(6), torch.full((6,), 0.5))
        assert torch.allclose(out, torch.full((1, 6), 0.5))

    def test_moments(self):
        out = layer_norm(_rand(3, 4, 16), torch.ones(16, dtype=torch.float64), torch.zeros(16, dtype=torch.float64))
        assert torch.allclose(out.mean(-1), torch.zeros(4, dtype=torch.float64), atol=1e-12)
        assert torch.allclose(out.var(-1, unbiased=False), torch.ones(4, dtype=torch.float64), atol=1e-4)


class TestAttention:
    def test_extent_checks(self):
        with pytest.raises(DimensionError):
            attention(torch.zeros(1, 2, 4), torch.zeros(1, 3, 5), torch.zeros(1, 3, 4))
        with pytest.raises(DimensionError):
            attention(torch.zeros(1, 2, 4), torch.zeros(1, 3, 4), torch.zeros(1, 2, 4))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_fused_matches_reference(self, seed):
        q, k, v = _rand(seed, 2, 5, 8), _rand(seed + 100, 2, 7, 8), _rand(seed + 200, 2, 7, 3)
        mask = _rand(seed + 300, 2, 5, 7) > 0
        mask[0, 1] = False                              # one fully masked query row
        torch.testing.assert_close(attention(q, k, v, mask=mask), attention_reference(q, k, v, mask=mask))
        torch.testing.assert_close(attention(q, k, v), attention_reference(q, k, v))

    def test_fully_masked_row_is_zero(self):
        q = k = v = torch.ones(1, 2, 4)
        mask = torch.tensor([[[True, True], [False, False]]])
        out = attention(q, k, v, mask=mask)
        assert torch.all(out[0, 1] == 0) and torch.all(torch.isfinite(out))

    def test_single_key_returns_value(self):
        v = torch.tensor([[[2.0, -1.0]]])
        out = attention(torch.randn(1, 3, 2), torch.randn(1, 1, 2), v)
        assert torch.allclose(out, v.expand(1, 3, 2))


class TestL2Normalize:
    def test_zero_vector_is_flagged(self):
        res = l2_normalize(torch.zeros(2, 3))
        assert torch.all(res.values == 0)
        assert res.degenerate.tolist() == [True, True]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=10).filter(lambda xs: max(map(abs, xs)) > 1e-3))
    def test_unit_norm(self, xs):
        out = l2_normalize(torch.tensor(xs, dtype=torch.float64)).values
        assert abs(float(out.norm()) - 1.0) < 1e-9


class TestGradCheck:
    """Every differentiable primitive against float64 central differences."""

    TOL = 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        b = _rand(seed + 1, 4, 3)
        assert grad_check(lambda a: (matmul(a, b) ** 2).sum(), _rand(seed, 2, 4), 1e-5) < self.TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax(self, seed):
        w = _rand(seed + 1, 3, 6)
        assert grad_check(lambda x: (softmax(x, -1) * w).sum(), _rand(seed, 3, 6), 1e-5) < self.TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_logsumexp(self, seed):
        assert grad_check(lambda x: logsumexp(x, 0).sum(), _rand(seed, 5, 3), 1e-5) < self.TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        g, b, w = _rand(seed + 1, 8), _rand(seed + 2, 8), _rand(seed + 3, 3, 8)
        assert grad_check(lambda x: (layer_norm(x, g, b) * w).sum(), _rand(seed, 3, 8), 1e-5) < self.TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_attention(self, seed):
        k, v = _rand(seed + 1, 2, 5, 4), _rand(seed + 2, 2, 5, 4)
        mask = _rand(seed + 3, 2, 3, 5) > -0.5
        w = _rand(seed + 4, 2, 3, 4)
        assert grad_check(lambda q: (attention(q, k, v, mask=mask) * w).sum(), _rand(seed, 2, 3, 4), 1e-5) < self.TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_l2_normalize(self, seed):
        w = _rand(seed + 1, 4, 6)
        assert grad_check(lambda x: (l2_normalize(x).values * w).sum(), _rand(seed, 4, 6), 1e-5) < self.TOL

    def test_rejects_non_finite(self):
        with pytest.raises(EvaluationError):
            grad_check(lambda x: (x / 0.0).sum(), torch.ones(2))

    def test_rejects_non_scalar(self):
        with pytest.raises(DimensionError):
            grad_check(lambda x: x * 2, torch.ones(2))

    def test_detects_wrong_gradient(self):
        """A function whose backward is deliberately wrong must be caught."""

        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(3, dtype=torch.float64)

        assert grad_check(Bad.apply, torch.tensor([1.0, 2.0, 3.0])) > 0.1
