"""Similarity, InfoNCE and the weighted joint objective."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sensorlang.alignment import LossConfig, info_nce, joint_loss, similarity
from sensorlang.numerics import DimensionError, grad_check


def info_nce_oracle(sim, labels, tau):
    """Direct float64 evaluation, one row at a time with math.fsum."""
    rows = []
    for s, y in zip(np.asarray(sim, dtype=np.float64), labels):
        z = s / tau
        m = z.max()
        rows.append(m + math.log(math.fsum(math.exp(v - m) for v in z)) - z[y])
    return math.fsum(rows) / len(rows)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.tau, cfg.alpha, cfg.beta, cfg.gamma, cfg.normalize) == (0.07, 0.4, 1.3, 1.3, True)

    @pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"tau": -1.0}, {"alpha": -0.1}, {"alpha": 0, "beta": 0, "gamma": 0}])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)


class TestSimilarity:
    def test_identical_and_orthogonal(self):
        e = torch.eye(768)[:2]
        s = similarity(e, e, LossConfig())
        assert torch.equal(s, torch.eye(2))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            similarity(torch.zeros(2, 768), torch.zeros(3, 512), LossConfig())

    def test_scale_absorbed(self):
        g = torch.Generator().manual_seed(0)
        x, t = torch.randn(4, 768, generator=g), torch.randn(6, 768, generator=g)
        cfg = LossConfig()
        torch.testing.assert_close(similarity(10 * x, t, cfg), similarity(x, t, cfg), atol=1e-5, rtol=0)

    def test_raw_dot_when_not_normalized(self):
        x, t = torch.full((1, 768), 2.0), torch.full((1, 768), 3.0)
        assert float(similarity(x, t, LossConfig(normalize=False))) == 6.0 * 768

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_cosine_bounds(self, seed):
        g = torch.Generator().manual_seed(seed)
        s = similarity(torch.randn(5, 768, generator=g) * 100, torch.randn(7, 768, generator=g), LossConfig())
        assert float(s.abs().max()) <= 1 + 1e-5


class TestInfoNce:
    def test_uniform(self):
        loss = info_nce(torch.zeros(3, 27), torch.tensor([0, 5, 26]), LossConfig())
        assert abs(float(loss) - math.log(27)) < 1e-6

    def test_two_class_analytic(self):
        loss = info_nce(torch.tensor([[1.0, -1.0]]), torch.tensor([0]), LossConfig(tau=1.0))
        assert abs(float(loss) - math.log1p(math.exp(-2))) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_against_oracle(self, seed):
        g = torch.Generator().manual_seed(seed)
        sim = torch.rand(4, 5, generator=g, dtype=torch.float64) * 2 - 1
        labels = torch.randint(0, 5, (4,), generator=g)
        got = float(info_nce(sim, labels, LossConfig(tau=0.07)))
        assert abs(got - info_nce_oracle(sim.numpy(), labels.tolist(), 0.07)) < 1e-6

    def test_invalid_label(self):
        with pytest.raises(IndexError):
            info_nce(torch.zeros(2, 3), torch.tensor([0, 3]), LossConfig())
        with pytest.raises(DimensionError):
            info_nce(torch.zeros(2, 3), torch.tensor([0]), LossConfig())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
    def test_row_shift_invariance(self, seed, c):
        g = torch.Generator().manual_seed(seed)
        sim = torch.rand(4, 6, generator=g, dtype=torch.float64) * 2 - 1
        labels = torch.randint(0, 6, (4,), generator=g)
        shift = torch.zeros(4, 1, dtype=torch.float64)
        shift[seed % 4] = c
        cfg = LossConfig()
        assert abs(float(info_nce(sim + shift, labels, cfg)) - float(info_nce(sim, labels, cfg))) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_negative(self, seed):
        g = torch.Generator().manual_seed(seed)
        sim = torch.rand(3, 8, generator=g) * 2 - 1
        assert float(info_nce(sim, torch.randint(0, 8, (3,), generator=g), LossConfig())) >= 0

    @pytest.mark.parametrize("seed", range(5))
    def test_positive_rescale_of_sensor(self, seed):
        g = torch.Generator().manual_seed(seed)
        x, t = torch.randn(4, 768, generator=g), torch.randn(6, 768, generator=g)
        labels = torch.tensor([0, 1, 2, 5])
        scale = torch.rand(4, 1, generator=g) * 50 + 0.01
        cfg = LossConfig()
        a = info_nce(similarity(x, t, cfg), labels, cfg)
        b = info_nce(similarity(x * scale, t, cfg), labels, cfg)
        assert abs(float(a) - float(b)) < 1e-5

    def test_temperature_monotonicity(self):
        leading = torch.tensor([[0.9, 0.2, 0.1]])
        trailing = torch.tensor([[0.1, 0.9, 0.2]])
        y = torch.tensor([0])
        hot, cold = LossConfig(tau=1.0), LossConfig(tau=0.1)
        assert float(info_nce(leading, y, cold)) < float(info_nce(leading, y, hot))
        assert float(info_nce(trailing, y, cold)) > float(info_nce(trailing, y, hot))

    @pytest.mark.parametrize("seed", range(20))
    def test_grad_through_cosine(self, seed):
        g = torch.Generator().manual_seed(seed)
        t = torch.randn(5, 16, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 5, (3,), generator=g)
        cfg = LossConfig(tau=0.5)
        fn = lambda x: info_nce(similarity(x, t, cfg), labels, cfg)
        assert grad_check(fn, torch.randn(3, 16, generator=g, dtype=torch.float64), 1e-5) < 1e-4


class TestJointLoss:
    def test_unit_weights(self):
        cfg = LossConfig(alpha=1, beta=1, gamma=1)
        assert float(joint_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), cfg)) == 6.0

    def test_default_weights_on_uniform_losses(self):
        l0 = torch.tensor(math.log(27), dtype=torch.float64)
        got = float(joint_loss(l0, l0, l0, LossConfig()))
        assert abs(got - 3.0 * math.log(27)) < 1e-9

    def test_gradient_ratio(self):
        ls = [torch.tensor(1.0, requires_grad=True) for _ in range(3)]
        joint_loss(*ls, LossConfig()).backward()
        assert [round(float(v.grad), 6) for v in ls] == [0.4, 1.3, 1.3]

    def test_zero_weights_isolate_branch(self):
        a = torch.nn.Linear(2, 1)
        b = torch.nn.Linear(2, 1)
        x = torch.ones(1, 2)
        joint_loss(a(x).sum(), b(x).sum(), b(x).sum(), LossConfig(alpha=1, beta=0, gamma=0)).backward()
        assert a.weight.grad.abs().sum() > 0
        assert torch.all(b.weight.grad == 0)
