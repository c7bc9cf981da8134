import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slac import autograd as ag
from slac.autograd import Tensor
from slac.distributions import (DiagGaussian, DistributionError, TanhDiagGaussian, kl_diag_gaussian,
                                log1m_tanh_sq, tanh_log_prob)


def gauss(mean, std):
    return DiagGaussian(Tensor(np.asarray(mean, float)), Tensor(np.asarray(std, float)))


def test_rsample_examples():
    assert gauss([0.0], [1.0]).rsample(np.zeros(1)).data[0] == 0.0
    assert np.array_equal(gauss([1.0, 2.0], [0.5, 2.0]).rsample(np.array([1.0, -1.0])).data, [1.5, 0.0])


def test_rsample_dimension_mismatch():
    with pytest.raises(DistributionError):
        gauss([0.0, 0.0], [1.0, 1.0]).rsample(np.zeros(3))


def test_rsample_monte_carlo_mean():
    rng = np.random.default_rng(0)
    d = gauss(np.full(100_000, 3.0), np.full(100_000, 2.0))
    s = d.rsample(rng.standard_normal(100_000)).data
    assert abs(s.mean() - 3.0) < 3 * 2.0 / math.sqrt(1e5)


def test_rsample_pathwise_gradients():
    rng = np.random.default_rng(3)
    eps = rng.standard_normal(4)
    m0, s0 = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
    w = rng.standard_normal(4)
    f_mean = lambda m: (DiagGaussian(m, Tensor(s0)).rsample(eps) * w).sum()
    f_std = lambda s: (ag.square(DiagGaussian(Tensor(m0), s).rsample(eps)) * w).sum()
    assert ag.grad_check(f_mean, m0) < 1e-6
    assert ag.grad_check(f_std, s0) < 1e-6


def test_log_prob_at_mean():
    d = gauss([0.3, -1.0], [0.5, 2.0])
    expected = -np.sum(np.log([0.5, 2.0]) + 0.5 * math.log(2 * math.pi))
    assert d.log_prob(d.mean.data).item() == pytest.approx(expected, abs=1e-14)


def test_kl_examples():
    assert kl_diag_gaussian(gauss([0.4], [1.3]), gauss([0.4], [1.3])).item() == 0.0
    assert kl_diag_gaussian(gauss([1.0], [1.0]), gauss([0.0], [1.0])).item() == pytest.approx(0.5)
    assert kl_diag_gaussian(gauss([0.0], [2.0]), gauss([0.0], [1.0])).item() == pytest.approx(
        0.8068528194400547, abs=1e-12)


def test_kl_errors():
    with pytest.raises(DistributionError):
        kl_diag_gaussian(gauss([0.0], [1.0]), gauss([0.0, 0.0], [1.0, 1.0]))
    with pytest.raises(DistributionError):
        kl_diag_gaussian(gauss([0.0], [0.0]), gauss([0.0], [1.0]))


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3)),
                min_size=1, max_size=4))
@settings(max_examples=100, deadline=None)
def test_kl_nonnegative_zero_iff_equal(params):
    mq, sq, mp, sp = (np.array(c) for c in zip(*params))
    kl = kl_diag_gaussian(gauss(mq, sq), gauss(mp, sp)).item()
    assert kl >= -1e-12
    if np.allclose(mq, mp) and np.allclose(sq, sp):
        assert kl < 1e-9
    assert kl_diag_gaussian(gauss(mq, sq), gauss(mq, sq)).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_gradcheck_all_parameters():
    rng = np.random.default_rng(2)
    vals = [rng.standard_normal(3), rng.uniform(0.5, 2, 3), rng.standard_normal(3), rng.uniform(0.5, 2, 3)]
    for k in range(4):
        def f(x, k=k):
            args = [x if j == k else Tensor(v) for j, v in enumerate(vals)]
            return kl_diag_gaussian(DiagGaussian(args[0], args[1]), DiagGaussian(args[2], args[3])).sum()
        assert ag.grad_check(f, vals[k]) < 1e-7


def tanh_dist(mu, sigma):
    return TanhDiagGaussian(gauss(mu, sigma))


def test_tanh_log_prob_examples():
    d = tanh_dist([0.0], [1.0])
    assert d.log_prob(pre=Tensor([0.0])).item() == pytest.approx(-0.9189385, abs=1e-7)
    assert tanh_log_prob(d, action=np.array([0.0])).item() == pytest.approx(-0.9189385, abs=1e-7)
    assert d.log_prob(pre=Tensor([1.0])).item() == pytest.approx(-0.5513764, abs=1e-6)
    assert d.log_prob(pre=Tensor([1.0])).item() == pytest.approx(
        -0.5 - 0.5 * math.log(2 * math.pi) - math.log(1 - math.tanh(1.0) ** 2), abs=1e-14)
    assert d.log_prob(pre=Tensor([1.0])).item() == pytest.approx(-1.4189385 - math.log(0.4199743), abs=1e-6)


def test_tanh_log_prob_factorizes():
    mu, sigma, pre = np.array([0.2, -0.5]), np.array([0.7, 1.4]), np.array([0.3, -2.0])
    joint = tanh_dist(mu, sigma).log_prob(pre=Tensor(pre)).item()
    singles = sum(tanh_dist(mu[i:i + 1], sigma[i:i + 1]).log_prob(pre=Tensor(pre[i:i + 1])).item() for i in range(2))
    assert joint == pytest.approx(singles, abs=1e-13)


def test_tanh_rejects_out_of_support():
    d = tanh_dist([0.0], [1.0])
    with pytest.raises(DistributionError):
        d.log_prob(action=np.array([1.0]))
    with pytest.raises(DistributionError):
        d.log_prob()


def test_stable_log1m_tanh_sq_large_values():
    u = np.array([-30.0, -5.0, 0.0, 5.0, 30.0])
    stable = log1m_tanh_sq(Tensor(u)).data
    assert np.all(np.isfinite(stable))
    # reference via log(4) - 2|u| - 2 log1p(e^{-2|u|})
    ref = math.log(4) - 2 * np.abs(u) - 2 * np.log1p(np.exp(-2 * np.abs(u)))
    assert np.allclose(stable, ref, atol=1e-12)


def test_tanh_samples_inside_support_and_mode():
    rng = np.random.default_rng(0)
    d = tanh_dist(np.zeros(1000), np.full(1000, 3.0))
    a, pre = d.rsample(rng.standard_normal(1000))
    assert np.all(np.abs(a.data) < 1.0)
    assert np.array_equal(a.data, np.tanh(pre.data))
    assert d.mode().data[0] == 0.0


def test_tanh_density_integrates_to_one():
    from scipy import integrate
    d = tanh_dist([0.4], [0.8])
    f = lambda a: math.exp(d.log_prob(action=np.array([a])).item())
    total, _ = integrate.quad(f, -1 + 1e-15, 1 - 1e-15, limit=200)
    assert abs(total - 1.0) < 1e-3
