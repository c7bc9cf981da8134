import math

import numpy as np
import pytest
from scipy import stats

from slac.envs import LGSSEnv, LGSSParams, lqr_params, oracle_lgss_params
from slac.oracle import (KalmanModel, OracleError, hard_value_iteration, kalman_filter, kalman_loglik,
                         random_policy_return, soft_state_value, tabular_soft_value_iteration)


def scalar_model(A=1.0, B=0.0, C=1.0, Q=1.0, R=1.0, S0=1.0):
    return KalmanModel(A, B, C, Q, R, S0)


def random_model(rng, n=2, p=2, m=1):
    A = 0.9 * rng.standard_normal((n, n)) / math.sqrt(n)
    L = rng.standard_normal((n, n))
    M = rng.standard_normal((p, p))
    return KalmanModel(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)), 0.1 * np.eye(n) + 0.1 * L @ L.T,
                       0.2 * np.eye(p) + 0.1 * M @ M.T, np.eye(n))


def dense_loglik(model, ys, acts):
    """Log density of the stacked observations under the full joint Gaussian."""
    T, n = len(ys), model.A.shape[0]
    means = [np.zeros(n)]
    for t in range(1, T):
        means.append(model.A @ means[-1] + model.B @ acts[t - 1])
    # Cov(s_j, s_i) = A^{j-i} Var(s_i) for j >= i
    var = [model.Sigma0]
    for t in range(1, T):
        var.append(model.A @ var[-1] @ model.A.T + model.Q)
    p = model.C.shape[0]
    cov = np.zeros((T * p, T * p))
    for i in range(T):
        for j in range(i, T):
            Sij = np.linalg.matrix_power(model.A, j - i) @ var[i]
            block = model.C @ Sij.T @ model.C.T
            if i == j:
                block = block + model.R
            cov[i * p:(i + 1) * p, j * p:(j + 1) * p] = block
            cov[j * p:(j + 1) * p, i * p:(i + 1) * p] = block.T
    mu = np.concatenate([model.C @ m for m in means])
    return stats.multivariate_normal(mu, cov).logpdf(np.concatenate(ys))


def test_single_observation_marginal():
    assert kalman_loglik(scalar_model(), np.array([[0.0]])) == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-7)
    assert kalman_loglik(scalar_model(), np.array([[0.0]])) == pytest.approx(-1.2655121, abs=1e-7)


def test_consistent_trajectory_beats_perturbed_in_low_noise_limit():
    model = scalar_model(A=0.9, Q=1e-8, R=1e-8)
    ys = np.array([[1.0], [0.9], [0.81]])
    base = kalman_loglik(model, ys)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert kalman_loglik(model, ys + 1e-3 * rng.standard_normal(ys.shape)) < base


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_joint_gaussian(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    ys = list(rng.standard_normal((3, 2)))
    acts = rng.standard_normal((2, 1))
    assert kalman_loglik(model, np.array(ys), acts) == pytest.approx(dense_loglik(model, ys, acts), abs=1e-9)


def test_no_observations_returns_prior():
    model = random_model(np.random.default_rng(1))
    res = kalman_filter(model, np.zeros((0, 2)))
    assert res.loglik == 0.0
    assert np.array_equal(res.final_cov, model.Sigma0)


def test_huge_observation_noise_update_has_no_effect():
    rng = np.random.default_rng(2)
    base = random_model(rng)
    model = KalmanModel(base.A, base.B, base.C, base.Q, 1e12 * np.eye(2), base.Sigma0)
    ys = rng.standard_normal((4, 2))
    acts = rng.standard_normal((3, 1))
    res = kalman_filter(model, ys, acts)
    assert np.allclose(res.means, res.pred_means, atol=1e-6)
    assert np.allclose(res.covs, res.pred_covs, atol=1e-6)


def test_matches_particle_filter_1d():
    model = scalar_model(A=0.8, Q=0.5, R=0.3, S0=1.0)
    rng = np.random.default_rng(0)
    ys = np.array([[0.4], [-0.2], [0.9]])
    res = kalman_filter(model, ys)
    n = 1_000_000
    particles = rng.normal(0.0, 1.0, n)
    for t in range(3):
        if t:
            particles = 0.8 * particles + rng.normal(0.0, math.sqrt(0.5), n)
        logw = -0.5 * (ys[t, 0] - particles) ** 2 / 0.3
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mean = float(w @ particles)
        var = float(w @ (particles - mean) ** 2)
        ess = 1.0 / np.sum(w ** 2)
        se = math.sqrt(var / ess)
        assert abs(mean - res.means[t, 0]) < 3 * se
        particles = particles[rng.choice(n, n, p=w)]


def test_similarity_invariance():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    T = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    ys = rng.standard_normal((6, 2))
    acts = rng.standard_normal((5, 1))
    assert kalman_loglik(model.similarity(T), ys, acts) == pytest.approx(kalman_loglik(model, ys, acts), abs=1e-8)


def test_covariances_stay_psd_and_symmetric():
    rng = np.random.default_rng(4)
    res = kalman_filter(random_model(rng), rng.standard_normal((50, 2)), rng.standard_normal((49, 1)))
    for P in res.covs:
        assert np.array_equal(P, P.T)
        assert np.min(np.linalg.eigvalsh(P)) >= 0


def test_errors():
    with pytest.raises(OracleError, match="semidefinite"):
        scalar_model(Q=-1.0)
    with pytest.raises(OracleError, match="singular"):
        kalman_loglik(KalmanModel(1.0, 0.0, 1.0, 0.0, 0.0, 0.0), np.array([[1.0]]))
    with pytest.raises(OracleError, match="actions"):
        kalman_loglik(random_model(np.random.default_rng(0)), np.zeros((3, 2)), np.zeros((1, 1)))


def test_from_params_matches_env_rollout_with_repeat():
    p = oracle_lgss_params()
    km = KalmanModel.from_params(p, action_repeat=3)
    env = LGSSEnv(LGSSParams(p.A, p.B, p.C, np.zeros((2, 2)), np.zeros((2, 2)), p.S, p.T, p.Sigma0,
                             p.action_scale), action_repeat=3, seed=0)
    env.reset()
    s = env.state.copy()
    a = np.array([0.7])
    env.step(a)
    assert np.allclose(env.state, km.A @ s + km.B @ a, atol=1e-14)


def test_soft_vi_gamma_zero_is_reward():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(3), size=(3, 2))
    R = rng.standard_normal((3, 2))
    assert np.array_equal(tabular_soft_value_iteration(P, R, alpha=0.5, gamma=0.0), R)


def test_soft_vi_small_alpha_matches_hard():
    rng = np.random.default_rng(1)
    P = rng.dirichlet(np.ones(4), size=(4, 3))
    R = rng.uniform(-1, 1, (4, 3))
    soft = tabular_soft_value_iteration(P, R, alpha=1e-6, gamma=0.9)
    assert np.max(np.abs(soft - hard_value_iteration(P, R, 0.9))) < 1e-4


def test_soft_vi_single_state_action_geometric():
    Q = tabular_soft_value_iteration(np.ones((1, 1, 1)), np.ones((1, 1)), alpha=0.3, gamma=0.9)
    assert Q[0, 0] == pytest.approx(10.0, abs=1e-8)


def test_soft_vi_fixed_point_pointwise():
    rng = np.random.default_rng(2)
    P = rng.dirichlet(np.ones(4), size=(4, 2))
    R = rng.uniform(-1, 1, (4, 2))
    Q = tabular_soft_value_iteration(P, R, alpha=0.2, gamma=0.9)
    assert np.max(np.abs(Q - (R + 0.9 * P @ soft_state_value(Q, 0.2)))) < 1e-9


def test_soft_vi_guards():
    with pytest.raises(OracleError):
        tabular_soft_value_iteration(np.ones((101, 1, 101)) / 101, np.zeros((101, 1)), 0.1, 0.9)
    with pytest.raises(OracleError):
        tabular_soft_value_iteration(np.ones((2, 2, 3)), np.zeros((2, 2)), 0.1, 0.9)


def test_random_policy_return_matches_monte_carlo():
    p = lqr_params()
    expected = random_policy_return(p, action_repeat=2, horizon=20, action_var=1.0 / 3.0)
    env = LGSSEnv(p, max_episode_steps=20, action_repeat=2, seed=0)
    rng = np.random.default_rng(0)
    returns = []
    for _ in range(3000):
        env.reset()
        total, done = 0.0, False
        while not done:
            res = env.step(rng.uniform(-1, 1, 1))
            total += res.reward
            done = res.done
        returns.append(total)
    returns = np.array(returns)
    assert abs(returns.mean() - expected) < 4 * returns.std() / math.sqrt(len(returns))
