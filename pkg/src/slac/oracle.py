"""Exact references used by tests and acceptance runs.

* Kalman filtering and the prediction-error decomposition of the exact
  log-likelihood for linear-Gaussian systems.
* Tabular soft value iteration.
* Closed-form expected return of an i.i.d. random policy on an LGSS task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .envs import LGSSEnv, LGSSParams


class OracleError(ValueError):
    pass


@dataclass
class KalmanModel:
    """Per-agent-step system: s' = A s + B a + w (w~N(0,Q)), y = C s + v (v~N(0,R)), s1~N(0,Sigma0)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "Q", "R", "Sigma0"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("Q", "R", "Sigma0"):
            M = getattr(self, name)
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-10:
                raise OracleError(f"{name} is not positive semidefinite")

    @classmethod
    def from_params(cls, p: LGSSParams, action_repeat: int = 1) -> "KalmanModel":
        """Collapse ``action_repeat`` inner steps (same action) into one step.

        Actions are taken in the agent's [-1, 1] units, so B absorbs the scale.
        """
        n = p.state_dim
        A_eff = np.eye(n)
        B_eff = np.zeros_like(p.B)
        Q_eff = np.zeros((n, n))
        for _ in range(action_repeat):
            A_eff = p.A @ A_eff
            B_eff = p.A @ B_eff + p.B
            Q_eff = p.A @ Q_eff @ p.A.T + p.Q
        return cls(A_eff, B_eff * p.action_scale, p.C, Q_eff, p.R, p.Sigma0)

    @classmethod
    def from_env(cls, env: LGSSEnv) -> "KalmanModel":
        return cls.from_params(env.params, env.spec.action_repeat)

    def similarity(self, T: np.ndarray) -> "KalmanModel":
        """Same observation process under the state change s -> T s."""
        Ti = np.linalg.inv(T)
        return KalmanModel(T @ self.A @ Ti, T @ self.B, self.C @ Ti, T @ self.Q @ T.T, self.R,
                           T @ self.Sigma0 @ T.T)


@dataclass
class KalmanResult:
    means: np.ndarray        # (T, n) filtered
    covs: np.ndarray         # (T, n, n)
    pred_means: np.ndarray   # (T, n) prior before each observation
    pred_covs: np.ndarray
    loglik: float
    final_mean: np.ndarray
    final_cov: np.ndarray


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def kalman_filter(model: KalmanModel, observations, actions=None) -> KalmanResult:
    """Predict/update recursion with Joseph-form covariance updates.

    ``observations`` is (T, p); ``actions`` is (T-1, m) with actions[t]
    applied between observations t and t+1.
    """
    ys = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if np.asarray(observations).size == 0:
        ys = np.zeros((0, model.C.shape[0]))
    T = ys.shape[0]
    m_dim = model.B.shape[1]
    acts = np.zeros((max(T - 1, 0), m_dim)) if actions is None else np.asarray(actions, dtype=np.float64).reshape(-1, m_dim)
    if T and acts.shape[0] < T - 1:
        raise OracleError(f"need {T - 1} actions for {T} observations, got {acts.shape[0]}")
    if T and ys.shape[1] != model.C.shape[0]:
        raise OracleError(f"observation dim {ys.shape[1]} != {model.C.shape[0]}")
    n = model.A.shape[0]
    mean = np.zeros(n)
    cov = model.Sigma0.copy()
    out_m, out_P, pr_m, pr_P = [], [], [], []
    ll = 0.0
    I = np.eye(n)
    for t in range(T):
        if t > 0:
            mean = model.A @ mean + model.B @ acts[t - 1]
            cov = _sym(model.A @ cov @ model.A.T + model.Q)
        pr_m.append(mean)
        pr_P.append(cov)
        innov = ys[t] - model.C @ mean
        S = _sym(model.C @ cov @ model.C.T + model.R)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise OracleError(f"singular innovation covariance at step {t}: eigenvalues {np.linalg.eigvalsh(S)}") from None
        sol = np.linalg.solve(L, innov)
        ll += -0.5 * float(sol @ sol) - float(np.sum(np.log(np.diag(L)))) - 0.5 * len(innov) * math.log(2 * math.pi)
        K = np.linalg.solve(S, model.C @ cov).T
        mean = mean + K @ innov
        IKC = I - K @ model.C
        cov = _sym(IKC @ cov @ IKC.T + K @ model.R @ K.T)
        out_m.append(mean)
        out_P.append(cov)
    empty = np.zeros((0, n))
    return KalmanResult(
        means=np.array(out_m) if T else empty,
        covs=np.array(out_P) if T else np.zeros((0, n, n)),
        pred_means=np.array(pr_m) if T else empty,
        pred_covs=np.array(pr_P) if T else np.zeros((0, n, n)),
        loglik=ll,
        final_mean=mean,
        final_cov=cov,
    )


def kalman_loglik(model: KalmanModel, observations, actions=None) -> float:
    """Exact log p(y_1:T | a_1:T-1)."""
    return kalman_filter(model, observations, actions).loglik


def tabular_soft_value_iteration(P: np.ndarray, R: np.ndarray, alpha: float, gamma: float,
                                 tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of Q = R + gamma * P V with V = alpha * logsumexp(Q / alpha) over actions.

    P: (S, A, S) transition probabilities; R: (S, A).
    """
    P = np.asarray(P, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    S, A = R.shape
    if S > 100 or A > 100:
        raise OracleError("tabular solver limited to 100 states/actions")
    if P.shape != (S, A, S):
        raise OracleError(f"transition tensor shape {P.shape} != {(S, A, S)}")
    Q = np.zeros((S, A))
    for _ in range(max_iter):
        V = soft_state_value(Q, alpha)
        Q_new = R + gamma * P @ V
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
        if not np.all(np.isfinite(Q)):
            break
    raise OracleError("soft value iteration did not converge")


def soft_state_value(Q: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return Q.max(axis=1)
    return alpha * logsumexp(Q / alpha, axis=1)


def hard_value_iteration(P: np.ndarray, R: np.ndarray, gamma: float, tol: float = 1e-12) -> np.ndarray:
    Q = np.zeros_like(R, dtype=np.float64)
    while True:
        Q_new = R + gamma * P @ Q.max(axis=1)
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new


def tanh_gaussian_second_moment(scale: float) -> float:
    """E[tanh(u)^2] for u ~ N(0, scale^2)."""
    if scale == 0:
        return 0.0
    f = lambda u: math.tanh(u) ** 2 * math.exp(-0.5 * (u / scale) ** 2) / (scale * math.sqrt(2 * math.pi))
    val, _ = integrate.quad(f, -12 * scale, 12 * scale, limit=200)
    return val


def random_policy_return(params: LGSSParams, action_repeat: int, horizon: int, action_var: float) -> float:
    """Expected undiscounted return of i.i.d. zero-mean actions with covariance action_var * I
    (agent units), propagated exactly through the quadratic cost.
    """
    n, m = params.state_dim, params.action_dim
    A, B = params.A, params.B * params.action_scale
    F = np.block([[A, B], [np.zeros((m, n)), np.eye(m)]])
    W = np.zeros((n + m, n + m))
    W[:n, :n] = params.Q
    u_var = action_var * params.action_scale ** 2
    P = np.zeros((n + m, n + m))
    P[:n, :n] = params.Sigma0
    total = 0.0
    for _ in range(horizon):
        P[:n, n:] = 0.0
        P[n:, :n] = 0.0
        P[n:, n:] = action_var * np.eye(m)
        for _ in range(action_repeat):
            total -= float(np.trace(params.S @ P[:n, :n])) + u_var * float(np.trace(params.T))
            P = F @ P @ F.T + W
    return total
