"""Desk-scale environments sharing a reset/step interface with action repeat.

Actions are always in [-1, 1]^action_dim and rescaled internally. ``step``
returns a :class:`StepResult`; ``terminal`` blocks bootstrapping (failure),
while ``truncated`` marks a time limit that the critic bootstraps through.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any

import numpy as np


class EnvError(RuntimeError):
    pass


@dataclass
class EnvSpec:
    observation_shape: tuple[int, ...]
    action_dim: int
    max_episode_steps: int
    action_repeat: int = 1
    terminates_on_failure: bool = False

    def __post_init__(self):
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be a positive integer")

    @property
    def observation_dim(self) -> int:
        return int(np.prod(self.observation_shape))


@dataclass
class StepResult:
    reward: float
    observation: np.ndarray
    terminal: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated


class Env:
    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self._t = 0
        self._done = True

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        if rng is not None:
            self.rng = rng
        self._t = 0
        self._done = False
        self._reset_state()
        return self._observe()

    def step(self, action) -> StepResult:
        if self._done:
            raise EnvError("step() called on a finished episode; call reset()")
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if np.any(np.abs(a) > 1.0 + 1e-12) or not np.all(np.isfinite(a)):
            raise EnvError(f"action {a} outside [-1, 1]")
        total = 0.0
        failed = False
        for _ in range(self.spec.action_repeat):
            total += self._inner_step(a)
            if self.spec.terminates_on_failure and self._failed():
                failed = True
                break
        self._t += 1
        truncated = not failed and self._t >= self.spec.max_episode_steps
        self._done = failed or truncated
        return StepResult(float(total), self._observe(), failed, truncated)

    # state capture for resumable runs
    def get_state(self) -> dict[str, Any]:
        return {"t": self._t, "done": self._done, "rng": copy.deepcopy(self.rng.bit_generator.state),
                "state": self._get_sim_state()}

    def set_state(self, state: dict[str, Any]) -> None:
        self._t = int(state["t"])
        self._done = bool(state["done"])
        self.rng.bit_generator.state = copy.deepcopy(state["rng"])
        self._set_sim_state(state["state"])

    # subclass hooks
    def _reset_state(self) -> None:
        raise NotImplementedError

    def _inner_step(self, a: np.ndarray) -> float:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError

    def _failed(self) -> bool:
        return False

    def _get_sim_state(self):
        raise NotImplementedError

    def _set_sim_state(self, s) -> None:
        raise NotImplementedError


def _mat(x, n: int, m: int | None = None) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if m is not None and arr.shape != (n, m):
        raise ValueError(f"expected shape {(n, m)}, got {arr.shape}")
    return arr


@dataclass
class LGSSParams:
    """x' = A x + B u + w,  y = C x + v,  r = -x'Sx - u'Tu per inner step."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    T: np.ndarray
    Sigma0: np.ndarray
    action_scale: float = 1.0

    def __post_init__(self):
        self.A = _mat(self.A, 0)
        n = self.A.shape[0]
        self.B = _mat(self.B, 0)
        self.C = _mat(self.C, 0)
        m = self.B.shape[1]
        p = self.C.shape[0]
        self.B = _mat(self.B, n, m)
        self.C = _mat(self.C, p, n)
        self.Q = _mat(self.Q, n, n)
        self.R = _mat(self.R, p, p)
        self.S = _mat(self.S, n, n)
        self.T = _mat(self.T, m, m)
        self.Sigma0 = _mat(self.Sigma0, n, n)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]


def _psd_factor(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if np.any(w < -1e-10):
        raise ValueError("covariance is not positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


class LGSSEnv(Env):
    """Linear-Gaussian state-space system; exactly what the Kalman oracle assumes."""

    def __init__(self, params: LGSSParams, max_episode_steps: int = 100, action_repeat: int = 1,
                 seed: int | None = None):
        super().__init__(seed)
        self.params = params
        self.spec = EnvSpec((params.obs_dim,), params.action_dim, max_episode_steps, action_repeat, False)
        self._q_factor = _psd_factor(params.Q)
        self._r_factor = _psd_factor(params.R)
        self._s0_factor = _psd_factor(params.Sigma0)
        self.state = np.zeros(params.state_dim)

    def _noise(self, factor: np.ndarray) -> np.ndarray:
        return factor @ self.rng.standard_normal(factor.shape[1])

    def _reset_state(self) -> None:
        self.state = self._noise(self._s0_factor)

    def _inner_step(self, a: np.ndarray) -> float:
        p = self.params
        u = p.action_scale * a
        x = self.state
        reward = -float(x @ p.S @ x) - float(u @ p.T @ u)
        self.state = p.A @ x + p.B @ u + self._noise(self._q_factor)
        return reward

    def _observe(self) -> np.ndarray:
        return self.params.C @ self.state + self._noise(self._r_factor)

    def _get_sim_state(self):
        return self.state.tolist()

    def _set_sim_state(self, s) -> None:
        self.state = np.asarray(s, dtype=np.float64)


def lqr_params(observed: bool = True, obs_noise: float = 0.0) -> LGSSParams:
    """Discretized double integrator with quadratic cost."""
    dt = 0.1
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    C = np.eye(2) if observed else np.array([[1.0, 0.0]])
    p = C.shape[0]
    return LGSSParams(A=A, B=B, C=C, Q=1e-4 * np.eye(2), R=obs_noise * np.eye(p), S=np.eye(2),
                      T=0.01 * np.eye(1), Sigma0=0.1 * np.eye(2), action_scale=2.0)


def oracle_lgss_params(obs_noise: float = 0.1) -> LGSSParams:
    """Slowly rotating 2-D system observed through a noisy 2-D projection.

    Strong temporal correlation makes sequence models beat per-frame ones.
    """
    th = 0.3
    A = 0.97 * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    B = np.array([[0.0], [0.5]])
    C = np.array([[1.0, 0.0], [0.5, 1.0]])
    return LGSSParams(A=A, B=B, C=C, Q=0.05 * np.eye(2), R=obs_noise * np.eye(2), S=np.eye(2),
                      T=0.01 * np.eye(1), Sigma0=np.eye(2), action_scale=1.0)


def wrap_angle(th):
    return (np.asarray(th) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class PendulumParams:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    damping: float = 0.0
    reset_angle: tuple[float, float] = (-np.pi, np.pi)
    reset_speed: tuple[float, float] = (-1.0, 1.0)


class PendulumEnv(Env):
    """Torque-limited pendulum, angle 0 upright, semi-implicit Euler integration.

    With ``observe_velocity=False`` only (cos, sin) of the angle is emitted,
    so acting well requires memory of past observations.
    """

    def __init__(self, observe_velocity: bool = False, max_episode_steps: int = 200,
                 action_repeat: int = 2, params: PendulumParams | None = None, seed: int | None = None):
        super().__init__(seed)
        self.params = params or PendulumParams()
        self.observe_velocity = observe_velocity
        obs_dim = 3 if observe_velocity else 2
        self.spec = EnvSpec((obs_dim,), 1, max_episode_steps, action_repeat, False)
        self.theta = 0.0
        self.omega = 0.0

    def _reset_state(self) -> None:
        p = self.params
        self.theta = float(self.rng.uniform(*p.reset_angle))
        self.omega = float(self.rng.uniform(*p.reset_speed))

    def angular_accel(self, theta: float, torque: float, omega: float = 0.0) -> float:
        p = self.params
        return (3.0 * p.gravity / (2.0 * p.length) * np.sin(theta)
                + 3.0 / (p.mass * p.length ** 2) * torque - p.damping * omega)

    def energy(self) -> float:
        """Kinetic plus potential energy per unit of 3/(m l^2)-scaled inertia."""
        p = self.params
        return 0.5 * self.omega ** 2 + 3.0 * p.gravity / (2.0 * p.length) * np.cos(self.theta)

    def _inner_step(self, a: np.ndarray) -> float:
        p = self.params
        u = float(np.clip(a[0], -1.0, 1.0)) * p.max_torque
        th = float(wrap_angle(self.theta))
        reward = -(th ** 2 + 0.1 * self.omega ** 2 + 0.001 * u ** 2)
        omega = self.omega + self.angular_accel(self.theta, u, self.omega) * p.dt
        omega = float(np.clip(omega, -p.max_speed, p.max_speed))
        self.theta = float(self.theta + omega * p.dt)
        self.omega = omega
        return reward

    def _observe(self) -> np.ndarray:
        obs = [np.cos(self.theta), np.sin(self.theta)]
        if self.observe_velocity:
            obs.append(self.omega)
        return np.array(obs)

    def _get_sim_state(self):
        return [self.theta, self.omega]

    def _set_sim_state(self, s) -> None:
        self.theta, self.omega = float(s[0]), float(s[1])


class TinyImageWrapper(Env):
    """Renders the wrapped env's observation as a (1, 16, 16) grayscale image.

    Pendulum: a blurred rod at the current angle. LGSS: a blob at the first
    two observation coordinates (clipped to [-2, 2]).
    """

    SIZE = 16

    def __init__(self, env: Env):
        self.env = env
        self.spec = EnvSpec((1, self.SIZE, self.SIZE), env.spec.action_dim, env.spec.max_episode_steps,
                            env.spec.action_repeat, env.spec.terminates_on_failure)
        c = (np.arange(self.SIZE) + 0.5) / self.SIZE * 2.0 - 1.0
        self._gx, self._gy = np.meshgrid(c, -c)

    @property
    def rng(self):
        return self.env.rng

    def render(self, obs: np.ndarray) -> np.ndarray:
        if isinstance(self.env, PendulumEnv):
            pts = np.linspace(0.0, 0.8, 6)
            cx, cy = -obs[1] * pts, obs[0] * pts
        else:
            cx = np.array([np.clip(obs[0], -2, 2) / 2.5])
            cy = np.array([np.clip(obs[1] if obs.size > 1 else 0.0, -2, 2) / 2.5])
        img = np.zeros((self.SIZE, self.SIZE))
        for x, y in zip(cx, cy):
            img = np.maximum(img, np.exp(-((self._gx - x) ** 2 + (self._gy - y) ** 2) / 0.02))
        return img[None]

    def reset(self, rng=None) -> np.ndarray:
        return self.render(self.env.reset(rng))

    def step(self, action) -> StepResult:
        res = self.env.step(action)
        return StepResult(res.reward, self.render(res.observation), res.terminal, res.truncated)

    def get_state(self):
        return self.env.get_state()

    def set_state(self, state) -> None:
        self.env.set_state(state)


@dataclass
class EnvConfig:
    name: str = "pendulum"
    fully_observed: bool = False
    max_episode_steps: int = 200
    action_repeat: int = 2
    tiny_image: bool = False
    obs_noise: float = 0.0


def make_env(cfg: EnvConfig, seed: int | None = None) -> Env:
    if cfg.name == "pendulum":
        env: Env = PendulumEnv(cfg.fully_observed, cfg.max_episode_steps, cfg.action_repeat, seed=seed)
    elif cfg.name == "lqr":
        env = LGSSEnv(lqr_params(observed=cfg.fully_observed, obs_noise=cfg.obs_noise),
                      cfg.max_episode_steps, cfg.action_repeat, seed=seed)
    elif cfg.name == "lgss":
        env = LGSSEnv(oracle_lgss_params(cfg.obs_noise or 0.1), cfg.max_episode_steps, cfg.action_repeat, seed=seed)
    else:
        raise ValueError(f"unknown environment {cfg.name!r}; expected pendulum, lqr or lgss")
    if cfg.tiny_image:
        env = TinyImageWrapper(env)
    return env
