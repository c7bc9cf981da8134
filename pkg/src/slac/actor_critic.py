"""Maximum-entropy actor-critic pieces: twin soft Q-functions with EMA
targets, a tanh-Gaussian policy over a fixed history window, and automatic
temperature tuning.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autograd as ag
from .autograd import Tensor
from .distributions import TanhDiagGaussian
from .nn import MLP, GaussianMLP, Module


class InputKind(str, enum.Enum):
    LATENT = "latent"     # filtered latent sample z = (z1, z2)
    HISTORY = "history"   # flattened window of encoder features and actions
    STATE = "state"       # raw observation (fully observed tasks)


class ActorCriticError(ValueError):
    pass


class CriticNets(Module):
    """Two Q-networks and their EMA target copies.

    Only ``q1`` and ``q2`` are handed to the optimizer; the targets are
    written exclusively by :func:`target_update`.
    """

    def __init__(self, input_dim: int, action_dim: int, hidden: int, rng: np.random.Generator):
        h = [hidden, hidden]
        self.q1 = MLP(input_dim + action_dim, h, 1, rng)
        self.q2 = MLP(input_dim + action_dim, h, 1, rng)
        self.target1 = MLP(input_dim + action_dim, h, 1, rng)
        self.target2 = MLP(input_dim + action_dim, h, 1, rng)
        self.target1.copy_from(self.q1)
        self.target2.copy_from(self.q2)
        self._input_dim = input_dim
        self._action_dim = action_dim

    def online_parameters(self) -> dict[str, Tensor]:
        return {**self.q1.parameters("q1."), **self.q2.parameters("q2.")}

    def _inp(self, x, a):
        x = ag._val(x) if not isinstance(x, Tensor) else x
        if np.shape(ag._val(x))[-1] != self._input_dim:
            raise ActorCriticError(f"critic expects {self._input_dim} input features, got {np.shape(ag._val(x))}")
        return ag.concat([x, a], axis=-1)

    def __call__(self, x, a, frozen: bool = False) -> tuple[Tensor, Tensor]:
        inp = self._inp(x, a)
        return self.q1(inp, frozen).reshape(-1), self.q2(inp, frozen).reshape(-1)

    def target(self, x, a) -> tuple[np.ndarray, np.ndarray]:
        inp = self._inp(x, a)
        with ag.no_grad():
            return self.target1(inp).data.reshape(-1), self.target2(inp).data.reshape(-1)


class PolicyNet(Module):
    def __init__(self, input_dim: int, action_dim: int, hidden: int, rng: np.random.Generator,
                 std_scale: float = 1.0):
        self.head = GaussianMLP(input_dim, [hidden, hidden], action_dim, rng, std_scale=std_scale)
        self._input_dim = input_dim
        self._action_dim = action_dim

    @property
    def action_dim(self) -> int:
        return self._action_dim

    def __call__(self, x) -> TanhDiagGaussian:
        if np.shape(ag._val(x))[-1] != self._input_dim:
            raise ActorCriticError(f"policy expects {self._input_dim} input features, got {np.shape(ag._val(x))}")
        return TanhDiagGaussian(self.head(x))

    def act(self, x, stochastic: bool = True, noise=None, rng: np.random.Generator | None = None) -> np.ndarray:
        """Action in (-1, 1)^d for a batch of inputs; no tape is recorded."""
        with ag.no_grad():
            dist = self(x)
            if not stochastic:
                return dist.mode().data
            if noise is None:
                noise = (rng or np.random.default_rng()).standard_normal(dist.base.mean.shape)
            return dist.rsample(noise)[0].data


class Temperature(Module):
    def __init__(self, target_entropy: float, init_log_alpha: float = 0.0):
        self.log_alpha = Tensor(np.array(float(init_log_alpha)), requires_grad=True)
        self._target_entropy = float(target_entropy)

    @property
    def target_entropy(self) -> float:
        return self._target_entropy

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))


def history_input(features: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Flatten (B, S, F) features and (B, S-1, A) actions into (B, S*F + (S-1)*A)."""
    features = np.asarray(features, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    b = features.shape[0]
    return np.concatenate([features.reshape(b, -1), actions.reshape(b, -1)], axis=1)


def history_input_dim(tau: int, feature_dim: int, action_dim: int) -> int:
    return (tau + 1) * feature_dim + tau * action_dim


@dataclass
class RLBatch:
    """Inputs for one critic/actor update.

    ``critic_input``/``critic_input_next`` hold whatever the critic consumes
    at the last two window slots (latent samples, histories or raw states);
    ``policy_input_next`` is the policy's view at the last slot.
    """

    critic_input: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    critic_input_next: np.ndarray
    policy_input_next: np.ndarray
    terminal: np.ndarray
    window_ids: np.ndarray
    next_window_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.next_window_ids is None:
            self.next_window_ids = self.window_ids
        if not np.array_equal(np.asarray(self.window_ids), np.asarray(self.next_window_ids)):
            raise ActorCriticError("critic inputs at consecutive slots come from different windows")
        n = len(self.window_ids)
        for name in ("critic_input", "action", "reward", "critic_input_next", "policy_input_next", "terminal"):
            if len(getattr(self, name)) != n:
                raise ActorCriticError(f"{name} has batch size {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.window_ids)


def soft_bellman_target(reward, terminal, gamma: float, q1_next, q2_next, logp_next, alpha: float) -> np.ndarray:
    """y = r + gamma * (1 - terminal) * (min(Q1', Q2') - alpha * log pi')."""
    v = np.minimum(q1_next, q2_next) - alpha * np.asarray(logp_next)
    return np.asarray(reward, dtype=np.float64) + gamma * (1.0 - np.asarray(terminal, dtype=np.float64)) * v


def critic_loss(critics: CriticNets, policy: PolicyNet, temperature: Temperature, batch: RLBatch,
                gamma: float, noise: np.ndarray) -> tuple[Tensor, Tensor, dict]:
    """Soft Bellman residuals for both critics (targets are detached)."""
    with ag.no_grad():
        dist = policy(batch.policy_input_next)
        a_next, pre = dist.rsample(noise)
        logp = dist.log_prob(pre=pre).data
    tq1, tq2 = critics.target(batch.critic_input_next, a_next.data)
    y = soft_bellman_target(batch.reward, batch.terminal, gamma, tq1, tq2, logp, temperature.alpha)
    return _regress(critics, batch, y)


def _regress(critics: CriticNets, batch: RLBatch, y: np.ndarray):
    q1, q2 = critics(batch.critic_input, batch.action)
    l1 = (ag.square(q1 - y) * 0.5).mean()
    l2 = (ag.square(q2 - y) * 0.5).mean()
    return l1, l2, {"target_mean": float(np.mean(y)), "q1_mean": float(q1.data.mean())}


def actor_loss(policy: PolicyNet, critics: CriticNets, temperature: Temperature, batch: RLBatch,
               noise: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """E[alpha log pi(a|h) - min Q(z, a)] with a reparameterized; critics frozen."""
    dist = policy(batch.policy_input_next)
    a, pre = dist.rsample(noise)
    logp = dist.log_prob(pre=pre)
    q1, q2 = critics(batch.critic_input_next, a, frozen=True)
    loss = (logp * temperature.alpha - ag.minimum(q1, q2)).mean()
    return loss, logp.data.copy()


def temperature_loss(temperature: Temperature, log_probs) -> Tensor:
    """E[-alpha (log pi + target_entropy)] with log pi treated as a constant."""
    lp = np.asarray(ag._val(log_probs), dtype=np.float64)
    return (ag.exp(temperature.log_alpha) * -(lp + temperature.target_entropy)).mean()


def target_update(critics: CriticNets, nu: float) -> None:
    if not 0.0 < nu <= 1.0:
        raise ActorCriticError(f"EMA rate must lie in (0, 1], got {nu}")
    for online, target in ((critics.q1, critics.target1), (critics.q2, critics.target2)):
        for (_, p), (_, t) in zip(online.named_parameters(), target.named_parameters()):
            t.data = nu * p.data + (1.0 - nu) * t.data


# -------------------------------------------------------------- tabular toy
def discrete_soft_value(critics: CriticNets, states: np.ndarray, n_actions: int, alpha: float) -> np.ndarray:
    """Exact soft value alpha * logsumexp_a(min target Q / alpha) over one-hot actions.

    Used on tabular toys where the policy is the Boltzmann distribution of
    the critic, so the expectation over actions is taken in closed form.
    """
    b = len(states)
    qs = []
    for k in range(n_actions):
        a = np.zeros((b, n_actions))
        a[:, k] = 1.0
        t1, t2 = critics.target(states, a)
        qs.append(np.minimum(t1, t2))
    q = np.stack(qs, axis=1)
    if alpha == 0:
        return q.max(axis=1)
    return alpha * logsumexp(q / alpha, axis=1)


def discrete_critic_loss(critics: CriticNets, states, actions_onehot, rewards, next_states, terminal,
                         gamma: float, alpha: float) -> tuple[Tensor, Tensor, dict]:
    n_actions = actions_onehot.shape[1]
    v = discrete_soft_value(critics, next_states, n_actions, alpha)
    y = np.asarray(rewards, dtype=np.float64) + gamma * (1.0 - np.asarray(terminal, dtype=np.float64)) * v
    ids = np.arange(len(states))
    batch = RLBatch(states, actions_onehot, rewards, next_states, next_states, terminal, ids)
    return _regress(critics, batch, y)


def critic_q_table(critics: CriticNets, n_states: int, n_actions: int) -> np.ndarray:
    """(S, A) table of min(Q1, Q2) over one-hot states and actions."""
    with ag.no_grad():
        s = np.repeat(np.eye(n_states), n_actions, axis=0)
        a = np.tile(np.eye(n_actions), (n_states, 1))
        q1, q2 = critics(s, a)
        return np.minimum(q1.data, q2.data).reshape(n_states, n_actions)


def gaussian_entropy_target(action_dim: int) -> float:
    return -float(action_dim)

