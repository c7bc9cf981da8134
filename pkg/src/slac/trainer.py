"""The training loop: random-data pretraining of the latent model, then
interleaved environment steps and gradient updates (model, critics, actor,
temperature, EMA targets), with evaluation, metrics and checkpoints.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from . import checkpoint
from .actor_critic import (CriticNets, PolicyNet, RLBatch, Temperature, actor_loss, critic_loss,
                           history_input, history_input_dim, target_update, temperature_loss)
from .config import TrainConfig, to_dict
from .envs import Env, make_env
from .latent_model import LatentModel, ModelConfig
from .replay import ReplayBuffer, WindowBatch

logger = logging.getLogger(__name__)

HOOK_ORDER = ("model", "critic", "actor", "temperature", "ema")
STREAMS = ("init", "env", "collect", "replay", "model", "rl", "eval")


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- histories
class History:
    """Last tau+1 observations and tau actions of the running episode, padded
    like replay windows: repeated first frame, zero actions, masked fronts."""

    def __init__(self, tau: int):
        self.tau = tau
        self.obs: deque = deque(maxlen=tau + 1)
        self.actions: deque = deque(maxlen=tau)
        self.count = 0

    def reset(self, x0) -> None:
        self.obs.clear()
        self.actions.clear()
        self.obs.append(np.array(x0, dtype=np.float64))
        self.count = 1

    def push(self, a, x_next) -> None:
        self.actions.append(np.array(a, dtype=np.float64).reshape(-1))
        self.obs.append(np.array(x_next, dtype=np.float64))
        self.count += 1

    def arrays(self, action_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tau = self.tau
        obs = list(self.obs)
        pad = tau + 1 - len(obs)
        x = np.stack([obs[0]] * pad + obs)[None]
        acts = [np.zeros(action_dim)] * (tau - len(self.actions)) + list(self.actions)
        a = np.stack(acts)[None] if tau else np.zeros((1, 0, action_dim))
        mask = np.array([[False] * pad + [True] * len(obs)])
        return x, a, mask

    def state(self) -> dict:
        return {"obs": [o.tolist() for o in self.obs], "actions": [a.tolist() for a in self.actions],
                "count": self.count}

    def load(self, s: dict) -> None:
        self.obs = deque((np.array(o, dtype=np.float64) for o in s["obs"]), maxlen=self.tau + 1)
        self.actions = deque((np.array(a, dtype=np.float64) for a in s["actions"]), maxlen=self.tau)
        self.count = int(s["count"])


# -------------------------------------------------------------------- agent
class Agent:
    """All learnable parts of a run and their optimizers."""

    def __init__(self, cfg: TrainConfig, obs_shape: tuple[int, ...], action_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.model: LatentModel | None = None
        if cfg.algorithm == "slac":
            mcfg = ModelConfig(self.obs_shape, action_dim, cfg.latent1_dim, cfg.latent2_dim, cfg.hidden,
                               cfg.feature_dim, cfg.decoder_var, cfg.variant, cfg.reward_head)
            self.model = LatentModel(mcfg, rng)
        obs_dim = int(np.prod(self.obs_shape))
        hist_dim = history_input_dim(cfg.tau, cfg.feature_dim, action_dim)
        dims = {"latent": cfg.latent1_dim + cfg.latent2_dim, "history": hist_dim, "state": obs_dim}
        self.critics = CriticNets(dims[cfg.critic_input], action_dim, cfg.rl_hidden, rng)
        self.policy = PolicyNet(dims[cfg.actor_input], action_dim, cfg.rl_hidden, rng, cfg.policy_std_scale)
        target_entropy = -float(action_dim) if cfg.target_entropy is None else float(cfg.target_entropy)
        self.temperature = Temperature(target_entropy)
        self.optimizers: dict[str, ag.Adam] = {}
        if self.model is not None:
            self.optimizers["model"] = ag.Adam(self.model.parameters("model."), cfg.lr_model)
        self.optimizers["critic"] = ag.Adam(
            {**self.critics.q1.parameters("critic.q1."), **self.critics.q2.parameters("critic.q2.")}, cfg.lr_rl)
        self.optimizers["policy"] = ag.Adam(self.policy.parameters("policy."), cfg.lr_rl)
        self.optimizers["temperature"] = ag.Adam(self.temperature.parameters("temperature."), cfg.lr_rl)

    # ---- parameters and checkpoint arrays
    def named_parameters(self) -> dict[str, ag.Tensor]:
        out = {}
        if self.model is not None:
            out.update(self.model.parameters("model."))
        out.update(self.critics.parameters("critic."))
        out.update(self.policy.parameters("policy."))
        out.update(self.temperature.parameters("temperature."))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        for opt_name, opt in self.optimizers.items():
            arrays[f"adam.step/{opt_name}"] = np.array([opt.state.step, opt.state.skipped], dtype=np.float64)
            for name in opt.params:
                if name in opt.state.m:
                    arrays[f"adam.m/{name}"] = opt.state.m[name]
                    arrays[f"adam.v/{name}"] = opt.state.v[name]
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.data = arrays[name].copy()
        for opt_name, opt in self.optimizers.items():
            key = f"adam.step/{opt_name}"
            if key in arrays:
                opt.state.step, opt.state.skipped = int(arrays[key][0]), int(arrays[key][1])
            opt.state.m = {n: arrays[f"adam.m/{n}"].copy() for n in opt.params if f"adam.m/{n}" in arrays}
            opt.state.v = {n: arrays[f"adam.v/{n}"].copy() for n in opt.params if f"adam.v/{n}" in arrays}

    # ---- inputs
    def _features(self, x: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self.model.features(x).data

    def policy_input(self, x: np.ndarray, a: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                     feats: np.ndarray | None = None, z_last: np.ndarray | None = None) -> np.ndarray:
        kind = self.cfg.actor_input
        if kind == "state":
            return x[:, -1].reshape(x.shape[0], -1)
        if kind == "history":
            return history_input(self._features(x) if feats is None else feats, a)
        if z_last is None:
            win = WindowBatch(x, a, np.zeros(a.shape[:2]), mask, np.zeros(len(x), bool), np.arange(len(x)))
            with ag.no_grad():
                res = self.model.infer_filter(win, rng=rng)
            z_last = res.z_array(len(res) - 1)
        return z_last

    def act(self, x, a, mask, rng: np.random.Generator, stochastic: bool = True) -> np.ndarray:
        inp = self.policy_input(x, a, mask, rng)
        noise = rng.standard_normal((1, self.action_dim))
        return self.policy.act(inp, stochastic=stochastic, noise=noise)[0]

    def rl_batch(self, win: WindowBatch, rng: np.random.Generator) -> RLBatch:
        """Critic/actor inputs at the last two slots of each window."""
        cfg = self.cfg
        b = len(win)
        x = win.x
        feats = None
        z_prev = z_next = None
        if self.model is not None and "history" in (cfg.critic_input, cfg.actor_input):
            feats = self._features(x)
        if "latent" in (cfg.critic_input, cfg.actor_input):
            with ag.no_grad():
                res = self.model.infer_filter(win, rng=rng, features=None if feats is None else ag.Tensor(feats))
            z_prev, z_next = res.z_array(len(res) - 2), res.z_array(len(res) - 1)
        kind = cfg.critic_input
        if kind == "latent":
            c_in, c_next = z_prev, z_next
        elif kind == "state":
            c_in, c_next = x[:, -2].reshape(b, -1), x[:, -1].reshape(b, -1)
        else:
            # previous-slot history: shift the window back by one, padding the front
            shifted_f = np.concatenate([feats[:, :1], feats[:, :-1]], axis=1)
            shifted_a = np.concatenate([np.zeros_like(win.a[:, :1]), win.a[:, :-1]], axis=1)
            c_in, c_next = history_input(shifted_f, shifted_a), history_input(feats, win.a)
        p_next = self.policy_input(x, win.a, win.valid_mask, rng, feats=feats, z_last=z_next)
        return RLBatch(c_in, win.a[:, -1], win.r[:, -1], c_next, p_next, win.terminal.astype(np.float64),
                       win.window_ids)


@dataclass
class EvalStats:
    mean: float
    std: float
    returns: list[float]


def evaluate(policy_fn: Callable, env: Env, episodes: int, rng: np.random.Generator, tau: int,
             action_dim: int) -> EvalStats:
    """Runs full episodes with ``policy_fn(x, a, mask, rng)``; touches no replay buffer."""
    returns = []
    hist = History(tau)
    for _ in range(episodes):
        hist.reset(env.reset())
        total = 0.0
        while True:
            x, a_hist, mask = hist.arrays(action_dim)
            a = policy_fn(x, a_hist, mask, rng)
            res = env.step(a)
            total += res.reward
            hist.push(a, res.observation)
            if res.done:
                break
        returns.append(total)
    arr = np.array(returns)
    return EvalStats(float(arr.mean()), float(arr.std()), returns)


def random_action(rng: np.random.Generator, action_dim: int, scale: float) -> np.ndarray:
    """tanh of a zero-mean Gaussian draw."""
    return np.tanh(scale * rng.standard_normal(action_dim))


# ------------------------------------------------------------------ trainer
class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir: str | Path | None = None,
                 hooks: list[Callable[[str, dict], None]] | None = None):
        self.cfg = cfg.resolved()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.hooks = list(hooks or [])
        ss = np.random.SeedSequence(self.cfg.seed)
        self.rngs = dict(zip(STREAMS, (np.random.default_rng(s) for s in ss.spawn(len(STREAMS)))))
        env_seed = int(self.rngs["env"].integers(2 ** 63))
        self.env = make_env(self.cfg.env, seed=env_seed)
        spec = self.env.spec
        self.action_dim = spec.action_dim
        self.action_repeat = spec.action_repeat
        self.agent = Agent(self.cfg, spec.observation_shape, spec.action_dim, self.rngs["init"])
        self.replay = ReplayBuffer(spec.observation_shape, spec.action_dim, self.cfg.replay_capacity)
        self.history = History(self.cfg.tau)
        self.metrics: list[dict] = []
        self.env_steps = 0
        self.iteration = 0
        self.grad_steps = 0
        self.pretrained = False
        self._credit = 0.0
        self._episode_id: int | None = None
        self._episode_return = 0.0
        self._episodes_done = 0
        self._next_eval = self.cfg.eval_every if self.cfg.eval_every else None
        self._next_ckpt = self.cfg.checkpoint_every if self.cfg.checkpoint_every else None
        self._last_losses: dict[str, float] = {}
        self.model_version = 0
        self.target_version = 0
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------ plumbing
    def _emit(self, event: str, **info) -> None:
        for hook in self.hooks:
            hook(event, info)

    def _log(self, record: dict) -> None:
        self.metrics.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def _check(self, name: str, loss: ag.Tensor) -> None:
        if not math.isfinite(loss.item()):
            path = None
            if self.out_dir is not None:
                path = self.out_dir / "diagnostic.ckpt"
                self.save(path)
            raise TrainingAborted(f"non-finite {name} at env step {self.env_steps} "
                                  f"(grad step {self.grad_steps}); diagnostic checkpoint: {path}")

    # ---------------------------------------------------------- collection
    def _start_episode(self) -> None:
        x0 = self.env.reset()
        self._episode_id = self.replay.open_episode(x0)
        self.history.reset(x0)
        self._episode_return = 0.0

    def _env_step(self, random: bool) -> None:
        if self._episode_id is None:
            self._start_episode()
        rng = self.rngs["collect"]
        if random:
            a = random_action(rng, self.action_dim, self.cfg.random_policy_scale)
        else:
            x, a_hist, mask = self.history.arrays(self.action_dim)
            a = self.agent.act(x, a_hist, mask, rng)
        res = self.env.step(a)
        self.replay.append_step(self._episode_id, a, res.reward, res.observation, res.terminal, res.truncated)
        self.history.push(a, res.observation)
        self.env_steps += self.action_repeat
        self._episode_return += res.reward
        if res.done:
            self._episodes_done += 1
            self._log({"event": "episode", "env_steps": self.env_steps, "episode": self._episodes_done,
                       "return": self._episode_return, "terminal": bool(res.terminal)})
            self._episode_id = None

    # ------------------------------------------------------------- updates
    def model_update(self) -> float:
        cfg = self.cfg
        model = self.agent.model
        win = self.replay.sample_windows(cfg.batch_size_model, cfg.tau, self.rngs["replay"])
        noise = model.sample_noise(self.rngs["model"], len(win), cfg.tau + 1)
        res = model.infer_filter(win, noise=noise)
        loss = model.model_loss(win, res)
        self._check("model loss", loss)
        self.agent.optimizers["model"].minimize(loss)
        self.model_version += 1
        self._emit("model", model_version=self.model_version, loss=loss.item())
        return loss.item()

    def gradient_step(self) -> dict[str, float]:
        cfg = self.cfg
        agent = self.agent
        out = {}
        if agent.model is not None:
            out["J_M"] = self.model_update()
        tau = cfg.tau if agent.model is not None else 1
        rng = self.rngs["rl"]
        win = self.replay.sample_windows(cfg.batch_size_rl, tau, self.rngs["replay"])
        batch = agent.rl_batch(win, rng)
        noise = rng.standard_normal((len(batch), self.action_dim))
        l1, l2, _ = critic_loss(agent.critics, agent.policy, agent.temperature, batch, cfg.gamma, noise)
        self._check("critic loss", l1 + l2)
        self._emit("critic", model_version=self.model_version, target_version=self.target_version,
                   loss1=l1.item(), loss2=l2.item())
        agent.optimizers["critic"].minimize(l1 + l2)
        noise = rng.standard_normal((len(batch), self.action_dim))
        lpi, logp = actor_loss(agent.policy, agent.critics, agent.temperature, batch, noise)
        self._check("actor loss", lpi)
        agent.optimizers["policy"].minimize(lpi)
        self._emit("actor", loss=lpi.item())
        lalpha = temperature_loss(agent.temperature, logp)
        agent.optimizers["temperature"].minimize(lalpha)
        self._emit("temperature", alpha=agent.temperature.alpha)
        target_update(agent.critics, cfg.ema_rate)
        self.target_version += 1
        self._emit("ema", target_version=self.target_version)
        self.grad_steps += 1
        out.update(J_Q1=l1.item(), J_Q2=l2.item(), J_pi=lpi.item(), J_alpha=lalpha.item(),
                   alpha=agent.temperature.alpha, entropy=float(-logp.mean()))
        return out

    # -------------------------------------------------------------- phases
    def pretrain(self) -> None:
        """Random-policy collection followed by model-only updates."""
        if self.pretrained:
            return
        while self.env_steps < min(self.cfg.pretrain_random_steps, self.cfg.total_env_steps):
            self._env_step(random=True)
        losses = []
        if self.agent.model is not None and self.replay.stored_steps:
            for _ in range(self.cfg.pretrain_iters):
                losses.append(self.model_update())
        self.pretrained = True
        self._log({"event": "pretrain", "env_steps": self.env_steps, "iters": len(losses),
                   "J_M_first": losses[0] if losses else None, "J_M_last": losses[-1] if losses else None})

    def train(self, max_iterations: int | None = None) -> list[dict]:
        """Runs (or resumes) the loop until total_env_steps or max_iterations more iterations."""
        self.pretrain()
        cfg = self.cfg
        done_iters = 0
        while self.env_steps < cfg.total_env_steps:
            if max_iterations is not None and done_iters >= max_iterations:
                break
            self._env_step(random=False)
            self._credit += cfg.grad_steps_per_env_step
            while self._credit >= 1.0 - 1e-12:
                self._credit -= 1.0
                self._last_losses = self.gradient_step()
            self.iteration += 1
            done_iters += 1
            if self._last_losses and self.iteration % cfg.log_every == 0:
                self._log({"event": "train", "env_steps": self.env_steps, "iteration": self.iteration,
                           "grad_steps": self.grad_steps, **self._last_losses})
            if self._next_eval is not None and self.env_steps >= self._next_eval:
                self.run_evaluation()
                while self._next_eval <= self.env_steps:
                    self._next_eval += cfg.eval_every
            if self._next_ckpt is not None and self.env_steps >= self._next_ckpt and self.out_dir is not None:
                self.save(self.out_dir / "checkpoint.ckpt")
                while self._next_ckpt <= self.env_steps:
                    self._next_ckpt += cfg.checkpoint_every
        if self.env_steps >= cfg.total_env_steps and not self._evaluated_at_end():
            self.run_evaluation()
        return self.metrics

    def _evaluated_at_end(self) -> bool:
        evals = [m for m in self.metrics if m["event"] == "eval"]
        return bool(evals) and evals[-1]["env_steps"] == self.env_steps

    def run_evaluation(self, episodes: int | None = None) -> EvalStats:
        rng = self.rngs["eval"]
        env = make_env(self.cfg.env, seed=int(rng.integers(2 ** 63)))
        stochastic = self.cfg.eval_stochastic

        def policy_fn(x, a, mask, r):
            return self.agent.act(x, a, mask, r, stochastic=stochastic)

        stats = evaluate(policy_fn, env, episodes or self.cfg.eval_episodes, rng, self.cfg.tau, self.action_dim)
        self._log({"event": "eval", "env_steps": self.env_steps, "mean_return": stats.mean,
                   "std_return": stats.std, "returns": stats.returns})
        return stats

    # --------------------------------------------------------- checkpoints
    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = self.agent.state_arrays()
        arrays.update(self.replay.state_arrays())
        checkpoint.save(path, arrays)
        side = {
            "config": to_dict(self.cfg),
            "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "env": self.env.get_state(),
            "history": self.history.state(),
            "counters": {"env_steps": self.env_steps, "iteration": self.iteration, "grad_steps": self.grad_steps,
                         "pretrained": self.pretrained, "credit": self._credit, "episode_id": self._episode_id,
                         "episode_return": self._episode_return, "episodes_done": self._episodes_done,
                         "next_eval": self._next_eval, "next_ckpt": self._next_ckpt,
                         "model_version": self.model_version, "target_version": self.target_version,
                         "last_losses": self._last_losses},
        }
        tmp = Path(str(path) + ".json.tmp")
        with open(tmp, "w") as fh:
            json.dump(side, fh)
        tmp.replace(Path(str(path) + ".json"))

    @classmethod
    def resume(cls, path: str | Path, out_dir: str | Path | None = None, hooks=None) -> "Trainer":
        from .config import from_dict

        path = Path(path)
        with open(Path(str(path) + ".json")) as fh:
            side = json.load(fh)
        trainer = cls(from_dict(side["config"]), out_dir=out_dir, hooks=hooks)
        arrays = checkpoint.load(path)
        trainer.agent.load_state_arrays(arrays)
        spec = trainer.env.spec
        trainer.replay = ReplayBuffer.from_state_arrays(arrays, spec.observation_shape, spec.action_dim)
        for k, state in side["rngs"].items():
            trainer.rngs[k].bit_generator.state = state
        trainer.env.set_state(side["env"])
        trainer.history.load(side["history"])
        c = side["counters"]
        trainer.env_steps, trainer.iteration, trainer.grad_steps = c["env_steps"], c["iteration"], c["grad_steps"]
        trainer.pretrained, trainer._credit = c["pretrained"], c["credit"]
        trainer._episode_id, trainer._episode_return = c["episode_id"], c["episode_return"]
        trainer._episodes_done, trainer._next_eval, trainer._next_ckpt = c["episodes_done"], c["next_eval"], c["next_ckpt"]
        trainer.model_version, trainer.target_version = c["model_version"], c["target_version"]
        trainer._last_losses = c["last_losses"]
        return trainer


def load_agent(path: str | Path) -> tuple[Agent, TrainConfig, dict[str, np.ndarray]]:
    """Agent and config from a checkpoint and its JSON sidecar (for rollouts and evaluation)."""
    from .config import from_dict

    arrays = checkpoint.load(path)
    side_path = Path(str(path) + ".json")
    if not side_path.is_file():
        raise checkpoint.CheckpointError(f"missing checkpoint sidecar {side_path}")
    with open(side_path) as fh:
        side = json.load(fh)
    cfg = from_dict(side["config"]).resolved()
    env = make_env(cfg.env, seed=0)
    agent = Agent(cfg, env.spec.observation_shape, env.spec.action_dim, np.random.default_rng(0))
    agent.load_state_arrays(arrays)
    return agent, cfg, arrays
