"""Episode-structured replay with fixed-length sequence windows.

Every stored transition is stored once in flat arrays; windows are index
views materialized at sample time. A window ending at observation ``e`` of
an episode holds observations ``e-tau .. e`` and the ``tau`` actions and
rewards between them. Slots before the episode start are padded (first
frame repeated, zero action/reward) and flagged invalid in ``valid_mask``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class ReplayError(RuntimeError):
    pass


@dataclass
class SequenceWindow:
    x: np.ndarray            # (tau+1, *obs_shape)
    a: np.ndarray            # (tau, action_dim)
    r: np.ndarray            # (tau,)
    valid_mask: np.ndarray   # (tau+1,) bool
    terminal: bool
    window_id: int

    @property
    def tau(self) -> int:
        return self.a.shape[0]


@dataclass
class WindowBatch:
    """A batch of sequence windows, arrays stacked on axis 0."""

    x: np.ndarray            # (B, tau+1, *obs_shape)
    a: np.ndarray            # (B, tau, action_dim)
    r: np.ndarray            # (B, tau)
    valid_mask: np.ndarray   # (B, tau+1) bool
    terminal: np.ndarray     # (B,) bool, failure terminal on the last transition
    window_ids: np.ndarray   # (B,) int64

    @property
    def tau(self) -> int:
        return self.a.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> SequenceWindow:
        return SequenceWindow(self.x[i], self.a[i], self.r[i], self.valid_mask[i], bool(self.terminal[i]),
                              int(self.window_ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_windows(cls, windows: list[SequenceWindow]) -> "WindowBatch":
        return cls(np.stack([w.x for w in windows]), np.stack([w.a for w in windows]),
                   np.stack([w.r for w in windows]), np.stack([w.valid_mask for w in windows]),
                   np.array([w.terminal for w in windows]), np.array([w.window_id for w in windows]))

    @classmethod
    def from_arrays(cls, x, a, r, valid_mask=None, terminal=None) -> "WindowBatch":
        """Wrap raw sequences (no padding) as a batch, e.g. oracle data."""
        x = np.asarray(x, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        b = x.shape[0]
        if valid_mask is None:
            valid_mask = np.ones(x.shape[:2], dtype=bool)
        if terminal is None:
            terminal = np.zeros(b, dtype=bool)
        return cls(x, a, r, np.asarray(valid_mask, dtype=bool), np.asarray(terminal, dtype=bool),
                   _fresh_ids(b))

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.x[idx], self.a[idx], self.r[idx], self.valid_mask[idx], self.terminal[idx],
                           self.window_ids[idx])


_external_ids = itertools.count(1 << 40)


def _fresh_ids(n: int) -> np.ndarray:
    # ids for batches built outside a buffer; disjoint from buffer-issued ids
    return np.array([next(_external_ids) for _ in range(n)], dtype=np.int64)


@dataclass
class _Episode:
    obs_start: int
    step_start: int
    n_steps: int
    terminal: bool = False
    closed: bool = False


class ReplayBuffer:
    """Stores episodes as (N+1 observations, N actions, N rewards); capacity in steps."""

    def __init__(self, obs_shape: tuple[int, ...], action_dim: int, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.capacity = capacity
        self._obs = np.zeros((16, *self.obs_shape))
        self._act = np.zeros((16, action_dim))
        self._rew = np.zeros(16)
        self._n_obs = 0
        self._n_steps = 0
        self._episodes: dict[int, _Episode] = {}
        self._next_episode = 0
        self._next_window = 0
        self._stored = 0

    # ------------------------------------------------------------------ storage
    @property
    def stored_steps(self) -> int:
        return self._stored

    @property
    def num_episodes(self) -> int:
        return len(self._episodes)

    def episode_ids(self) -> list[int]:
        return list(self._episodes)

    def _grow(self, name: str, needed: int) -> None:
        arr = getattr(self, name)
        if needed <= arr.shape[0]:
            return
        size = max(needed, 2 * arr.shape[0])
        new = np.zeros((size, *arr.shape[1:]))
        new[: arr.shape[0]] = arr
        setattr(self, name, new)

    def open_episode(self, x0) -> int:
        """Start an episode with its initial observation; returns its id."""
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != self.obs_shape:
            raise ReplayError(f"observation shape {x0.shape} != {self.obs_shape}")
        self._grow("_obs", self._n_obs + 1)
        self._obs[self._n_obs] = x0
        ep_id = self._next_episode
        self._next_episode += 1
        self._episodes[ep_id] = _Episode(self._n_obs, self._n_steps, 0)
        self._n_obs += 1
        return ep_id

    def append_step(self, episode_id: int, a, r: float, x_next, terminal: bool = False,
                    truncated: bool = False) -> None:
        ep = self._episodes.get(episode_id)
        if ep is None:
            raise ReplayError(f"unknown or evicted episode {episode_id}")
        if ep.closed:
            raise ReplayError(f"episode {episode_id} is finished; append rejected")
        last = max(self._episodes)
        if episode_id != last:
            raise ReplayError("only the most recently opened episode can be extended")
        a = np.asarray(a, dtype=np.float64).reshape(self.action_dim)
        x_next = np.asarray(x_next, dtype=np.float64)
        if x_next.shape != self.obs_shape:
            raise ReplayError(f"observation shape {x_next.shape} != {self.obs_shape}")
        self._grow("_obs", self._n_obs + 1)
        self._grow("_act", self._n_steps + 1)
        self._grow("_rew", self._n_steps + 1)
        self._obs[self._n_obs] = x_next
        self._act[self._n_steps] = a
        self._rew[self._n_steps] = r
        self._n_obs += 1
        self._n_steps += 1
        ep.n_steps += 1
        self._stored += 1
        if terminal:
            ep.terminal = True
        if terminal or truncated:
            ep.closed = True
        self._evict()

    def _evict(self) -> None:
        if self._stored <= self.capacity:
            return
        while self._stored > self.capacity:
            oldest = min(self._episodes)
            ep = self._episodes[oldest]
            if len(self._episodes) > 1:
                del self._episodes[oldest]
                self._stored -= ep.n_steps
            else:
                # a single episode longer than capacity slides its start
                ep.obs_start += 1
                ep.step_start += 1
                ep.n_steps -= 1
                self._stored -= 1
        self._compact()

    def _compact(self) -> None:
        first = min(self._episodes.values(), key=lambda e: e.obs_start)
        o0, s0 = first.obs_start, first.step_start
        if o0 < max(1024, self._n_obs // 2):
            return
        self._obs[: self._n_obs - o0] = self._obs[o0:self._n_obs]
        self._act[: self._n_steps - s0] = self._act[s0:self._n_steps]
        self._rew[: self._n_steps - s0] = self._rew[s0:self._n_steps]
        self._n_obs -= o0
        self._n_steps -= s0
        for ep in self._episodes.values():
            ep.obs_start -= o0
            ep.step_start -= s0

    def episode(self, episode_id: int) -> dict[str, np.ndarray]:
        ep = self._episodes[episode_id]
        return {
            "observations": self._obs[ep.obs_start:ep.obs_start + ep.n_steps + 1].copy(),
            "actions": self._act[ep.step_start:ep.step_start + ep.n_steps].copy(),
            "rewards": self._rew[ep.step_start:ep.step_start + ep.n_steps].copy(),
            "terminal": ep.terminal,
            "closed": ep.closed,
        }

    # ----------------------------------------------------------------- sampling
    def _end_index(self):
        eps = list(self._episodes.values())
        counts = np.array([e.n_steps for e in eps], dtype=np.int64)
        return eps, counts, np.cumsum(counts)

    def sample_windows(self, batch_size: int, tau: int, rng: np.random.Generator) -> WindowBatch:
        """Uniform over all valid end positions (i.e. stored transitions)."""
        if tau < 1:
            raise ValueError("tau must be >= 1")
        eps, counts, cum = self._end_index()
        total = int(cum[-1]) if len(cum) else 0
        if total == 0:
            raise ReplayError("cannot sample from an empty buffer")
        u = rng.integers(0, total, size=batch_size)
        which = np.searchsorted(cum, u, side="right")
        ends = u - (cum[which] - counts[which]) + 1       # observation index within episode, 1..N
        obs_start = np.array([eps[i].obs_start for i in which], dtype=np.int64)
        step_start = np.array([eps[i].step_start for i in which], dtype=np.int64)
        n_steps = counts[which]
        term_ep = np.array([eps[i].terminal for i in which], dtype=bool)
        return self._gather(ends, obs_start, step_start, n_steps, term_ep, tau)

    def window_at(self, episode_id: int, end: int, tau: int) -> SequenceWindow:
        """The window ending at observation ``end`` (1..N) of an episode."""
        ep = self._episodes[episode_id]
        if not 1 <= end <= ep.n_steps:
            raise ReplayError(f"end {end} outside 1..{ep.n_steps}")
        batch = self._gather(np.array([end]), np.array([ep.obs_start]), np.array([ep.step_start]),
                             np.array([ep.n_steps]), np.array([ep.terminal]), tau)
        return batch[0]

    def _gather(self, ends, obs_start, step_start, n_steps, term_ep, tau) -> WindowBatch:
        offs = np.arange(-tau, 1)
        rel = ends[:, None] + offs[None, :]                   # (B, tau+1)
        valid = rel >= 0
        x = self._obs[obs_start[:, None] + np.maximum(rel, 0)]
        rel_a = rel[:, :-1]
        valid_a = rel_a >= 0
        a_idx = step_start[:, None] + np.maximum(rel_a, 0)
        a = self._act[a_idx] * valid_a[..., None]
        r = self._rew[a_idx] * valid_a
        terminal = term_ep & (ends == n_steps)
        b = len(ends)
        ids = np.arange(self._next_window, self._next_window + b, dtype=np.int64)
        self._next_window += b
        return WindowBatch(x, a, r, valid, terminal, ids)

    # ------------------------------------------------------------ dump/restore
    def state_arrays(self, prefix: str = "replay/") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            f"{prefix}meta": np.array([self._next_episode, self._next_window, self.capacity], dtype=np.float64)}
        for eid, ep in self._episodes.items():
            data = self.episode(eid)
            out[f"{prefix}{eid}/observations"] = data["observations"]
            out[f"{prefix}{eid}/actions"] = data["actions"]
            out[f"{prefix}{eid}/rewards"] = data["rewards"]
            out[f"{prefix}{eid}/flags"] = np.array([ep.terminal, ep.closed], dtype=np.float64)
        return out

    @classmethod
    def from_state_arrays(cls, arrays: dict[str, np.ndarray], obs_shape, action_dim,
                          prefix: str = "replay/") -> "ReplayBuffer":
        meta = arrays[f"{prefix}meta"]
        buf = cls(obs_shape, action_dim, int(meta[2]))
        ids = sorted({int(k[len(prefix):].split("/")[0]) for k in arrays
                      if k.startswith(prefix) and k != f"{prefix}meta"})
        for eid in ids:
            obs = arrays[f"{prefix}{eid}/observations"]
            acts = arrays[f"{prefix}{eid}/actions"].reshape(-1, action_dim)
            rews = arrays[f"{prefix}{eid}/rewards"].reshape(-1)
            flags = arrays[f"{prefix}{eid}/flags"]
            n = acts.shape[0]
            buf._grow("_obs", buf._n_obs + n + 1)
            buf._grow("_act", buf._n_steps + n)
            buf._grow("_rew", buf._n_steps + n)
            buf._obs[buf._n_obs:buf._n_obs + n + 1] = obs.reshape(n + 1, *buf.obs_shape)
            buf._act[buf._n_steps:buf._n_steps + n] = acts
            buf._rew[buf._n_steps:buf._n_steps + n] = rews
            buf._episodes[eid] = _Episode(buf._n_obs, buf._n_steps, n, bool(flags[0]), bool(flags[1]))
            buf._n_obs += n + 1
            buf._n_steps += n
            buf._stored += n
        buf._next_episode = int(meta[0])
        buf._next_window = int(meta[1])
        return buf
