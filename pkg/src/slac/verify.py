"""Property suites behind ``slac verify`` and the acceptance tests.

Each suite returns a list of :class:`Check` records; a suite passes when
every record passes.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from . import autograd as ag
from . import checkpoint
from .actor_critic import (CriticNets, PolicyNet, RLBatch, Temperature, actor_loss, critic_loss, critic_q_table,
                           discrete_critic_loss, target_update, temperature_loss)
from .distributions import DiagGaussian, TanhDiagGaussian, kl_diag_gaussian
from .envs import LGSSEnv, oracle_lgss_params
from .latent_model import LatentModel, ModelConfig, ModelVariant
from .oracle import (KalmanModel, hard_value_iteration, kalman_filter, kalman_loglik,
                     tabular_soft_value_iteration)
from .replay import ReplayBuffer, WindowBatch


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3g} vs {self.threshold:.3g}{extra}"


def _le(name: str, value: float, threshold: float, detail: str = "") -> Check:
    return Check(name, bool(value <= threshold), float(value), float(threshold), detail)


# ------------------------------------------------------------ gradcheck
def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """op name -> (function of input tensors, input arrays), inputs chosen away from kinks."""
    n = lambda *s: rng.standard_normal(s)
    return {
        "matmul": (lambda a, b: ag.matmul(a, b), [n(3, 4), n(4, 2)]),
        "add": (lambda a, b: ag.add(a, b), [n(3, 4), n(4)]),
        "sub": (lambda a, b: ag.sub(a, b), [n(3, 1), n(3, 4)]),
        "mul": (lambda a, b: ag.mul(a, b), [n(3, 4), n(1, 4)]),
        "div": (lambda a, b: ag.div(a, b), [n(3, 4), _positive(rng, (3, 4))]),
        "exp": (ag.exp, [n(5)]),
        "log": (ag.log, [_positive(rng, (5,))]),
        "tanh": (ag.tanh, [n(5)]),
        "softplus": (ag.softplus, [np.concatenate([n(4), [21.0, 25.0]])]),
        "leaky_relu": (ag.leaky_relu, [_away_from_zero(rng, (6,))]),
        "sum": (lambda x: ag.sum_(x, axis=0), [n(3, 4)]),
        "mean": (lambda x: ag.mean(x, axis=-1, keepdims=True), [n(3, 4)]),
        "broadcast": (lambda x: ag.broadcast_to(x, (3, 4)), [n(1, 4)]),
        "reshape": (lambda x: ag.reshape(x, (6, 2)), [n(3, 4)]),
        "slice": (lambda x: ag.slice_(x, (slice(None), slice(1, 3))), [n(3, 4)]),
        "concat": (lambda a, b: ag.concat([a, b], axis=-1), [n(3, 2), n(3, 3)]),
        "square": (ag.square, [n(5)]),
        "negate": (ag.negate, [n(5)]),
        "clip_grad_by_value": (ag.clip_grad_by_value, [n(5)]),
        "minimum": (lambda a, b: ag.minimum(a, b), [n(6), n(6) + 3.0 * rng.choice([-1.0, 1.0], 6)]),
        "conv2d": (lambda x, w: ag.conv2d(x, w), [n(1, 2, 4, 4), n(2, 2, 4, 4) * 0.3]),
        "conv_transpose2d": (lambda x, w: ag.conv_transpose2d(x, w), [n(1, 2, 2, 2), n(2, 1, 4, 4) * 0.3]),
    }


def primitive_grad_error(op: str, seed: int, h: float = 1e-5) -> float:
    """grad_check on sum(weights * op(inputs)) for each input in turn."""
    rng = np.random.default_rng(seed)
    fn, inputs = _primitive_cases(rng)[op]
    with ag.no_grad():
        out_shape = fn(*[ag.Tensor(v) for v in inputs]).shape
    weights = rng.standard_normal(out_shape)
    worst = 0.0
    with ag.grad_clipping(False):
        for k in range(len(inputs)):
            def f(x, k=k):
                args = [x if j == k else ag.Tensor(v) for j, v in enumerate(inputs)]
                return (fn(*args) * weights).sum()
            worst = max(worst, ag.grad_check(f, inputs[k], h))
    return worst


def small_window(rng: np.random.Generator, batch: int, tau: int, obs_dim: int, action_dim: int,
                 pad_front: bool = True) -> WindowBatch:
    x = rng.standard_normal((batch, tau + 1, obs_dim))
    a = rng.uniform(-0.9, 0.9, (batch, tau, action_dim))
    r = rng.standard_normal((batch, tau))
    mask = np.ones((batch, tau + 1), dtype=bool)
    if pad_front and batch > 1 and tau > 1:
        mask[0, 0] = False
        x[0, 0] = x[0, 1]
        a[0, 0] = 0.0
        r[0, 0] = 0.0
    return WindowBatch.from_arrays(x, a, r, mask)


def small_model(rng: np.random.Generator, variant=ModelVariant.FACTORED, obs_dim=3, action_dim=2,
                reward_head=True) -> LatentModel:
    cfg = ModelConfig((obs_dim,), action_dim, latent1_dim=3, latent2_dim=5, hidden=8, feature_dim=8,
                      decoder_var=0.1, variant=variant, reward_head=reward_head)
    return LatentModel(cfg, rng)


def model_loss_grad_error(seed: int, tau: int = 2, variant=ModelVariant.FACTORED, n_coords: int = 40) -> float:
    rng = np.random.default_rng(seed)
    model = small_model(rng, variant)
    win = small_window(rng, 3, tau, 3, 2)
    noise = model.sample_noise(rng, 3, tau + 1)
    with ag.grad_clipping(False):
        return ag.grad_check_params(lambda: model.model_loss(win, model.infer_filter(win, noise=noise)),
                                    model.parameters(), n_coords=n_coords, rng=rng)


def _rl_problem(rng, in_dim=4, action_dim=2, batch=6):
    critics = CriticNets(in_dim, action_dim, 8, rng)
    # decorrelate targets from the online nets so both paths are exercised
    for t in (critics.target1, critics.target2):
        for _, p in t.named_parameters():
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    policy = PolicyNet(in_dim + 3, action_dim, 8, rng)
    temp = Temperature(-float(action_dim), init_log_alpha=float(rng.normal(scale=0.5)))
    ids = np.arange(batch)
    batch_ = RLBatch(rng.standard_normal((batch, in_dim)), rng.uniform(-0.9, 0.9, (batch, action_dim)),
                     rng.standard_normal(batch), rng.standard_normal((batch, in_dim)),
                     rng.standard_normal((batch, in_dim + 3)), (rng.random(batch) < 0.3).astype(float), ids)
    return critics, policy, temp, batch_


def rl_loss_grad_errors(seed: int, n_coords: int = 30) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    critics, policy, temp, batch = _rl_problem(rng)
    noise = rng.standard_normal((len(batch), 2))
    out = {}
    with ag.grad_clipping(False):
        out["critic_loss"] = ag.grad_check_params(
            lambda: sum(critic_loss(critics, policy, temp, batch, 0.99, noise)[:2]),
            critics.online_parameters(), n_coords=n_coords, rng=rng)
        out["actor_loss"] = ag.grad_check_params(
            lambda: actor_loss(policy, critics, temp, batch, noise)[0], policy.parameters(),
            n_coords=n_coords, rng=rng)
        logp = rng.standard_normal(len(batch))
        out["temperature_loss"] = ag.grad_check_params(lambda: temperature_loss(temp, logp), temp.parameters())
    return out


def suite_gradcheck(seeds: int = 100, tol: float = 1e-5) -> list[Check]:
    checks = []
    ops = list(_primitive_cases(np.random.default_rng(0)))
    for op in ops:
        worst = max(primitive_grad_error(op, s) for s in range(seeds))
        checks.append(_le(f"grad_check {op}", worst, tol, f"{seeds} seeds"))
    worst_m = max(model_loss_grad_error(s) for s in range(seeds))
    checks.append(_le("grad_check model loss", worst_m, tol, f"{seeds} seeds"))
    rl = [rl_loss_grad_errors(s) for s in range(seeds)]
    for key in rl[0]:
        checks.append(_le(f"grad_check {key}", max(r[key] for r in rl), tol, f"{seeds} seeds"))
    return checks


# -------------------------------------------------------- distributions
def suite_distributions(n: int = 100_000, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    cases = [((0.0, 2.0), (0.0, 1.0)), ((1.0, 1.0), (0.0, 1.0)), ((0.5, 0.7), (-0.3, 1.3))]
    for (mq, sq), (mp, sp) in cases:
        q = DiagGaussian(ag.Tensor([mq]), ag.Tensor([sq]))
        p = DiagGaussian(ag.Tensor([mp]), ag.Tensor([sp]))
        closed = float(kl_diag_gaussian(q, p).data)
        x = mq + sq * rng.standard_normal(n)
        d = (-0.5 * ((x - mq) / sq) ** 2 - math.log(sq)) - (-0.5 * ((x - mp) / sp) ** 2 - math.log(sp))
        se = d.std(ddof=1) / math.sqrt(n)
        checks.append(_le(f"KL N({mq},{sq}^2)||N({mp},{sp}^2) closed vs MC", abs(closed - d.mean()), 3 * se,
                          f"closed {closed:.6f}, MC {d.mean():.6f}"))
    for mu, sigma in [(0.0, 1.0), (0.7, 0.5), (-1.0, 2.0)]:
        dist = TanhDiagGaussian(DiagGaussian(ag.Tensor([mu]), ag.Tensor([sigma])))

        def dens(a):
            with ag.no_grad():
                return float(np.exp(dist.log_prob(action=np.array([a])).data))

        total, _ = integrate.quad(dens, -1 + 1e-15, 1 - 1e-15, limit=400, points=[math.tanh(mu)])
        checks.append(_le(f"tanh-Gaussian(mu={mu}, sigma={sigma}) integrates to 1", abs(total - 1.0), 1e-3))
    s = 3.0 + 2.0 * rng.standard_normal(n)
    checks.append(_le("rsample mean of N(3, 2^2)", abs(s.mean() - 3.0), 3 * 2.0 / math.sqrt(n)))
    return checks


# ----------------------------------------------------------- KL identity
def kl_identity_case(seed: int, n_samples: int = 10_000) -> tuple[float, float, float, float]:
    """(shared-draw max difference, |full - closed simplified|, full SE, full)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig((3,), 2, latent1_dim=3, latent2_dim=6, hidden=16, feature_dim=8)
    model = LatentModel(cfg, rng)
    win = small_window(rng, 4, 3, 3, 2)
    with ag.no_grad():
        res = model.infer_filter(win, rng=rng)
    cmp = model.kl_full_vs_simplified(win, res, n_samples, rng)
    return cmp.max_shared_diff, abs(cmp.full - cmp.simplified), cmp.full_se, cmp.full


def suite_kl_identity(inits: int = 50, n_samples: int = 10_000) -> list[Check]:
    shared, indep = [], []
    for seed in range(inits):
        d_shared, d_indep, se, full = kl_identity_case(seed, n_samples)
        shared.append(d_shared / max(1.0, abs(full)))
        indep.append(d_indep / se)
    return [_le("KL identity, shared z2 draws (relative difference)", max(shared), 1e-12, f"{inits} inits"),
            _le("KL identity, independent draws (|full - simplified| / SE)", max(indep), 3.0, f"{inits} inits")]


# ----------------------------------------------------------- ELBO bound
def lgss_windows(n: int, tau: int, rng: np.random.Generator, obs_noise: float = 0.1,
                 action_scale: float = 1.0) -> tuple[WindowBatch, KalmanModel]:
    """Windows that are whole fresh episodes of tau+1 observations, with exact log-likelihoods."""
    env = LGSSEnv(oracle_lgss_params(obs_noise), max_episode_steps=tau + 1, seed=int(rng.integers(2 ** 63)))
    xs, acts, rews = [], [], []
    for _ in range(n):
        obs = [env.reset()]
        a_ep, r_ep = [], []
        for _ in range(tau):
            a = np.tanh(action_scale * rng.standard_normal(env.spec.action_dim))
            res = env.step(a)
            obs.append(res.observation)
            a_ep.append(a)
            r_ep.append(res.reward)
        xs.append(obs)
        acts.append(a_ep)
        rews.append(r_ep)
    return WindowBatch.from_arrays(np.array(xs), np.array(acts), np.array(rews)), KalmanModel.from_env(env)


def window_logliks(kalman: KalmanModel, win: WindowBatch) -> np.ndarray:
    return np.array([kalman_loglik(kalman, win.x[i], win.a[i]) for i in range(len(win))])


def elbo_model(rng: np.random.Generator, variant=ModelVariant.FACTORED, decoder_var: float = 0.1,
               hidden: int = 32) -> LatentModel:
    cfg = ModelConfig((2,), 1, latent1_dim=2, latent2_dim=4, hidden=hidden, feature_dim=16,
                      decoder_var=decoder_var, variant=variant, reward_head=False)
    return LatentModel(cfg, rng)


def train_on_windows(model: LatentModel, data: WindowBatch, steps: int, batch: int, lr: float,
                     rng: np.random.Generator) -> list[float]:
    opt = ag.Adam(model.parameters(), lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(data), size=batch)
        win = data.take(idx)
        loss = model.model_loss(win, model.infer_filter(win, rng=rng))
        opt.minimize(loss)
        losses.append(loss.item())
    return losses


def elbo_gap(model: LatentModel, win: WindowBatch, logliks: np.ndarray, rng: np.random.Generator,
             repeats: int = 1) -> tuple[float, float]:
    """Mean and standard error of (ELBO - exact log-likelihood) per window."""
    diffs = np.concatenate([model.elbo_per_window(win, rng=rng) - logliks for _ in range(repeats)])
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(len(diffs)))


def suite_elbo_bound(corrupt: bool = False, train_steps: int = 5000, n_eval: int = 1000, seed: int = 0,
                     min_shrink: float = 0.5) -> list[Check]:
    rng = np.random.default_rng(seed)
    tau = 4
    train, kalman = lgss_windows(2000, tau, rng)
    test, _ = lgss_windows(n_eval, tau, rng)
    ll = window_logliks(kalman, test)
    model = elbo_model(rng)
    checks = []
    gap0, se0 = elbo_gap(model, test, ll, rng)
    if corrupt:
        # an improper likelihood: normalizer computed with a mangled variance
        model.normalizer_var = model.decoder_var * 1e-12
    train_on_windows(model, train, train_steps, 32, 1e-3, rng)
    gap1, se1 = elbo_gap(model, test, ll, rng)
    checks.append(_le("ELBO <= exact log-likelihood at init", gap0, 3 * se0, f"gap {gap0:.2f} nats"))
    checks.append(_le(f"ELBO <= exact log-likelihood after {train_steps} steps", gap1, 3 * se1,
                      f"gap {gap1:.2f} nats"))
    shrink = 1.0 - abs(gap1) / abs(gap0)
    checks.append(Check("bound gap shrinks over training (fraction)", bool(shrink >= min_shrink), shrink, min_shrink,
                        f"|gap| {abs(gap0):.2f} -> {abs(gap1):.2f}"))
    return checks


def heldout_elbo_gaps(seed: int, steps: int = 5000, variants=(ModelVariant.FACTORED, ModelVariant.VAE)
                      ) -> dict[str, float]:
    """Held-out mean (ELBO - exact log-likelihood) per variant, same data and budget."""
    out = {}
    for v in variants:
        rng = np.random.default_rng(seed)
        train, kalman = lgss_windows(2000, 4, rng)
        test, _ = lgss_windows(1000, 4, rng)
        ll = window_logliks(kalman, test)
        model = elbo_model(np.random.default_rng(seed + 100), variant=v)
        train_on_windows(model, train, steps, 32, 1e-3, rng)
        out[ModelVariant(v).value] = elbo_gap(model, test, ll, rng)[0]
    return out


def suite_variant_ordering(seeds: int = 5, steps: int = 5000, required: int = 4) -> list[Check]:
    wins = 0
    details = []
    for seed in range(seeds):
        g = heldout_elbo_gaps(seed, steps)
        wins += g["factored"] >= g["vae"]
        details.append(f"{g['factored']:.2f}/{g['vae']:.2f}")
    return [Check("factored held-out ELBO >= non-sequential VAE (seeds)", wins >= required, float(wins),
                  float(required), "factored/vae gaps: " + ", ".join(details))]


# ---------------------------------------------------------------- replay
def random_trace_buffer(rng: np.random.Generator, capacity: int, n_episodes: int, max_len: int = 30,
                        obs_dim: int = 2) -> tuple[ReplayBuffer, list[int]]:
    buf = ReplayBuffer((obs_dim,), 1, capacity)
    for _ in range(n_episodes):
        length = int(rng.integers(1, max_len))
        eid = buf.open_episode(rng.standard_normal(obs_dim))
        for t in range(length):
            last = t == length - 1
            buf.append_step(eid, rng.uniform(-1, 1, 1), float(rng.standard_normal()), rng.standard_normal(obs_dim),
                            terminal=last and bool(rng.random() < 0.5), truncated=last)
            if buf.stored_steps > capacity:
                raise AssertionError("capacity exceeded")
    return buf, buf.episode_ids()


def window_matches_episode(buf: ReplayBuffer, win, tau: int) -> bool:
    """The unmasked tail of a window is a contiguous slice of exactly one stored episode."""
    valid = np.asarray(win.valid_mask)
    first = int(np.argmax(valid))
    xs = win.x[first:]
    for eid in buf.episode_ids():
        ep = buf.episode(eid)
        obs = ep["observations"]
        n = len(xs)
        for start in range(0, len(obs) - n + 1):
            if np.array_equal(obs[start:start + n], xs):
                acts = ep["actions"][start:start + n - 1]
                rews = ep["rewards"][start:start + n - 1]
                if (np.array_equal(win.a[first:], acts) and np.array_equal(win.r[first:], rews)
                        and (first == 0 or start == 0)):
                    pad_ok = (np.all(win.x[:first] == obs[0]) and np.all(win.a[:first] == 0)
                              and np.all(win.r[:first] == 0))
                    return bool(pad_ok)
    return False


def suite_replay(seed: int = 0, draws: int = 100_000) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    bad = 0
    for trial in range(20):
        buf, _ = random_trace_buffer(rng, int(rng.integers(20, 120)), 25)
        wins = buf.sample_windows(30, 8, rng)
        bad += sum(not window_matches_episode(buf, w, 8) for w in wins)
    checks.append(_le("windows never cross episode boundaries (violations)", bad, 0, "20 random traces"))
    over = 0
    for trial in range(50):
        cap = int(rng.integers(5, 60))
        try:
            random_trace_buffer(rng, cap, 15, max_len=12)
        except AssertionError:
            over += 1
    checks.append(_le("stored_steps <= capacity (violations)", over, 0, "50 random traces"))
    # episode k stores observation values 100k + 1 .. 100k + N, so the last frame names the end position
    buf = ReplayBuffer((1,), 1, 1000)
    for k, length in enumerate((7, 13)):
        eid = buf.open_episode(np.array([100.0 * k]))
        for t in range(length):
            buf.append_step(eid, np.zeros(1), 0.0, np.array([100.0 * k + t + 1]))
    wins = buf.sample_windows(draws, 3, rng)
    last = np.round(wins.x[:, -1, 0]).astype(int)
    pos = np.where(last >= 100, 7 + last - 101, last - 1)
    counts = np.bincount(pos, minlength=20)
    expected = draws / 20
    z = np.abs(counts - expected) / math.sqrt(expected * (1 - 1 / 20))
    # max of 20 |z| values: 3.5 keeps the family-wise false-alarm rate near 1%
    checks.append(_le("uniform end positions (max |z|)", float(z.max()), 3.5, f"{draws} draws, 20 positions"))
    arrays = {"a": rng.standard_normal((3, 4)), "b/c": rng.standard_normal(5), "s": np.array(2.5)}
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.ckpt")
        checkpoint.save(path, arrays)
        back = checkpoint.load(path)
        same = all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in arrays.items())
        rbuf, _ = random_trace_buffer(rng, 200, 10)
        checkpoint.save(path, rbuf.state_arrays())
        rbuf2 = ReplayBuffer.from_state_arrays(checkpoint.load(path), (2,), 1)
        r1 = np.random.default_rng(5)
        r2 = np.random.default_rng(5)
        w1, w2 = rbuf.sample_windows(64, 8, r1), rbuf2.sample_windows(64, 8, r2)
        same_buf = all(np.array_equal(getattr(w1, f), getattr(w2, f)) for f in ("x", "a", "r", "valid_mask", "terminal"))
    checks.append(Check("checkpoint round-trip bit-identical", same and same_buf, float(same and same_buf), 1.0))
    return checks


# ---------------------------------------------------------------- oracle
def _dense_loglik(model: KalmanModel, ys: np.ndarray, acts: np.ndarray) -> float:
    """log N(y_1:T) from the full joint covariance built by brute force."""
    T = len(ys)
    n, p = model.A.shape[0], model.C.shape[0]
    means = []
    mean = np.zeros(n)
    # state covariance between times: Cov(s_t, s_u) = A^(t-u) P_u for t >= u
    Ps = [model.Sigma0]
    for t in range(1, T):
        Ps.append(model.A @ Ps[-1] @ model.A.T + model.Q)
    for t in range(T):
        if t > 0:
            mean = model.A @ mean + model.B @ acts[t - 1]
        means.append(model.C @ mean)
    big = np.zeros((T * p, T * p))
    for t in range(T):
        for u in range(t + 1):
            cross = np.linalg.matrix_power(model.A, t - u) @ Ps[u]
            block = model.C @ cross @ model.C.T
            if t == u:
                block = block + model.R
            big[t * p:(t + 1) * p, u * p:(u + 1) * p] = block
            big[u * p:(u + 1) * p, t * p:(t + 1) * p] = block.T
    diff = (ys - np.array(means)).reshape(-1)
    sign, logdet = np.linalg.slogdet(big)
    return float(-0.5 * diff @ np.linalg.solve(big, diff) - 0.5 * logdet - 0.5 * T * p * math.log(2 * math.pi))


def suite_oracle(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    m = KalmanModel([[1.0]], [[0.0]], [[1.0]], [[1.0]], [[1.0]], [[1.0]])
    checks.append(_le("1-D marginal N(0, 2) at y=0", abs(kalman_loglik(m, [[0.0]]) + 0.5 * math.log(4 * math.pi)), 1e-12))
    worst = 0.0
    for _ in range(20):
        n, p, k = 2, 2, 1
        A = rng.standard_normal((n, n)) * 0.5
        L = rng.standard_normal((n, n)) * 0.3
        km = KalmanModel(A, rng.standard_normal((n, k)), rng.standard_normal((p, n)), L @ L.T + 0.1 * np.eye(n),
                         0.2 * np.eye(p), np.eye(n))
        ys = rng.standard_normal((3, p))
        acts = rng.standard_normal((2, k))
        worst = max(worst, abs(kalman_loglik(km, ys, acts) - _dense_loglik(km, ys, acts)))
    checks.append(_le("Kalman vs dense joint Gaussian (T=3)", worst, 1e-9))
    T = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    km = KalmanModel.from_params(oracle_lgss_params(0.1))
    ys = rng.standard_normal((10, 2))
    acts = rng.uniform(-1, 1, (9, 1))
    checks.append(_le("similarity-transform invariance",
                      abs(kalman_loglik(km, ys, acts) - kalman_loglik(km.similarity(T), ys, acts)), 1e-8))
    big_r = KalmanModel(km.A, km.B, km.C, km.Q, 1e12 * np.eye(2), km.Sigma0)
    res = kalman_filter(big_r, ys[:1])
    checks.append(_le("R -> inf: posterior equals prediction", float(np.abs(res.covs[0] - big_r.Sigma0).max()), 1e-6))
    P = rng.dirichlet(np.ones(4), size=(4, 2))
    R = rng.uniform(-1, 1, (4, 2))
    checks.append(_le("soft VI, gamma=0 gives Q=r", float(np.abs(tabular_soft_value_iteration(P, R, 0.5, 0.0) - R).max()), 1e-12))
    checks.append(_le("soft VI, alpha=1e-6 vs hard VI",
                      float(np.abs(tabular_soft_value_iteration(P, R, 1e-6, 0.9) - hard_value_iteration(P, R, 0.9)).max()), 1e-4))
    q1 = tabular_soft_value_iteration(np.ones((1, 1, 1)), np.ones((1, 1)), 0.3, 0.9)
    checks.append(_le("single state/action geometric series", abs(float(q1[0, 0]) - 10.0), 1e-8))
    return checks


# ------------------------------------------------------ soft backup toy
def tabular_toy(seed: int = 0, n_states: int = 4, n_actions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)), rng.uniform(-1, 1, (n_states, n_actions))


def train_tabular_critics(P: np.ndarray, R: np.ndarray, alpha: float, gamma: float, updates: int, seed: int = 0,
                          batch: int = 256, lr: float = 1e-3, hidden: int = 64, nu: float = 0.005,
                          decay_at: float = 0.75, decay: float = 0.1) -> CriticNets:
    """Twin critics on one-hot states/actions, regressed on sampled soft backups.

    The learning rate drops by ``decay`` after ``decay_at`` of the updates so the
    final iterates settle near the fixed point instead of jittering around it.
    """
    S, A = R.shape
    rng = np.random.default_rng(seed)
    critics = CriticNets(S, A, hidden, rng)
    opt = ag.Adam(critics.online_parameters(), lr)
    cdf = np.cumsum(P, axis=-1)
    eye_s, eye_a = np.eye(S), np.eye(A)
    no_term = np.zeros(batch)
    for it in range(updates):
        if it == int(decay_at * updates):
            opt.lr = decay * lr
        s = rng.integers(0, S, batch)
        a = rng.integers(0, A, batch)
        s_next = np.minimum((rng.random(batch)[:, None] > cdf[s, a]).sum(axis=-1), S - 1)
        l1, l2, _ = discrete_critic_loss(critics, eye_s[s], eye_a[a], R[s, a], eye_s[s_next], no_term, gamma, alpha)
        opt.minimize(l1 + l2)
        target_update(critics, nu)
    return critics


def suite_soft_backup(updates: int = 20_000, alpha: float = 0.2, gamma: float = 0.9, seed: int = 0,
                      tol: float = 5e-2) -> list[Check]:
    P, R = tabular_toy(seed)
    exact = tabular_soft_value_iteration(P, R, alpha, gamma)
    critics = train_tabular_critics(P, R, alpha, gamma, updates, seed=seed)
    err = float(np.abs(critic_q_table(critics, *R.shape) - exact).max())
    return [_le("trained twin critics vs soft value iteration (max |dQ|)", err, tol,
                f"4 states, 2 actions, alpha={alpha}, {updates} updates")]


SUITES: dict[str, Callable[..., list[Check]]] = {
    "gradcheck": suite_gradcheck,
    "distributions": suite_distributions,
    "elbo_bound": suite_elbo_bound,
    "kl_identity": suite_kl_identity,
    "replay": suite_replay,
    "oracle": suite_oracle,
    "soft_backup": suite_soft_backup,
    "variant_ordering": suite_variant_ordering,
}


def run_suite(name: str, **kwargs) -> tuple[list[Check], float]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; valid suites: {', '.join(SUITES)}")
    t0 = time.time()
    checks = SUITES[name](**kwargs)
    return checks, time.time() - t0
