"""Sequential latent-variable model with a two-part stochastic state.

Generative side::

    z1_1 ~ N(0, I)                     z2_1 ~ p(z2_1 | z1_1)
    z1_t+1 ~ p(z1 | z2_t, a_t)         z2_t+1 ~ p(z2 | z1_t+1, z2_t, a_t)
    x_t ~ N(decoder(z1_t, z2_t), sigma^2 I)
    r_t ~ p(r | z_t, a_t, z_t+1)

Inference replaces only the z1 factors, with q(z1_1 | x_1) and
q(z1_t+1 | x_t+1, z2_t, a_t); z2 is always drawn from the generative
conditional, so the sequence KL reduces to a KL over z1.

Two ablation variants share the interface: an unfactored filtering model
with a single latent, and a per-frame VAE without dynamics.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .distributions import DiagGaussian, kl_diag_gaussian
from .nn import MLP, ConvDecoder, ConvEncoder, GaussianMLP, Module
from .replay import WindowBatch


class ModelVariant(str, enum.Enum):
    FACTORED = "factored"
    UNFACTORED = "unfactored"
    VAE = "vae"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    obs_shape: tuple[int, ...]
    action_dim: int
    latent1_dim: int = 8
    latent2_dim: int = 32
    hidden: int = 64
    feature_dim: int = 32
    decoder_var: float = 0.1
    variant: ModelVariant = ModelVariant.FACTORED
    reward_head: bool = True

    def __post_init__(self):
        self.obs_shape = tuple(self.obs_shape)
        self.variant = ModelVariant(self.variant)
        if self.variant is ModelVariant.FACTORED and not self.latent1_dim < self.latent2_dim:
            raise ModelError("the factored model needs latent1_dim < latent2_dim")
        if self.decoder_var <= 0:
            raise ModelError("decoder variance must be positive")

    @property
    def image(self) -> bool:
        return len(self.obs_shape) == 3

    @property
    def obs_size(self) -> int:
        return int(np.prod(self.obs_shape))

    @property
    def latent_dim(self) -> int:
        return self.latent1_dim + self.latent2_dim

    @property
    def kl_dim(self) -> int:
        """Dimension of the variable the KL is taken over."""
        return self.latent1_dim if self.variant is ModelVariant.FACTORED else self.latent_dim


@dataclass
class LatentSample:
    z1: Tensor
    z2: Tensor | None = None

    @property
    def z(self) -> Tensor:
        return self.z1 if self.z2 is None else ag.concat([self.z1, self.z2], axis=-1)


@dataclass
class FilterResult:
    samples: list[LatentSample]
    posteriors: list[DiagGaussian]
    priors: list[DiagGaussian]
    is_first: np.ndarray
    window_ids: np.ndarray
    _z_cache: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def z(self, slot: int) -> Tensor:
        if not self._z_cache:
            self._z_cache.extend(s.z for s in self.samples)
        return self._z_cache[slot]

    def z_array(self, slot: int) -> np.ndarray:
        return self.z(slot).data


def _select(first: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise choice: a where first, else b."""
    return a * first + b * (1.0 - first)


def _select_dist(first: np.ndarray, a: DiagGaussian, b: DiagGaussian) -> DiagGaussian:
    return DiagGaussian(_select(first, a.mean, b.mean), _select(first, a.std, b.std))


def first_slots(valid_mask: np.ndarray) -> np.ndarray:
    """Slots that start an episode inside the window."""
    m = np.asarray(valid_mask, dtype=bool)
    prev = np.concatenate([np.zeros_like(m[:, :1]), m[:, :-1]], axis=1)
    first = m & ~prev
    first[:, 0] = True
    return first


class LatentModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        h = [cfg.hidden, cfg.hidden]
        d1, d2, da, f = cfg.latent1_dim, cfg.latent2_dim, cfg.action_dim, cfg.feature_dim
        D = cfg.latent_dim
        if cfg.image:
            self.encoder = ConvEncoder(cfg.obs_shape[0], f, rng)
        else:
            self.encoder = MLP(cfg.obs_size, [cfg.hidden], f, rng, final_activation=True)
        v = cfg.variant
        if v is ModelVariant.FACTORED:
            self.latent1_first_posterior = GaussianMLP(f, h, d1, rng)
            self.latent2_first_prior = GaussianMLP(d1, h, d2, rng)
            self.latent1_prior = GaussianMLP(d2 + da, h, d1, rng)
            self.latent1_posterior = GaussianMLP(f + d2 + da, h, d1, rng)
            self.latent2_prior = GaussianMLP(d1 + d2 + da, h, d2, rng)
        elif v is ModelVariant.UNFACTORED:
            self.latent_first_posterior = GaussianMLP(f, h, D, rng)
            self.latent_prior = GaussianMLP(D + da, h, D, rng)
            self.latent_posterior = GaussianMLP(f + D + da, h, D, rng)
        else:
            self.latent_posterior = GaussianMLP(f, h, D, rng)
        if cfg.image:
            self.decoder = ConvDecoder(D, cfg.obs_shape[0], rng)
        else:
            self.decoder = MLP(D, h, cfg.obs_size, rng)
        if cfg.reward_head:
            self.reward = GaussianMLP(2 * D + da, h, 1, rng)
        self.decoder_var = cfg.decoder_var
        # only ever differs from decoder_var under fault injection
        self.normalizer_var = cfg.decoder_var

    @property
    def variant(self) -> ModelVariant:
        return self.cfg.variant

    # ------------------------------------------------------------------ noise
    def sample_noise(self, rng: np.random.Generator, batch: int, slots: int) -> dict[str, np.ndarray]:
        noise = {"z1": rng.standard_normal((slots, batch, self.cfg.kl_dim))}
        if self.variant is ModelVariant.FACTORED:
            noise["z2"] = rng.standard_normal((slots, batch, self.cfg.latent2_dim))
        return noise

    @staticmethod
    def zero_noise_like(noise: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in noise.items()}

    # --------------------------------------------------------------- features
    def features(self, x, frozen: bool = False) -> Tensor:
        """Encoder features for (B, S, *obs) observations -> (B, S, feature_dim)."""
        x = np.asarray(ag._val(x), dtype=np.float64)
        b, s = x.shape[:2]
        flat = x.reshape(b * s, *self.cfg.obs_shape) if self.cfg.image else x.reshape(b * s, -1)
        return self.encoder(flat, frozen).reshape(b, s, self.cfg.feature_dim)

    def _standard(self, b: int, d: int) -> DiagGaussian:
        return DiagGaussian(Tensor(np.zeros((b, d))), Tensor(np.ones((b, d))))

    # ---------------------------------------------------------------- filter
    def infer_filter(self, window: WindowBatch, noise: dict[str, np.ndarray] | None = None,
                     rng: np.random.Generator | None = None, features: Tensor | None = None) -> FilterResult:
        """Ancestral reparameterized sample from the filtering distribution.

        ``features`` may carry precomputed encoder features of ``window.x``.
        """
        slots = window.x.shape[1]
        if slots < 2:
            raise ModelError("a window needs at least 2 observations")
        b = window.x.shape[0]
        if noise is None:
            noise = self.sample_noise(rng or np.random.default_rng(), b, slots)
        self._check_noise(noise, b, slots)
        if window.a.shape[1] != slots - 1 or window.a.shape[2] != self.cfg.action_dim:
            raise ModelError(f"actions shape {window.a.shape} does not match window with {slots} observations")
        first = first_slots(window.valid_mask)
        if self.variant is ModelVariant.VAE:
            first = np.ones_like(first)
        feats = self.features(window.x) if features is None else features
        samples, posts, priors = [], [], []
        for k in range(slots):
            feat = feats[:, k]
            fk = first[:, k:k + 1].astype(np.float64)
            need_init = bool(fk.any())
            need_trans = k > 0 and not bool(fk.all())
            init = self._init_step(feat, noise, k) if need_init else None
            trans = self._trans_step(feat, samples[-1], window.a[:, k - 1], noise, k) if need_trans else None
            if init is not None and trans is not None:
                s_i, q_i, p_i = init
                s_t, q_t, p_t = trans
                z2 = None if s_i.z2 is None else _select(fk, s_i.z2, s_t.z2)
                sample = LatentSample(_select(fk, s_i.z1, s_t.z1), z2)
                q, p = _select_dist(fk, q_i, q_t), _select_dist(fk, p_i, p_t)
            else:
                sample, q, p = init if init is not None else trans
            samples.append(sample)
            posts.append(q)
            priors.append(p)
        return FilterResult(samples, posts, priors, first, np.asarray(window.window_ids))

    def _check_noise(self, noise, b, slots):
        want = (slots, b, self.cfg.kl_dim)
        if noise["z1"].shape != want:
            raise ModelError(f"z1 noise shape {noise['z1'].shape} != {want}")
        if self.variant is ModelVariant.FACTORED and noise["z2"].shape != (slots, b, self.cfg.latent2_dim):
            raise ModelError(f"z2 noise shape {noise['z2'].shape} != {(slots, b, self.cfg.latent2_dim)}")

    def _init_step(self, feat, noise, k):
        b = feat.shape[0]
        if self.variant is ModelVariant.FACTORED:
            q = self.latent1_first_posterior(feat)
            z1 = q.rsample(noise["z1"][k])
            z2 = self.latent2_first_prior(z1).rsample(noise["z2"][k])
            return LatentSample(z1, z2), q, self._standard(b, self.cfg.latent1_dim)
        net = self.latent_first_posterior if self.variant is ModelVariant.UNFACTORED else self.latent_posterior
        q = net(feat)
        return LatentSample(q.rsample(noise["z1"][k])), q, self._standard(b, self.cfg.latent_dim)

    def _trans_step(self, feat, prev: LatentSample, a, noise, k):
        if self.variant is ModelVariant.FACTORED:
            ctx = ag.concat([prev.z2, a], axis=-1)
            p = self.latent1_prior(ctx)
            q = self.latent1_posterior(ag.concat([feat, prev.z2, a], axis=-1))
            z1 = q.rsample(noise["z1"][k])
            z2 = self.latent2_prior(ag.concat([z1, prev.z2, a], axis=-1)).rsample(noise["z2"][k])
            return LatentSample(z1, z2), q, p
        p = self.latent_prior(ag.concat([prev.z1, a], axis=-1))
        q = self.latent_posterior(ag.concat([feat, prev.z1, a], axis=-1))
        return LatentSample(q.rsample(noise["z1"][k])), q, p

    # ------------------------------------------------------------------ loss
    def decode(self, z: Tensor, frozen: bool = False) -> Tensor:
        """Decoder means for (B, S, D) latents -> (B, S, obs_size)."""
        b, s, d = z.shape
        out = self.decoder(z.reshape(b * s, d), frozen)
        return out.reshape(b, s, self.cfg.obs_size)

    def model_loss_terms(self, window: WindowBatch, result: FilterResult) -> dict[str, Tensor]:
        if not np.array_equal(np.asarray(window.window_ids), result.window_ids):
            raise ModelError("latents were not produced from this window batch")
        expected_dim = self.cfg.kl_dim
        if result.posteriors[0].dim != expected_dim:
            raise ModelError("latents come from a different model variant")
        b, slots = window.x.shape[:2]
        mask = np.asarray(window.valid_mask, dtype=np.float64)
        Z = ag.stack([result.z(k) for k in range(slots)], axis=1)
        x = np.asarray(window.x, dtype=np.float64).reshape(b, slots, -1)
        mu = self.decode(Z)
        P = self.cfg.obs_size
        sq = ag.square(mu - x).sum(axis=-1)
        recon = sq * (0.5 / self.decoder_var) + 0.5 * P * math.log(2 * math.pi * self.normalizer_var)
        recon = (recon * mask).sum() / b
        q = DiagGaussian(ag.stack([d.mean for d in result.posteriors], 1), ag.stack([d.std for d in result.posteriors], 1))
        p = DiagGaussian(ag.stack([d.mean for d in result.priors], 1), ag.stack([d.std for d in result.priors], 1))
        kl = (kl_diag_gaussian(q, p) * mask).sum() / b
        terms = {"reconstruction": recon, "kl": kl}
        if self.cfg.reward_head:
            tau = slots - 1
            D = self.cfg.latent_dim
            inp = ag.concat([Z[:, :-1], window.a, Z[:, 1:]], axis=-1).reshape(b * tau, 2 * D + self.cfg.action_dim)
            dist = self.reward(inp)
            nll = -dist.log_prob(np.asarray(window.r, dtype=np.float64).reshape(b * tau, 1)).reshape(b, tau)
            terms["reward"] = (nll * mask[:, :-1]).sum() / b
        return terms

    def model_loss(self, window: WindowBatch, result: FilterResult, include_reward: bool = True) -> Tensor:
        """Negative sequence ELBO (plus reward NLL when the head is enabled), batch mean."""
        terms = self.model_loss_terms(window, result)
        loss = terms["reconstruction"] + terms["kl"]
        if include_reward and "reward" in terms:
            loss = loss + terms["reward"]
        return loss

    def elbo_per_window(self, window: WindowBatch, noise=None, rng=None) -> np.ndarray:
        """Single-sample ELBO (no reward term) for each window, without recording a tape."""
        with ag.no_grad():
            res = self.infer_filter(window, noise=noise, rng=rng)
            b, slots = window.x.shape[:2]
            mask = np.asarray(window.valid_mask, dtype=np.float64)
            Z = ag.stack([res.z(k) for k in range(slots)], axis=1)
            mu = self.decode(Z).data
            x = np.asarray(window.x, dtype=np.float64).reshape(b, slots, -1)
            P = self.cfg.obs_size
            recon = 0.5 / self.decoder_var * ((mu - x) ** 2).sum(-1) + 0.5 * P * math.log(2 * math.pi * self.normalizer_var)
            kl = np.stack([kl_diag_gaussian(q, p).data for q, p in zip(res.posteriors, res.priors)], axis=1)
            return -((recon + kl) * mask).sum(axis=1)

    # ------------------------------------------------------- KL identity check
    def kl_full_vs_simplified(self, window: WindowBatch, result: FilterResult, n_samples: int,
                              rng: np.random.Generator) -> "KLComparison":
        """Monte-Carlo KL over (z1, z2) against the closed-form KL over z1 alone.

        Draws z1 from each slot's posterior (conditioned on the filtered
        z2 of the previous slot) and z2 from the generative conditional, and
        evaluates the z2 log-densities for q and p separately.
        """
        if self.variant is not ModelVariant.FACTORED:
            raise ModelError("the KL identity applies to the factored model only")
        b, slots = window.x.shape[:2]
        mask = np.asarray(window.valid_mask, dtype=np.float64)
        d1 = self.cfg.latent1_dim
        full = np.zeros(n_samples)
        z1_only = np.zeros(n_samples)
        closed = 0.0
        with ag.no_grad():
            for k in range(slots):
                m = mask[:, k]
                if not m.any():
                    continue
                q, p = result.posteriors[k], result.priors[k]
                closed += float((kl_diag_gaussian(q, p).data * m).sum() / b)
                eps = rng.standard_normal((n_samples, b, d1))
                z1 = q.mean.data + q.std.data * eps
                lq1 = _np_log_prob(z1, q.mean.data, q.std.data)
                lp1 = _np_log_prob(z1, p.mean.data, p.std.data)
                flat = z1.reshape(n_samples * b, d1)
                fk = result.is_first[:, k]
                z2_dist_q = self._z2_conditional(flat, result, window, k, n_samples, fk)
                z2 = z2_dist_q.mean.data + z2_dist_q.std.data * rng.standard_normal(z2_dist_q.mean.shape)
                # the same conditional evaluated again for the generative side
                z2_dist_p = self._z2_conditional(flat, result, window, k, n_samples, fk)
                lq2 = _np_log_prob(z2, z2_dist_q.mean.data, z2_dist_q.std.data).reshape(n_samples, b)
                lp2 = _np_log_prob(z2, z2_dist_p.mean.data, z2_dist_p.std.data).reshape(n_samples, b)
                full += (((lq1 + lq2) - (lp1 + lp2)) * m).sum(axis=1) / b
                z1_only += ((lq1 - lp1) * m).sum(axis=1) / b
        se = float(full.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("nan")
        return KLComparison(float(full.mean()), se, closed, float(z1_only.mean()),
                            float(np.max(np.abs(full - z1_only))))

    def _z2_conditional(self, z1_flat, result, window, k, n, first):
        b = window.x.shape[0]
        fk = np.tile(first.astype(np.float64), n)[:, None]
        init = self.latent2_first_prior(z1_flat)
        if k == 0:
            return init
        z2_prev = np.tile(result.samples[k - 1].z2.data, (n, 1))
        a_prev = np.tile(window.a[:, k - 1], (n, 1))
        trans = self.latent2_prior(np.concatenate([z1_flat, z2_prev, a_prev], axis=-1))
        return _select_dist(fk, init, trans)

    # --------------------------------------------------------------- rollouts
    def generate_rollout(self, mode: str, window: WindowBatch, noise: dict[str, np.ndarray] | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
        """Decoder means (B, S, *obs_shape) under the posterior, conditional prior or prior."""
        if window is None or window.a is None:
            raise ModelError("rollouts need the window's actions")
        slots = window.a.shape[1] + 1
        b = window.a.shape[0]
        if noise is None:
            noise = self.sample_noise(rng or np.random.default_rng(), b, slots)
        with ag.no_grad():
            if mode == "posterior":
                res = self.infer_filter(window, noise=noise)
                zs = [res.z(k) for k in range(slots)]
            elif mode in ("prior", "conditional_prior"):
                zs = self._dynamics_rollout(mode, window, noise, b, slots)
            else:
                raise ModelError(f"unknown rollout mode {mode!r}")
            mu = self.decode(ag.stack(zs, axis=1)).data
        return mu.reshape(b, slots, *self.cfg.obs_shape)

    def _dynamics_rollout(self, mode, window, noise, b, slots):
        v = self.variant
        a = np.asarray(window.a, dtype=np.float64)
        if mode == "conditional_prior":
            if window.x is None:
                raise ModelError("conditional prior rollouts need the first observation")
            feat = self.features(np.asarray(window.x)[:, :1])[:, 0]
            sample, _, _ = self._init_step(feat, noise, 0)
        elif v is ModelVariant.FACTORED:
            z1 = Tensor(noise["z1"][0])
            sample = LatentSample(z1, self.latent2_first_prior(z1).rsample(noise["z2"][0]))
        else:
            sample = LatentSample(Tensor(noise["z1"][0]))
        zs = [sample.z]
        for k in range(1, slots):
            ak = a[:, k - 1]
            if v is ModelVariant.FACTORED:
                z1 = self.latent1_prior(ag.concat([sample.z2, ak], -1)).rsample(noise["z1"][k])
                z2 = self.latent2_prior(ag.concat([z1, sample.z2, ak], -1)).rsample(noise["z2"][k])
                sample = LatentSample(z1, z2)
            elif v is ModelVariant.UNFACTORED:
                sample = LatentSample(self.latent_prior(ag.concat([sample.z1, ak], -1)).rsample(noise["z1"][k]))
            else:
                sample = LatentSample(Tensor(noise["z1"][k]))
            zs.append(sample.z)
        return zs


@dataclass
class KLComparison:
    full: float                 # Monte-Carlo KL over (z1, z2)
    full_se: float
    simplified: float           # closed form over z1
    simplified_sample: float    # Monte-Carlo over z1 with the same draws
    max_shared_diff: float      # max |full - z1-only| per draw


def _np_log_prob(x, mean, std) -> np.ndarray:
    z = (x - mean) / std
    return (-0.5 * z * z - np.log(std) - 0.5 * math.log(2 * math.pi)).sum(axis=-1)


def dump_rollouts(path: str | Path, mode: str, predicted: np.ndarray, ground_truth: np.ndarray | None) -> None:
    """JSON lines: one record per (window, step)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for w in range(predicted.shape[0]):
            for step in range(predicted.shape[1]):
                rec = {"mode": mode, "window": w, "step": step,
                       "predicted_mean": predicted[w, step].tolist(),
                       "ground_truth": None if ground_truth is None else np.asarray(ground_truth)[w, step].tolist()}
                fh.write(json.dumps(rec) + "\n")


def model_config_from_env(obs_shape: Sequence[int], action_dim: int, **kwargs) -> ModelConfig:
    return ModelConfig(tuple(obs_shape), action_dim, **kwargs)
