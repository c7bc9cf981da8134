"""Reparameterizable diagonal Gaussians and their tanh-squashed variant."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG2 = math.log(2.0)


class DistributionError(ValueError):
    pass


@dataclass
class DiagGaussian:
    """Independent normals over the last axis; ``mean``/``std`` may carry batch axes."""

    mean: Tensor
    std: Tensor

    @classmethod
    def standard(cls, shape: tuple[int, ...]) -> "DiagGaussian":
        return cls(Tensor(np.zeros(shape)), Tensor(np.ones(shape)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def rsample(self, noise) -> Tensor:
        """mean + std * noise, differentiable in mean and std."""
        noise = np.asarray(ag._val(noise), dtype=np.float64)
        if noise.shape != self.mean.shape:
            raise DistributionError(f"noise shape {noise.shape} does not match distribution shape {self.mean.shape}")
        return self.mean + self.std * noise

    def sample(self, rng: np.random.Generator) -> Tensor:
        return self.rsample(rng.standard_normal(self.mean.shape))

    def log_prob(self, x) -> Tensor:
        """Log density summed over the last axis."""
        z = (x - self.mean) / self.std
        return (ag.square(z) * -0.5 - ag.log(self.std) - HALF_LOG_2PI).sum(axis=-1)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise DistributionError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    if np.any(q.std.data <= 0) or np.any(p.std.data <= 0):
        raise DistributionError("standard deviations must be strictly positive")
    var_ratio = ag.square(q.std / p.std)
    mahal = ag.square((q.mean - p.mean) / p.std)
    return ((var_ratio + mahal - 1.0) * 0.5 - ag.log(q.std / p.std)).sum(axis=-1)


def log1m_tanh_sq(pre) -> Tensor:
    """log(1 - tanh(u)^2) evaluated as 2 (log 2 - u - softplus(-2u))."""
    return (LOG2 - pre - ag.softplus(pre * -2.0)) * 2.0


@dataclass
class TanhDiagGaussian:
    """a = tanh(u), u ~ DiagGaussian; support is the open hypercube (-1, 1)^d."""

    base: DiagGaussian

    def rsample(self, noise) -> tuple[Tensor, Tensor]:
        """Returns (action, pre-squash value). Keep the latter for log_prob."""
        pre = self.base.rsample(noise)
        return ag.tanh(pre), pre

    def mode(self) -> Tensor:
        return ag.tanh(self.base.mean)

    def log_prob(self, action=None, pre=None) -> Tensor:
        """log pi(a); pass the stored pre-squash value whenever it is available."""
        if pre is None:
            if action is None:
                raise DistributionError("need an action or its pre-squash value")
            a = np.asarray(ag._val(action), dtype=np.float64)
            if np.any(np.abs(a) >= 1.0):
                raise DistributionError("action outside the open interval (-1, 1)")
            pre = Tensor(np.arctanh(a))
        return self.base.log_prob(pre) - log1m_tanh_sq(pre).sum(axis=-1)


def tanh_log_prob(dist: TanhDiagGaussian, action=None, pre=None) -> Tensor:
    return dist.log_prob(action, pre)
