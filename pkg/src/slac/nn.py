"""Small network building blocks on top of :mod:`slac.autograd`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .distributions import DiagGaussian

STD_FLOOR = 1e-4


class Module:
    """Parameter container. Public attributes holding tensors that require
    grad, sub-modules, or lists of sub-modules are discovered in insertion
    order; attributes starting with ``_`` are skipped."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return dict(self.named_parameters(prefix))

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.copy()

    def copy_from(self, other: "Module") -> None:
        for (_, dst), (_, src) in zip(self.named_parameters(), other.named_parameters()):
            dst.data = src.data.copy()


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _p(t: Tensor, frozen: bool) -> Tensor:
    return t.detach() if frozen else t


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = Tensor(glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x, frozen: bool = False) -> Tensor:
        return ag.matmul(x, _p(self.W, frozen)) + _p(self.b, frozen)


class MLP(Module):
    """Leaky-ReLU hidden layers and a linear output layer."""

    def __init__(self, n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator,
                 final_activation: bool = False):
        sizes = [n_in, *hidden, n_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self._final_activation = final_activation

    @property
    def n_in(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1].W.shape[1]

    def __call__(self, x, frozen: bool = False) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h, frozen)
            if i < last or self._final_activation:
                h = ag.leaky_relu(h)
        return h


class GaussianMLP(Module):
    """MLP whose output layer parameterizes a diagonal Gaussian.

    The mean is linear; the std is softplus of a linear pre-activation whose
    gradient is clipped element-wise to [-10, 10], plus a small floor.
    """

    def __init__(self, n_in: int, hidden: Sequence[int], dim: int, rng: np.random.Generator,
                 std_scale: float = 1.0):
        self.net = MLP(n_in, hidden, 2 * dim, rng)
        self._dim = dim
        self._std_scale = std_scale

    @property
    def dim(self) -> int:
        return self._dim

    def __call__(self, x, frozen: bool = False) -> DiagGaussian:
        out = self.net(x, frozen)
        d = self._dim
        mean = out[..., :d]
        pre = ag.clip_grad_by_value(out[..., d:])
        std = ag.softplus(pre)
        if self._std_scale != 1.0:
            std = std * self._std_scale
        return DiagGaussian(mean, std + STD_FLOOR)


def set_affine(mlp: MLP, weight: np.ndarray, bias: np.ndarray) -> None:
    """Hand-set an MLP with leaky-ReLU hidden layers to compute x @ weight + bias exactly.

    Uses the identity x = (lrelu(x) - lrelu(-x)) / (1 + slope) with a pair of
    units per input coordinate; needs hidden widths >= 2 * n_in.
    """
    n_in = mlp.n_in
    weight = np.asarray(weight, dtype=np.float64).reshape(n_in, -1)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if weight.shape[1] != mlp.n_out or bias.shape[0] != mlp.n_out:
        raise ValueError("affine map does not match MLP output size")
    slope = ag.LEAKY_SLOPE
    layers = mlp.layers
    for layer in layers:
        layer.W.data = np.zeros_like(layer.W.data)
        layer.b.data = np.zeros_like(layer.b.data)
    if len(layers) == 1:
        layers[0].W.data = weight.copy()
        layers[0].b.data = bias.copy()
        return
    for layer in layers[:-1]:
        if layer.W.shape[1] < 2 * n_in:
            raise ValueError("hidden layer too narrow for an exact affine map")
    eye = np.eye(n_in)
    first = layers[0].W.data
    first[:, :n_in] = eye
    first[:, n_in:2 * n_in] = -eye
    # each middle layer re-splits the recovered identity into a +/- pair
    split = np.zeros((2 * n_in, 2 * n_in))
    rec = np.vstack([eye, -eye]) / (1.0 + slope)
    split[:, :n_in] = rec
    split[:, n_in:] = -rec
    for layer in layers[1:-1]:
        layer.W.data[:2 * n_in, :2 * n_in] = split
    layers[-1].W.data[:2 * n_in, :] = rec @ weight
    layers[-1].b.data = bias.copy()


IMAGE_SIZE = 16


class ConvEncoder(Module):
    """Three stride-2 4x4 convolutions: (C, 16, 16) -> (ch, 2, 2) -> feature vector."""

    def __init__(self, channels: int, feature_dim: int, rng: np.random.Generator, width: int = 16):
        chans = [channels, width, 2 * width, 2 * width]
        self.kernels = []
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            w = Tensor(glorot(rng, (b, a, 4, 4), a * 16, b * 16), requires_grad=True)
            setattr(self, f"k{i}", w)
            self.kernels.append(f"k{i}")
        self.proj = Linear(chans[-1] * 4, feature_dim, rng)
        self._out_ch = chans[-1]

    def __call__(self, x, frozen: bool = False) -> Tensor:
        h = x
        for name in self.kernels:
            h = ag.leaky_relu(ag.conv2d(h, _p(getattr(self, name), frozen), stride=2, pad=1))
        n = h.shape[0]
        return ag.leaky_relu(self.proj(h.reshape(n, self._out_ch * 4), frozen))


class ConvDecoder(Module):
    """Linear to (ch, 2, 2) then three stride-2 transposed convolutions to (C, 16, 16)."""

    def __init__(self, n_in: int, channels: int, rng: np.random.Generator, width: int = 16):
        self._ch = 2 * width
        self.proj = Linear(n_in, self._ch * 4, rng)
        chans = [self._ch, 2 * width, width, channels]
        self.kernels = []
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            w = Tensor(glorot(rng, (a, b, 4, 4), a * 16, b * 16), requires_grad=True)
            setattr(self, f"k{i}", w)
            self.kernels.append(f"k{i}")

    def __call__(self, z, frozen: bool = False) -> Tensor:
        n = z.shape[0]
        h = ag.leaky_relu(self.proj(z, frozen)).reshape(n, self._ch, 2, 2)
        last = len(self.kernels) - 1
        for i, name in enumerate(self.kernels):
            h = ag.conv_transpose2d(h, _p(getattr(self, name), frozen), stride=2, pad=1)
            if i < last:
                h = ag.leaky_relu(h)
        return h
