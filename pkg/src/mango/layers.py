"""Reusable learned blocks: linear layers, MLPs, residual temporal
convolution, and sinusoidal time embeddings.

Every layer is a thin parameter container with a ``__call__`` forward and a
``parameters()`` walk used for optimization and checkpointing. Forward passes
are pure functions of (parameters, input); nothing here holds state across
calls.
"""

from __future__ import annotations

import numpy as np

from mango import tensor as T
from mango.tensor import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape,
           dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base for parameter containers; supplies the named-parameter walk."""

    def parameters(self):
        """Yield (name, Tensor) pairs, prefixing nested module names."""
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield attr, value
            elif isinstance(value, Module):
                for sub, p in value.parameters():
                    yield f"{attr}.{sub}", p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters():
                            yield f"{attr}.{i}.{sub}", p

    def cast(self, dtype) -> "Module":
        """In-place dtype cast of all parameters (for 64-bit grad checks)."""
        for _, p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = T.parameter(glorot(rng, in_dim, out_dim, (in_dim, out_dim)))
        self.bias = T.parameter(np.zeros(out_dim, dtype=T.DEFAULT_DTYPE))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        if len(lead) != 1:
            x = T.reshape(x, (-1, self.in_dim))
        out = T.add(T.matmul(x, self.weight), self.bias)
        if len(lead) != 1:
            out = T.reshape(out, lead + (self.out_dim,))
        return out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = T.parameter(np.ones(dim, dtype=T.DEFAULT_DTYPE))
        self.shift = T.parameter(np.zeros(dim, dtype=T.DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift)


class Mlp(Module):
    """Stack of linear layers with leaky-ReLU between them.

    ``out_norm`` appends a layer norm after the final linear layer;
    ``residual`` adds the input to the output and requires matching widths.
    """

    def __init__(self, in_dim: int, hidden: tuple, out_dim: int,
                 rng: np.random.Generator, out_norm: bool = False,
                 residual: bool = False, slope: float = 0.01):
        if residual and in_dim != out_dim:
            raise ValueError(
                f"residual MLP needs in_dim == out_dim, got {in_dim} vs {out_dim}")
        widths = [in_dim, *hidden, out_dim]
        self.layers = [Linear(widths[i], widths[i + 1], rng)
                       for i in range(len(widths) - 1)]
        self.norm = LayerNorm(out_dim) if out_norm else None
        self.residual = residual
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i != last:
                h = T.leaky_relu(h, self.slope)
        if self.norm is not None:
            h = self.norm(h)
        if self.residual:
            h = T.add(h, x)
        return h


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        fan = in_channels * kernel_size
        self.weight = T.parameter(
            glorot(rng, fan, out_channels, (out_channels, in_channels, kernel_size)))
        self.bias = T.parameter(np.zeros(out_channels, dtype=T.DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class ResidualTemporalConv(Module):
    """Per-node temporal convolution plus identity skip, on [N, C, T] input."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        self.conv = Conv1d(channels, channels, kernel_size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(self.conv(x), x)


def time_embedding(step: int, horizon: int, dim: int = 16,
                   dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Sinusoidal embedding of normalized time ``step / horizon``.

    ``dim`` must be even; half the channels are sines, half cosines, over a
    geometric frequency ladder. The slowest cosine is strictly monotone on
    [0, 1], which makes the embedding injective on the integer step grid.
    """
    if dim % 2 != 0:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    if not 0 <= step <= horizon:
        raise ValueError(f"step {step} outside horizon [0, {horizon}]")
    return time_embedding_grid(horizon, dim, dtype)[step]


def time_embedding_grid(horizon: int, dim: int = 16,
                        dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Embeddings for every step 0..horizon, shape [horizon + 1, dim]."""
    half = dim // 2
    tau = np.arange(horizon + 1, dtype=np.float64) / max(horizon, 1)
    ladder = np.pi * np.power(64.0, np.arange(half) / max(half - 1, 1))
    phase = tau[:, None] * ladder[None, :]
    out = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    return out.astype(dtype)
