"""Spatiotemporal context encoder.

A trial is flattened into per-node channel stacks over time (positions,
velocities, static features, node kind), centered by the mean initial
position for translation invariance, collapsed over time by a small 1D CNN
with mean pooling, collapsed over nodes by a deep set, and finally the
per-trial vectors are aggregated over the context set (elementwise max by
default) into one latent representation.

The encoder only ever sees context trials (whose full trajectories are
observed); it is never applied to the target trial's future.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from mango import tensor as T
from mango.data import Trial
from mango.layers import Conv1d, Mlp, Module
from mango.tensor import Tensor


def assemble_trial_tensor(trial: Trial) -> np.ndarray:
    """Per-node channel stack over time, [N_total, C_z, T+1].

    Channel layout: d position channels, d velocity channels, the static
    features replicated across time, and a node-kind indicator (0 deformable,
    1 external). Deformable nodes carry the observed trajectory; external
    nodes carry the known external-object trajectory.
    """
    n, d = trial.p0.shape
    n_total = trial.h.shape[0]
    n_ext = n_total - n
    t1 = trial.horizon + 1
    if trial.p_ext.shape[0] != t1:
        raise ValueError(
            f"external trajectory has {trial.p_ext.shape[0]} frames, expected {t1}")
    pos = np.concatenate([
        np.concatenate([trial.p0[None], trial.y_p], axis=0),   # [T+1, N, d]
        trial.p_ext,
    ], axis=1)                                                 # [T+1, N_total, d]
    vel = np.concatenate([
        np.concatenate([trial.v0[None], trial.y_v], axis=0),
        trial.v_ext,
    ], axis=1)
    kind = np.concatenate([np.zeros(n, dtype=np.float32),
                           np.ones(n_ext, dtype=np.float32)])
    channels = [
        pos.transpose(1, 2, 0),                                # [N_total, d, T+1]
        vel.transpose(1, 2, 0),
        np.repeat(trial.h[:, :, None], t1, axis=2),
        np.repeat(kind[:, None, None], t1, axis=2),
    ]
    return np.ascontiguousarray(np.concatenate(channels, axis=1), dtype=np.float32)


def center_positions(z: np.ndarray, dim: int) -> np.ndarray:
    """Shift all position channels by minus the mean initial position."""
    center = z[:, :dim, 0].mean(axis=0)
    out = z.copy()
    out[:, :dim, :] -= center[None, :, None]
    return out


def corrupt_context(trials, noise_sigma: float, dropout_frac: float,
                    rng: np.random.Generator):
    """Encoder-view corruption: position noise and deformable-node dropout.

    Gaussian noise of std ``noise_sigma`` (normalized units) is added to the
    observed deformable positions; a uniformly random subset of deformable
    nodes is removed from the encoder's view. Decoder targets are untouched
    because this returns new trial views.
    """
    if not 0.0 <= dropout_frac < 1.0:
        raise ValueError(f"dropout fraction must be in [0, 1), got {dropout_frac}")
    out = []
    for trial in trials:
        n = trial.num_deformable
        keep = n - int(round(dropout_frac * n))
        if keep < 1:
            raise ValueError("node dropout removed every deformable node")
        if keep < n:
            kept = np.sort(rng.choice(n, size=keep, replace=False))
        else:
            kept = np.arange(n)
        p0 = trial.p0[kept]
        y_p = trial.y_p[:, kept]
        if noise_sigma > 0.0:
            p0 = p0 + rng.normal(0.0, noise_sigma, p0.shape).astype(np.float32)
            y_p = y_p + rng.normal(0.0, noise_sigma, y_p.shape).astype(np.float32)
        out.append(dataclasses.replace(
            trial, p0=p0, y_p=y_p,
            v0=trial.v0[kept], y_v=trial.y_v[:, kept],
            h=np.concatenate([trial.h[kept], trial.h[n:]], axis=0)))
    return out


class ContextEncoder(Module):
    """1D CNN over time, deep set over nodes, max over context trials."""

    def __init__(self, dim: int, static_feat_dim: int, width: int,
                 latent_dim: int, rng: np.random.Generator,
                 kernel_size: int = 3, aggregation: str = "max"):
        if aggregation not in ("max", "mean"):
            raise ValueError(f"unknown context aggregation {aggregation!r}")
        channels = 2 * dim + static_feat_dim + 1
        self.conv_in = Conv1d(channels, width, kernel_size, rng)
        self.conv_hidden = Conv1d(width, width, kernel_size, rng)
        self.inner = Mlp(width, (width,), width, rng)
        self.outer = Mlp(width, (width,), latent_dim, rng)
        self.dim = dim
        self.latent_dim = latent_dim
        self.aggregation = aggregation

    def temporal_encode(self, z: Tensor) -> Tensor:
        """[N_total, C_z, T+1] -> one vector per node via convs + mean pool."""
        h = T.leaky_relu(self.conv_in(z))
        h = T.leaky_relu(self.conv_hidden(h))
        return T.reduce(h, axis=-1, mode="mean")

    def spatial_encode(self, node_codes: Tensor) -> Tensor:
        """Deep set over nodes: outer(mean_n inner(code_n))."""
        if node_codes.shape[0] < 1:
            raise ValueError("spatial encoding needs at least one node")
        pooled = T.reduce(self.inner(node_codes), axis=0, mode="mean")
        return self.outer(pooled)

    def encode_trial(self, trial: Trial) -> Tensor:
        z = center_positions(assemble_trial_tensor(trial), self.dim)
        return self.spatial_encode(self.temporal_encode(T.Tensor(z)))

    def __call__(self, trials) -> Tensor:
        """Aggregate a context set into the latent representation."""
        trials = list(trials)
        if not trials:
            raise ValueError("context set is empty; no unconditioned prior exists")
        per_trial = [T.reshape(self.encode_trial(t), (1, self.latent_dim))
                     for t in trials]
        if len(per_trial) == 1:
            return T.reshape(per_trial[0], (self.latent_dim,))
        stacked = T.concat(per_trial, axis=0)
        return T.reduce(stacked, axis=0, mode=self.aggregation)
