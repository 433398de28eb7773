"""Trajectory decoder and full simulator models.

The decoder maps (initial conditions, latent conditioning vector) to the
whole predicted trajectory in one forward pass: the initial graph is
replicated across the horizon, then K blocks alternate per-timestep message
passing (weights shared across time) with per-node residual temporal
convolution, and a displacement head adds per-step displacements to the
initial positions of the deformable nodes. Positions enter only through
relative edge features, so predictions are translation equivariant.

Conditioning variants share this decoder exactly and differ only in where
the conditioning vector comes from: an encoded context set, an embedding of
the true simulation parameters (oracle), an embedding of stage-one parameter
estimates (two-stage), or zeros (no context).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from mango import tensor as T
from mango.data import Trial, substream
from mango.encoder import ContextEncoder
from mango.graph import (EDGE_STATIC_DIM, GraphState, Topology,
                         message_passing_step, relative_edge_positions)
from mango.layers import Linear, Mlp, Module, ResidualTemporalConv, time_embedding_grid
from mango.tensor import Tensor

CHECKPOINT_MAGIC = b"MANGO1"
CHECKPOINT_VERSION = 1

KINDS = ("meta", "oracle", "no_context", "two_stage", "autoregressive")

_STREAM_INIT = 11


@dataclass
class ModelConfig:
    kind: str = "meta"
    dim: int = 2
    static_feat_dim: int = 1
    rho_dim: int = 1
    width: int = 128
    latent_dim: int = 128
    blocks: int = 15
    decoder_kernel: int = 7
    encoder_kernel: int = 3
    time_embed_dim: int = 16
    aggregation: str = "mean"
    context_aggregation: str = "max"
    layer_norm: bool = True
    seed: int = 0
    # per-component normalization ranges for rho, fixed from the training split
    rho_min: tuple = ()
    rho_max: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.rho_min = tuple(float(v) for v in self.rho_min)
        self.rho_max = tuple(float(v) for v in self.rho_max)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def normalize_rho(config: ModelConfig, rho: np.ndarray) -> np.ndarray:
    """Map rho to [0, 1] per component using the stored training ranges."""
    if not config.rho_min:
        raise ValueError("model config carries no rho normalization ranges")
    lo = np.asarray(config.rho_min, dtype=np.float32)
    hi = np.asarray(config.rho_max, dtype=np.float32)
    return (np.asarray(rho, dtype=np.float32) - lo) / np.maximum(hi - lo, 1e-12)


class MangoBlock(Module):
    """Per-timestep message passing followed by residual temporal mixing."""

    def __init__(self, width: int, kernel: int, rng, aggregation: str,
                 layer_norm: bool):
        self.edge_mlp = Mlp(3 * width, (width,), width, rng, out_norm=layer_norm)
        self.node_mlp = Mlp(2 * width, (width,), width, rng, out_norm=layer_norm)
        self.temporal = ResidualTemporalConv(width, kernel, rng)
        self.aggregation = aggregation

    def __call__(self, state: GraphState, topo: Topology) -> GraphState:
        state = message_passing_step(state, topo, self.edge_mlp, self.node_mlp,
                                     self.aggregation)
        mixed = T.transpose(state.node_feats, (1, 2, 0))   # [N, width, T]
        mixed = self.temporal(mixed)
        return GraphState(T.transpose(mixed, (2, 0, 1)), state.edge_feats)


class Simulator(Module):
    """Conditioned trajectory predictor; ``kind`` selects the conditioning."""

    def __init__(self, config: ModelConfig, topo: Topology):
        self.config = config
        self.topo = topo
        rng = substream(config.seed, _STREAM_INIT)
        w = config.width
        node_in = (config.latent_dim + config.static_feat_dim + 1
                   + config.dim + config.time_embed_dim)
        edge_in = EDGE_STATIC_DIM + config.dim + config.time_embed_dim
        self.node_proj = Linear(node_in, w, rng)
        self.edge_proj = Linear(edge_in, w, rng)
        self.blocks = [MangoBlock(w, config.decoder_kernel, rng,
                                  config.aggregation, config.layer_norm)
                       for _ in range(config.blocks)]
        self.head = Mlp(w, (w,), config.dim, rng)
        self.encoder = None
        self.rho_embed = None
        self.param_head = None
        if config.kind == "meta":
            self.encoder = ContextEncoder(
                config.dim, config.static_feat_dim, w, config.latent_dim, rng,
                kernel_size=config.encoder_kernel,
                aggregation=config.context_aggregation)
            self.param_head = Mlp(config.latent_dim, (w,), config.rho_dim, rng)
        elif config.kind == "two_stage":
            # stage one regresses normalized rho directly from the context
            self.encoder = ContextEncoder(
                config.dim, config.static_feat_dim, w, config.rho_dim, rng,
                kernel_size=config.encoder_kernel,
                aggregation=config.context_aggregation)
            self.rho_embed = Mlp(config.rho_dim, (w,), config.latent_dim, rng)
        elif config.kind == "oracle":
            self.rho_embed = Mlp(config.rho_dim, (w,), config.latent_dim, rng)

    # -- conditioning -----------------------------------------------------

    def condition(self, context=None, rho=None) -> Tensor:
        """Produce the conditioning vector for this model kind."""
        kind = self.config.kind
        if kind == "meta":
            if not context:
                raise ValueError("meta conditioning needs a context set")
            return self.encoder(context)
        if kind == "oracle":
            if rho is None:
                raise ValueError("oracle conditioning needs the true parameters")
            return self.rho_embed(Tensor(normalize_rho(self.config, rho)))
        if kind == "two_stage":
            if not context:
                raise ValueError("two-stage conditioning needs a context set")
            return self.rho_embed(self.encoder(context))
        if kind == "no_context":
            return Tensor(np.zeros(self.config.latent_dim, dtype=np.float32))
        raise ValueError(f"kind {kind!r} does not decode trajectories")

    def predict_parameters(self, latent: Tensor) -> Tensor:
        if self.param_head is None:
            raise ValueError(f"{self.config.kind!r} model has no parameter head")
        return self.param_head(latent)

    # -- decoding ----------------------------------------------------------

    def build_decoder_inputs(self, trial: Trial, latent: Tensor) -> GraphState:
        """Initial node/edge features for every predicted step.

        Deformable nodes repeat their initial position and velocity across
        time (their future is what is being predicted); external nodes use
        their known trajectory. Node features are (latent, static features,
        node kind, velocity, time embedding); edge features are (static edge
        features, relative position, time embedding). Absolute positions
        never enter node features.
        """
        cfg = self.config
        topo = self.topo
        horizon = trial.horizon
        if trial.p_ext.shape[0] != horizon + 1:
            raise ValueError("external trajectory does not cover the horizon")
        n, n_total = topo.num_deformable, topo.num_nodes

        pos = np.empty((horizon, n_total, cfg.dim), dtype=np.float32)
        pos[:, :n] = trial.p0[None]
        pos[:, n:] = trial.p_ext[1:]
        vel = np.empty_like(pos)
        vel[:, :n] = trial.v0[None]
        vel[:, n:] = trial.v_ext[1:]

        te = time_embedding_grid(horizon, cfg.time_embed_dim)[1:]  # [T, d_te]
        kind_col = (topo.node_kind == 1).astype(np.float32)[:, None]
        static = np.concatenate([trial.h, kind_col], axis=1)       # [N_total, d_h+1]
        node_const = np.concatenate([
            np.broadcast_to(static[None], (horizon, n_total, static.shape[1])),
            vel,
            np.broadcast_to(te[:, None, :], (horizon, n_total, cfg.time_embed_dim)),
        ], axis=-1)

        rel = relative_edge_positions(Tensor(pos), topo)
        edge_const = np.concatenate([
            np.broadcast_to(topo.edge_static[None],
                            (horizon,) + topo.edge_static.shape),
            rel.data,
            np.broadcast_to(te[:, None, :], (horizon, topo.num_edges,
                                             cfg.time_embed_dim)),
        ], axis=-1)

        tiled_latent = T.broadcast_to(
            T.reshape(latent, (1, 1, cfg.latent_dim)),
            (horizon, n_total, cfg.latent_dim))
        node_feats = self.node_proj(
            T.concat([tiled_latent, Tensor(node_const)], axis=-1))
        edge_feats = self.edge_proj(Tensor(np.ascontiguousarray(edge_const)))
        return GraphState(node_feats, edge_feats)

    def decode(self, trial: Trial, latent: Tensor) -> Tensor:
        """Predict deformable positions for frames 1..T in one forward pass."""
        state = self.build_decoder_inputs(trial, latent)
        for block in self.blocks:
            state = block(state, self.topo)
        deformable = state.node_feats[:, :self.topo.num_deformable, :]
        displacement = self.head(deformable)
        return T.add(displacement, Tensor(trial.p0[None]))


# ---------------------------------------------------------------------------
# checkpoint container


def _model_state(model: Module):
    params = list(model.parameters())
    names = [n for n, _ in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in model walk")
    return params


def save_model(model, path) -> None:
    """Versioned binary container: magic, config header, named f32 tensors."""
    config_json = model.config.to_json()
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "kind": model.config.kind,
        "config": json.loads(config_json),
        "config_digest": model.config.digest(),
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        params = _model_state(model)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            if not np.all(np.isfinite(p.data)):
                raise ValueError(f"refusing to save non-finite parameter {name}")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(np.asarray(p.data.shape, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_model(path, topo: Topology):
    """Rebuild the model named by the checkpoint and restore its weights."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header['version']}")
        config = ModelConfig(**header["config"])
        if config.digest() != header["config_digest"]:
            raise ValueError(f"{path}: config digest mismatch")
        if config.kind == "autoregressive":
            from mango.baselines import StepSimulator
            model = StepSimulator(config, topo)
        else:
            model = Simulator(config, topo)
        (count,) = struct.unpack("<I", fh.read(4))
        params = dict(_model_state(model))
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(np.frombuffer(fh.read(8 * ndim), dtype="<i8"))
            data = np.frombuffer(
                fh.read(4 * int(np.prod(shape)) if ndim else 4), dtype="<f4")
            if name not in params:
                raise ValueError(f"{path}: unexpected parameter {name}")
            if params[name].data.shape != shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            params[name].data = data.reshape(shape).copy()
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise ValueError(f"{path}: checkpoint missing parameters {sorted(missing)}")
    return model


def checkpoint_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()
