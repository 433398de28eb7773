"""Graph data model and the core message-passing step on fixed topology.

A topology stores both directions of every undirected mesh edge, per-node
kind flags (deformable vs. external), and static per-edge features (rest
length plus edge-kind one-hot). It is built once and shared by every trial of
a dataset; the scatter plans for gathering and aggregating along edges are
precomputed here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from mango import tensor as T
from mango.backend import ScatterPlan
from mango.layers import Mlp
from mango.tensor import Tensor

logger = logging.getLogger(__name__)

NODE_DEFORMABLE = 0
NODE_EXTERNAL = 1

EDGE_MESH = 0
EDGE_WORLD = 1

EDGE_STATIC_DIM = 3  # rest length + one-hot(mesh, world)


class Topology:
    """Fixed connectivity shared across time and across trials of a task."""

    def __init__(self, num_deformable: int, num_external: int,
                 senders: np.ndarray, receivers: np.ndarray,
                 edge_static: np.ndarray):
        self.num_deformable = int(num_deformable)
        self.num_external = int(num_external)
        self.num_nodes = self.num_deformable + self.num_external
        self.senders = np.ascontiguousarray(senders, dtype=np.int64)
        self.receivers = np.ascontiguousarray(receivers, dtype=np.int64)
        if self.senders.shape != self.receivers.shape:
            raise ValueError("senders/receivers length mismatch")
        self.edge_static = np.ascontiguousarray(edge_static, dtype=np.float32)
        if self.edge_static.shape != (self.num_edges, EDGE_STATIC_DIM):
            raise ValueError(
                f"edge_static must be [{self.num_edges}, {EDGE_STATIC_DIM}], "
                f"got {self.edge_static.shape}")
        self.node_kind = np.concatenate([
            np.full(self.num_deformable, NODE_DEFORMABLE, dtype=np.int64),
            np.full(self.num_external, NODE_EXTERNAL, dtype=np.int64),
        ])
        self.sender_plan = ScatterPlan(self.senders, self.num_nodes)
        self.receiver_plan = ScatterPlan(self.receivers, self.num_nodes)
        isolated = int((self.receiver_plan.counts == 0).sum())
        if isolated:
            # their incoming aggregate is defined as the zero vector
            logger.warning("topology has %d isolated node(s)", isolated)

    @property
    def num_edges(self) -> int:
        return self.senders.size

    @classmethod
    def from_undirected(cls, num_deformable: int, num_external: int,
                        edges: np.ndarray, edge_kind: np.ndarray,
                        rest_length: np.ndarray) -> "Topology":
        """Expand undirected (a, b) pairs into both directed edges.

        Static features are shared between the two directions of an edge.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        senders = np.concatenate([edges[:, 0], edges[:, 1]])
        receivers = np.concatenate([edges[:, 1], edges[:, 0]])
        kind = np.concatenate([edge_kind, edge_kind]).astype(np.int64)
        rest = np.concatenate([rest_length, rest_length]).astype(np.float32)
        static = np.zeros((senders.size, EDGE_STATIC_DIM), dtype=np.float32)
        static[:, 0] = rest
        static[np.arange(senders.size), 1 + kind] = 1.0
        return cls(num_deformable, num_external, senders, receivers, static)

    def permuted(self, perm: np.ndarray) -> "Topology":
        """Topology after relabeling node i as perm[i] (testing helper).

        Only valid for permutations that keep the deformable/external split.
        """
        return Topology(self.num_deformable, self.num_external,
                        perm[self.senders], perm[self.receivers],
                        self.edge_static)


@dataclass
class GraphState:
    """Node and edge features, [..., N, d_node] and [..., E, d_edge]."""
    node_feats: Tensor
    edge_feats: Tensor


def message_passing_step(state: GraphState, topo: Topology, edge_mlp: Mlp,
                         node_mlp: Mlp, aggregation: str = "mean") -> GraphState:
    """One round of edge updates followed by aggregated node updates.

    Edge e=(v, w) is updated from (its feature, sender feature, receiver
    feature); each node then aggregates its incoming updated edges (mean by
    default) and is updated from (its feature, aggregate). Both updates carry
    residual connections. Leading axes (e.g. time) are broadcast: the same
    weights apply to every slice.
    """
    mv, me = state.node_feats, state.edge_feats
    sender_feats = T.gather_rows(mv, topo.sender_plan)
    receiver_feats = T.gather_rows(mv, topo.receiver_plan)
    edge_in = T.concat([me, sender_feats, receiver_feats], axis=-1)
    me_new = T.add(edge_mlp(edge_in), me)
    if aggregation == "mean":
        incoming = T.segment_mean(me_new, topo.receiver_plan)
    elif aggregation == "sum":
        incoming = T.segment_sum(me_new, topo.receiver_plan)
    elif aggregation == "max":
        incoming = T.segment_max(me_new, topo.receiver_plan)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    node_in = T.concat([mv, incoming], axis=-1)
    mv_new = T.add(node_mlp(node_in), mv)
    return GraphState(mv_new, me_new)


def relative_edge_positions(positions: Tensor, topo: Topology) -> Tensor:
    """Receiver minus sender position per directed edge.

    Accepts [N, d] or [T, N, d]; the result is translation invariant and
    antisymmetric under edge-direction reversal.
    """
    src = T.gather_rows(positions, topo.sender_plan)
    dst = T.gather_rows(positions, topo.receiver_plan)
    return T.sub(dst, src)
