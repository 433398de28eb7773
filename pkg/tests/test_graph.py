"""Message passing: closed-form oracle, equivariance, relative positions."""

import numpy as np
import pytest

from mango import tensor as T
from mango.graph import GraphState, Topology, message_passing_step, relative_edge_positions
from mango.layers import Mlp


def rng(seed=0):
    return np.random.Generator(np.random.Philox(key=seed))


def path_topology():
    # 0 - 1 - 2
    return Topology.from_undirected(
        3, 0, np.array([[0, 1], [1, 2]]), np.zeros(2, dtype=np.int64),
        np.ones(2, dtype=np.float32))


def random_state(r, topo, d_node, d_edge, dtype=np.float32):
    return GraphState(
        T.Tensor(r.normal(size=(topo.num_nodes, d_node)).astype(dtype)),
        T.Tensor(r.normal(size=(topo.num_edges, d_edge)).astype(dtype)),
    )


def linear_mlps(r, d_node, d_edge):
    edge_mlp = Mlp(d_edge + 2 * d_node, (), d_edge, r)
    node_mlp = Mlp(d_node + d_edge, (), d_node, r)
    return edge_mlp, node_mlp


class TestMessagePassingStep:
    def test_zero_weights_leave_state_unchanged(self):
        topo = path_topology()
        r = rng(0)
        edge_mlp = Mlp(2 + 2 * 3, (4,), 2, r)
        node_mlp = Mlp(3 + 2, (4,), 3, r)
        for mlp in (edge_mlp, node_mlp):
            for name, p in mlp.parameters():
                if "gain" not in name:
                    p.data = np.zeros_like(p.data)
        state = random_state(rng(1), topo, 3, 2)
        out = message_passing_step(state, topo, edge_mlp, node_mlp)
        np.testing.assert_array_equal(out.node_feats.data, state.node_feats.data)
        np.testing.assert_array_equal(out.edge_feats.data, state.edge_feats.data)

    def test_hand_computed_single_step_on_path_graph(self):
        topo = path_topology()
        r = rng(2)
        d_node, d_edge = 3, 2
        edge_mlp, node_mlp = linear_mlps(r, d_node, d_edge)
        state = random_state(rng(3), topo, d_node, d_edge)
        out = message_passing_step(state, topo, edge_mlp, node_mlp)

        # independent closed form with explicit loops
        mv, me = state.node_feats.data, state.edge_feats.data
        we, be = edge_mlp.layers[0].weight.data, edge_mlp.layers[0].bias.data
        wv, bv = node_mlp.layers[0].weight.data, node_mlp.layers[0].bias.data
        me_new = np.zeros_like(me)
        for e in range(topo.num_edges):
            s, t = topo.senders[e], topo.receivers[e]
            feats = np.concatenate([me[e], mv[s], mv[t]])
            me_new[e] = me[e] + feats @ we + be
        mv_new = np.zeros_like(mv)
        for v in range(topo.num_nodes):
            incoming = [me_new[e] for e in range(topo.num_edges)
                        if topo.receivers[e] == v]
            agg = np.mean(incoming, axis=0) if incoming else np.zeros(d_edge)
            mv_new[v] = mv[v] + np.concatenate([mv[v], agg]) @ wv + bv

        np.testing.assert_allclose(out.edge_feats.data, me_new, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(out.node_feats.data, mv_new, rtol=1e-5, atol=1e-6)

    @pytest.mark.parametrize("aggregation", ["mean", "sum", "max"])
    def test_node_permutation_equivariance(self, aggregation):
        r = rng(4)
        edges = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [1, 3]])
        topo = Topology.from_undirected(4, 0, edges, np.zeros(5, dtype=np.int64),
                                        np.ones(5, dtype=np.float32))
        d_node, d_edge = 4, 3
        edge_mlp = Mlp(d_edge + 2 * d_node, (6,), d_edge, r)
        node_mlp = Mlp(d_node + d_edge, (6,), d_node, r)
        state = random_state(rng(5), topo, d_node, d_edge)
        out = message_passing_step(state, topo, edge_mlp, node_mlp, aggregation)

        perm = rng(6).permutation(4)
        permuted_topo = topo.permuted(perm)
        pv = np.empty_like(state.node_feats.data)
        pv[perm] = state.node_feats.data
        permuted_state = GraphState(T.Tensor(pv), state.edge_feats)
        out_p = message_passing_step(permuted_state, permuted_topo,
                                     edge_mlp, node_mlp, aggregation)
        expect = np.empty_like(out.node_feats.data)
        expect[perm] = out.node_feats.data
        np.testing.assert_allclose(out_p.node_feats.data, expect, atol=1e-6)

    def test_isolated_node_gets_zero_aggregate(self):
        # node 2 has no incoming edges at all
        topo = Topology(3, 0, np.array([0, 1]), np.array([1, 0]),
                        np.zeros((2, 3), dtype=np.float32))
        r = rng(7)
        edge_mlp, node_mlp = linear_mlps(r, 2, 2)
        state = random_state(rng(8), topo, 2, 2)
        out = message_passing_step(state, topo, edge_mlp, node_mlp)
        mv = state.node_feats.data
        wv, bv = node_mlp.layers[0].weight.data, node_mlp.layers[0].bias.data
        expect = mv[2] + np.concatenate([mv[2], np.zeros(2, dtype=np.float32)]) @ wv + bv
        np.testing.assert_allclose(out.node_feats.data[2], expect, rtol=1e-5)

    def test_stacked_steps_stay_finite(self):
        r = rng(9)
        edges = [[i, i + 1] for i in range(9)] + [[0, 5], [3, 8]]
        topo = Topology.from_undirected(10, 0, np.array(edges),
                                        np.zeros(11, dtype=np.int64),
                                        np.ones(11, dtype=np.float32))
        edge_mlp = Mlp(8 + 16, (8,), 8, r, out_norm=True)
        node_mlp = Mlp(8 + 8, (8,), 8, r, out_norm=True)
        state = random_state(rng(10), topo, 8, 8)
        for _ in range(15):
            state = message_passing_step(state, topo, edge_mlp, node_mlp)
        assert np.isfinite(state.node_feats.data).all()
        assert np.isfinite(state.edge_feats.data).all()

    def test_batched_time_axis_matches_per_slice(self):
        r = rng(11)
        topo = path_topology()
        edge_mlp, node_mlp = linear_mlps(r, 3, 2)
        nodes = rng(12).normal(size=(4, 3, 3)).astype(np.float32)
        edges = rng(13).normal(size=(4, 4, 2)).astype(np.float32)
        batched = message_passing_step(
            GraphState(T.Tensor(nodes), T.Tensor(edges)), topo, edge_mlp, node_mlp)
        for t in range(4):
            single = message_passing_step(
                GraphState(T.Tensor(nodes[t]), T.Tensor(edges[t])),
                topo, edge_mlp, node_mlp)
            np.testing.assert_allclose(batched.node_feats.data[t],
                                       single.node_feats.data, rtol=2e-5, atol=1e-6)

    def test_gradients_flow_through_step(self):
        r = rng(14)
        topo = path_topology()
        edge_mlp = Mlp(2 + 6, (4,), 2, r).cast(np.float64)
        node_mlp = Mlp(3 + 2, (4,), 3, r).cast(np.float64)
        state = random_state(rng(15), topo, 3, 2, dtype=np.float64)
        params = ([p for _, p in edge_mlp.parameters()]
                  + [p for _, p in node_mlp.parameters()])

        def loss():
            out = message_passing_step(state, topo, edge_mlp, node_mlp)
            both = T.concat([T.reshape(out.node_feats, (-1,)),
                             T.reshape(out.edge_feats, (-1,))], axis=0)
            return T.reduce(T.mul(both, both), mode="sum")

        assert T.grad_check(loss, params) < 1e-6


class TestRelativeEdgePositions:
    def test_translation_invariance(self):
        topo = path_topology()
        p = rng(16).normal(size=(3, 2)).astype(np.float32)
        a = relative_edge_positions(T.Tensor(p), topo).data
        b = relative_edge_positions(T.Tensor(p + 7.5), topo).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_zero_length_edge(self):
        topo = Topology(2, 0, np.array([0, 1]), np.array([1, 0]),
                        np.zeros((2, 3), dtype=np.float32))
        p = np.ones((2, 3), dtype=np.float32)
        out = relative_edge_positions(T.Tensor(p), topo).data
        np.testing.assert_array_equal(out, np.zeros((2, 3), dtype=np.float32))

    def test_matches_direct_subtraction(self):
        r = rng(17)
        edges = np.array([[0, 1], [1, 2], [0, 2]])
        topo = Topology.from_undirected(3, 0, edges, np.zeros(3, dtype=np.int64),
                                        np.ones(3, dtype=np.float32))
        p = r.normal(size=(3, 3)).astype(np.float32)
        out = relative_edge_positions(T.Tensor(p), topo).data
        for e in range(topo.num_edges):
            np.testing.assert_array_equal(
                out[e], p[topo.receivers[e]] - p[topo.senders[e]])

    def test_antisymmetric_under_reversal(self):
        r = rng(18)
        edges = np.array([[0, 1], [1, 2]])
        topo = Topology.from_undirected(3, 0, edges, np.zeros(2, dtype=np.int64),
                                        np.ones(2, dtype=np.float32))
        p = r.normal(size=(3, 2)).astype(np.float32)
        out = relative_edge_positions(T.Tensor(p), topo).data
        half = topo.num_edges // 2
        np.testing.assert_allclose(out[:half], -out[half:], atol=1e-7)
