"""Layer blocks: MLP contracts, residual temporal conv, time embeddings."""

import numpy as np
import pytest

from mango import tensor as T
from mango.layers import (Linear, Mlp, ResidualTemporalConv, time_embedding,
                          time_embedding_grid)


def rng(seed=0):
    return np.random.Generator(np.random.Philox(key=seed))


def zero_params(module):
    for _, p in module.parameters():
        p.data = np.zeros_like(p.data)


class TestMlp:
    def test_zero_weight_residual_is_identity(self):
        mlp = Mlp(4, (8,), 4, rng(0), residual=True)
        for name, p in mlp.parameters():
            if "gain" not in name:
                p.data = np.zeros_like(p.data)
        x = rng(1).normal(size=(5, 4)).astype(np.float32)
        out = mlp(T.Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_single_linear_layer_is_matmul_plus_bias(self):
        mlp = Mlp(3, (), 2, rng(2))
        x = rng(3).normal(size=(4, 3)).astype(np.float32)
        out = mlp(T.Tensor(x))
        expect = x @ mlp.layers[0].weight.data + mlp.layers[0].bias.data
        np.testing.assert_allclose(out.data, expect, rtol=1e-6)

    def test_residual_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Mlp(3, (8,), 4, rng(0), residual=True)

    def test_preserves_leading_axes(self):
        mlp = Mlp(3, (6,), 5, rng(4))
        x = rng(5).normal(size=(2, 7, 3)).astype(np.float32)
        out = mlp(T.Tensor(x))
        assert out.shape == (2, 7, 5)
        # each row transforms independently of its batch position
        row = mlp(T.Tensor(x[1, 3][None])).data[0]
        np.testing.assert_allclose(out.data[1, 3], row, rtol=1e-6)

    def test_gradient_at_toy_widths(self):
        r = rng(6)
        mlp = Mlp(3, (5,), 2, r, out_norm=True).cast(np.float64)
        x = T.Tensor(r.normal(size=(4, 3)))
        # random cotangent probe keeps gradients O(1) through the layer norm
        probe = T.Tensor(r.normal(size=(4, 2)))

        def loss():
            return T.reduce(T.mul(mlp(x), probe), mode="sum")

        assert T.grad_check(loss, [p for _, p in mlp.parameters()]) < 1e-4


class TestResidualTemporalConv:
    def test_zero_kernel_is_exact_identity(self):
        block = ResidualTemporalConv(3, 7, rng(7))
        zero_params(block)
        x = rng(8).normal(size=(4, 3, 9)).astype(np.float32)
        np.testing.assert_array_equal(block(T.Tensor(x)).data, x)

    def test_length_one_sequence(self):
        block = ResidualTemporalConv(2, 3, rng(9))
        x = rng(10).normal(size=(5, 2, 1)).astype(np.float32)
        out = block(T.Tensor(x)).data
        # only the center tap sees data; the padded taps see zeros
        center = block.conv.weight.data[:, :, 1]
        expect = x + (np.einsum("nct,oc->not", x, center)
                      + block.conv.bias.data[None, :, None])
        np.testing.assert_allclose(out, expect, rtol=1e-5, atol=1e-6)

    def test_gradient(self):
        r = rng(11)
        block = ResidualTemporalConv(2, 3, r).cast(np.float64)
        x = T.Tensor(r.normal(size=(2, 2, 5)))

        def loss():
            out = block(x)
            return T.reduce(T.mul(out, out), mode="sum")

        assert T.grad_check(loss, [p for _, p in block.parameters()]) < 1e-6


class TestTimeEmbedding:
    def test_step_zero(self):
        emb = time_embedding(0, 10, dim=8)
        np.testing.assert_allclose(emb[:4], 0.0, atol=1e-7)
        np.testing.assert_allclose(emb[4:], 1.0, atol=1e-7)

    def test_injective_on_integer_grid(self):
        grid = time_embedding_grid(50, dim=16)
        assert grid.shape == (51, 16)
        for i in range(51):
            for j in range(i + 1, 51):
                assert not np.allclose(grid[i], grid[j], atol=1e-9)

    def test_values_bounded(self):
        grid = time_embedding_grid(100, dim=16)
        assert np.all(np.abs(grid) <= 1.0 + 1e-6)

    def test_deterministic(self):
        a = time_embedding(7, 20, dim=12)
        b = time_embedding(7, 20, dim=12)
        np.testing.assert_array_equal(a, b)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            time_embedding(11, 10)
        with pytest.raises(ValueError):
            time_embedding(2, 10, dim=7)


class TestLinear:
    def test_gradient(self):
        r = rng(12)
        lin = Linear(4, 3, r).cast(np.float64)
        x = T.Tensor(r.normal(size=(6, 4)))

        def loss():
            out = lin(x)
            return T.reduce(T.mul(out, out), mode="sum")

        assert T.grad_check(loss, [lin.weight, lin.bias]) < 1e-6
