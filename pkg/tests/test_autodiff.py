import numpy as np
import pytest

from matcha import autodiff as ad


def numeric_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    out = g.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * h)
    return g


def check_unary(op_builder, x, rtol=1e-6):
    v = ad.Var(x, requires_grad=True)
    y = op_builder(v)
    loss = ad.vsum(ad.mul(y, y))
    ad.backward(loss)

    def scalar(arr):
        return float(ad.vsum(ad.mul(op_builder(ad.Var(arr)), op_builder(ad.Var(arr)))).value)

    num = numeric_grad(scalar, x)
    assert np.allclose(v.grad, num, rtol=rtol, atol=1e-8), (
        f"max err {np.abs(v.grad - num).max()}"
    )


class TestOps:
    rng = np.random.default_rng(0)

    def test_add_mul_broadcast(self):
        a = ad.Var(self.rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Var(self.rng.normal(size=(4,)), requires_grad=True)
        loss = ad.vsum(ad.mul(ad.add(a, b), ad.add(a, b)))
        ad.backward(loss)
        assert a.grad.shape == (3, 4)
        assert b.grad.shape == (4,)
        assert np.allclose(b.grad, (2 * (a.value + b.value)).sum(axis=0))

    def test_matmul_2d(self):
        w = ad.Var(self.rng.normal(size=(4, 2)))
        check_unary(lambda v: ad.matmul(v, w), self.rng.normal(size=(3, 4)))

    def test_matmul_batched(self):
        w = ad.Var(self.rng.normal(size=(2, 4, 3)))
        check_unary(lambda v: ad.matmul(v, w), self.rng.normal(size=(2, 5, 4)))

    def test_softmax(self):
        check_unary(lambda v: ad.softmax(v, axis=-1), self.rng.normal(size=(4, 6)))

    def test_logsumexp(self):
        check_unary(lambda v: ad.logsumexp(v, axis=1), self.rng.normal(size=(3, 5)))

    def test_gelu(self):
        check_unary(ad.gelu, self.rng.normal(size=(4, 4)) * 2)

    def test_exp_log_sqrt_tanh(self):
        x = np.abs(self.rng.normal(size=(3, 3))) + 0.5
        check_unary(ad.exp, x)
        check_unary(ad.log, x)
        check_unary(ad.sqrt, x)
        check_unary(ad.tanh, x)

    def test_reshape_transpose_concat_take(self):
        def build(v):
            r = ad.reshape(v, (2, 6))
            t = ad.transpose(r, (1, 0))
            c = ad.concat([t, t], axis=1)
            return c[1:4, :]

        check_unary(build, self.rng.normal(size=(3, 4)))

    def test_diag(self):
        check_unary(ad.diag2d, self.rng.normal(size=(4, 4)))

    def test_normalize_rows(self):
        check_unary(ad.normalize_rows, self.rng.normal(size=(5, 3)) + 0.2)

    def test_bilinear_gather(self):
        xs = np.array([0.3, 1.7, 2.0])
        ys = np.array([0.0, 1.2, 1.0])
        check_unary(lambda v: ad.bilinear_gather(v, xs, ys),
                    self.rng.normal(size=(3, 3, 2)))

    def test_maximum_scalar(self):
        x = self.rng.normal(size=(4,)) * 2
        x = x[np.abs(x - 0.5) > 0.1]  # stay away from the kink
        check_unary(lambda v: ad.maximum_scalar(v, 0.5), x)


class TestEngine:
    def test_constant_graphs_build_no_tape(self):
        a = ad.Var(np.ones((2, 2)))
        out = ad.add(ad.matmul(a, a), 1.0)
        assert not out.requires_grad
        assert out._vjp is None

    def test_reused_node_accumulates(self):
        x = ad.Var(np.array(3.0), requires_grad=True)
        y = ad.mul(x, x)  # x appears twice
        ad.backward(y)
        assert np.allclose(x.grad, 6.0)

    def test_backward_needs_scalar(self):
        x = ad.Var(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.mul(x, 2.0))

    def test_deep_chain_iterative_topo(self):
        x = ad.Var(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = ad.add(y, 1.0)
        ad.backward(y)
        assert np.allclose(x.grad, 1.0)

    def test_attention_rows_sum_to_one(self):
        from matcha.fusion import FusionConfig, FusionParams, TokenMatrix, multi_head_attention

        cfg = FusionConfig(num_blocks=1, hidden_dim=8, num_heads=2, patch_size=1,
                           out_dim_geometric=2, out_dim_semantic=4,
                           in_dim_semantic=4, in_dim_geometric=4, dino_dim=8)
        params = FusionParams.initialize(cfg, seed=0)
        rng = np.random.default_rng(1)
        tokens = TokenMatrix(rng.normal(size=(6, 8)), 2, 3)
        _, weights = multi_head_attention(
            tokens, tokens, params.attention_weights(0, "self_geo"),
            cfg.num_heads, return_weights=True,
        )
        assert weights.shape == (2, 6, 6)
        assert (weights >= 0).all()
        assert np.abs(weights.sum(axis=-1) - 1.0).max() < 1e-9
