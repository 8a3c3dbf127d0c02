import numpy as np
import numpy.testing as npt
import pytest

from wisense import nn_core as nn


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPointwise:
    def test_gelu_zero(self):
        assert nn.gelu(np.array(0.0)) == 0.0

    def test_gelu_matches_tanh_formula(self):
        x = rng().normal(size=64)
        c = np.sqrt(2 / np.pi)
        expected = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x**3)))
        npt.assert_allclose(nn.gelu(x), expected, rtol=0, atol=0)

    def test_softmax_rows_sum_to_one(self):
        x = rng(1).normal(size=(5, 9)) * 30
        s = nn.softmax(x).sum(axis=-1)
        npt.assert_allclose(s, 1.0, atol=1e-12)

    def test_layer_norm_constant_vector_is_zero_before_affine(self):
        ln = nn.LayerNorm(8)
        out = ln.forward(np.full((3, 8), 4.2))
        npt.assert_allclose(out, 0.0, atol=1e-10)


class TestLayerGradients:
    """Every layer against central finite differences (h=1e-5, 64-bit)."""

    @pytest.mark.parametrize("shape,build", [
        ((4, 6), lambda r: nn.Linear(6, 5, r)),
        ((2, 3, 6), lambda r: nn.Linear(6, 4, r)),
        ((3, 7), lambda r: nn.Gelu()),
        ((2, 4, 8), lambda r: nn.LayerNorm(8)),
        ((3, 5), lambda r: nn.Softmax()),
        ((2, 6, 12), lambda r: nn.MultiHeadAttention(12, 3, r)),
        ((2, 5, 12), lambda r: nn.MultiHeadAttention(12, 4, r, causal=True)),
        ((3, 10), lambda r: nn.FeedForward(10, 20, r)),
        ((2, 4, 12), lambda r: nn.TransformerBlock(12, 2, 24, r)),
        ((1, 6, 12), lambda r: nn.TransformerBlock(12, 4, 24, r, causal=True)),
    ])
    def test_layer_passes_fd_check(self, shape, build):
        r = rng(7)
        module = build(r)
        x = r.normal(size=shape)
        report = nn.gradient_check(module, x, h=1e-5, max_coords=120)
        assert report.passed(1e-4), f"worst {report.worst}: {report.max_rel_error}"

    def test_embedding_gradient(self):
        r = rng(3)
        emb = nn.Embedding(9, 5, r, std=0.5)
        idx = np.array([1, 4, 1, 8])
        y = emb.forward(idx)
        c = r.normal(size=y.shape)
        emb.zero_grad()
        emb.backward(c)

        def loss_fn():
            return float(np.sum(c * emb.forward(idx)))

        report = nn.finite_diff_check(
            loss_fn, {"table": emb.table.value}, {"table": emb.table.grad}
        )
        assert report.passed(1e-4)

    def test_embedding_rejects_out_of_range(self):
        emb = nn.Embedding(4, 3, rng())
        with pytest.raises(ValueError, match="out of range"):
            emb.forward(np.array([0, 4]))

    def test_attention_requires_divisible_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            nn.MultiHeadAttention(10, 3, rng())

    def test_linear_shape_mismatch(self):
        lin = nn.Linear(6, 4, rng())
        with pytest.raises(ValueError, match="last dim"):
            lin.forward(np.zeros((2, 5)))


class TestCausality:
    def test_causal_attention_ignores_future_positions(self):
        r = rng(11)
        attn = nn.MultiHeadAttention(8, 2, r, causal=True)
        x = r.normal(size=(6, 8))
        y = attn.forward(x)
        x2 = x.copy()
        x2[4:] += r.normal(size=(2, 8)) * 10
        y2 = attn.forward(x2)
        npt.assert_array_equal(y[:4], y2[:4])

    def test_causal_block_ignores_future_positions(self):
        r = rng(12)
        blk = nn.TransformerBlock(8, 2, 16, r, causal=True)
        x = r.normal(size=(5, 8))
        y = blk.forward(x)
        x2 = x.copy()
        x2[3:] = 99.0
        y2 = blk.forward(x2)
        npt.assert_array_equal(y[:3], y2[:3])

    def test_forward_is_deterministic(self):
        r = rng(13)
        blk = nn.TransformerBlock(12, 3, 24, r)
        x = r.normal(size=(2, 7, 12))
        npt.assert_array_equal(blk.forward(x), blk.forward(x))


class TestCrossEntropy:
    def test_uniform_logits_give_log_v(self):
        loss, _ = nn.cross_entropy(np.zeros((5, 8)), np.arange(5))
        npt.assert_allclose(loss, np.log(8), atol=1e-12)

    def test_huge_margin_drives_loss_to_zero(self):
        logits = np.zeros((3, 6))
        targets = np.array([1, 2, 3])
        logits[np.arange(3), targets] = 1e4
        loss, _ = nn.cross_entropy(logits, targets)
        assert loss < 1e-12

    def test_matches_explicit_softmax_log_oracle(self):
        r = rng(5)
        logits = r.normal(size=(7, 11)) * 3
        targets = r.integers(0, 11, size=7)
        loss, _ = nn.cross_entropy(logits, targets)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.mean([np.log(p[i, targets[i]]) for i in range(7)])
        npt.assert_allclose(loss, expected, atol=1e-10)

    def test_gradient_matches_finite_differences(self):
        r = rng(6)
        logits = r.normal(size=(4, 5))
        targets = np.array([0, 3, -100, 2])
        _, dlogits = nn.cross_entropy(logits, targets)

        def loss_fn():
            return nn.cross_entropy(logits, targets)[0]

        report = nn.finite_diff_check(loss_fn, {"logits": logits}, {"logits": dlogits})
        assert report.passed(1e-4)

    def test_ignore_index_rows_have_zero_gradient(self):
        logits = rng(8).normal(size=(3, 4))
        _, dlogits = nn.cross_entropy(logits, np.array([1, -100, 2]))
        npt.assert_array_equal(dlogits[1], 0.0)

    def test_out_of_range_target_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            nn.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = nn.Param(np.array([1.0, -2.0]))
        opt = nn.Adam({"p": p}, lr=0.1)
        before = p.value.copy()
        opt.step()
        npt.assert_array_equal(p.value, before)

    def test_one_step_descends_on_quadratic(self):
        p = nn.Param(np.array([1.0]))
        opt = nn.Adam({"p": p}, lr=0.1)
        p.grad[:] = 2.0 * p.value  # d/dx x^2
        opt.step()
        assert p.value[0] < 1.0

    def test_converges_on_2d_quadratic(self):
        p = nn.Param(np.array([3.0, -2.0]))
        opt = nn.Adam({"p": p}, lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            p.grad[:] = 2.0 * p.value
            opt.step()
        loss = float(np.sum(p.value**2))
        assert loss < 1e-6


class TestModuleRegistry:
    def test_named_params_are_slash_joined(self):
        blk = nn.TransformerBlock(8, 2, 16, rng())
        names = set(blk.named_params())
        assert "attn/wq/w" in names
        assert "ffn/lin1/b" in names
        assert "ln1/gamma" in names

    def test_zero_grad_clears_all(self):
        blk = nn.TransformerBlock(8, 2, 16, rng())
        x = rng(1).normal(size=(3, 8))
        blk.backward(np.ones_like(blk.forward(x)))
        blk.zero_grad()
        assert all(
            np.all(p.grad == 0) for p in blk.named_params().values()
        )
