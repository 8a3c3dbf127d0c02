import numpy as np
import numpy.testing as npt
import pytest

from wisense import nn_core as nn
from wisense import tokenization as tok


def window_arrays(T=40, links=9, subs=30, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(T, links, subs)), rng.normal(size=(T, links, subs))


class TestBuildTokens:
    def test_default_shape_contract(self):
        amp, phase = window_arrays()
        tokens = tok.build_tokens(amp, phase, window_start=5)
        assert tokens.shape == (180, 60)

    def test_constant_input_identity_normalization(self):
        amp = np.full((20, 9, 30), 3.0)
        phase = np.zeros((20, 9, 30))
        tokens = tok.build_tokens(amp, phase, 0)
        assert (tokens == tokens[0]).all()

    def test_link_major_layout(self):
        """Token k = link*packets + offset; features = [amp | phase]."""
        amp, phase = window_arrays(T=25, links=3, subs=4, seed=2)
        tokens = tok.build_tokens(amp, phase, 5, window_packets=6)
        assert tokens.shape == (18, 8)
        for link in range(3):
            for off in range(6):
                k = link * 6 + off
                npt.assert_array_equal(tokens[k, :4], amp[5 + off, link])
                npt.assert_array_equal(tokens[k, 4:], phase[5 + off, link])

    def test_packet_permutation_permutes_rows_within_link_blocks(self):
        amp, phase = window_arrays(T=6, links=2, subs=3, seed=3)
        base = tok.build_tokens(amp, phase, 0, window_packets=6)
        perm = np.array([3, 1, 5, 0, 2, 4])
        permuted = tok.build_tokens(amp[perm], phase[perm], 0, window_packets=6)
        for link in range(2):
            block = slice(link * 6, (link + 1) * 6)
            npt.assert_array_equal(permuted[block], base[block][perm])

    def test_out_of_range_window_rejected(self):
        amp, phase = window_arrays(T=20)
        with pytest.raises(ValueError, match="out of range"):
            tok.build_tokens(amp, phase, 1)

    def test_shape_mismatch_rejected(self):
        amp, _ = window_arrays(T=20)
        with pytest.raises(ValueError, match="share shape"):
            tok.build_tokens(amp, amp[:, :, :5], 0)


class TestNormalizer:
    def test_fit_is_idempotent(self):
        amp, phase = window_arrays(seed=4)
        n1 = tok.FeatureNormalizer.fit(amp, phase)
        n2 = tok.FeatureNormalizer.fit(amp, phase)
        assert n1 == n2

    def test_normalized_halves_are_standardized(self):
        amp, phase = window_arrays(seed=5)
        amp, phase = amp * 7 + 3, phase * 0.01 - 2
        norm = tok.FeatureNormalizer.fit(amp, phase)
        a, p = norm.apply(amp, phase)
        npt.assert_allclose([a.mean(), p.mean()], 0.0, atol=1e-12)
        npt.assert_allclose([a.std(), p.std()], 1.0, atol=1e-12)

    def test_roundtrip_dict(self):
        n = tok.FeatureNormalizer(1.0, 2.0, 3.0, 4.0)
        assert tok.FeatureNormalizer.from_dict(n.to_dict()) == n


class TestProjection:
    def test_paper_width(self):
        raw = np.zeros((180, 60))
        rng = np.random.default_rng(0)
        w, b = rng.normal(size=(256, 60)), rng.normal(size=256)
        assert tok.project_tokens(raw, w, b).shape == (180, 256)

    def test_embedded_identity(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(180, 60))
        w = np.zeros((64, 60))
        w[:60, :60] = np.eye(60)
        out = tok.project_tokens(raw, w, np.zeros(64))
        npt.assert_array_equal(out[:, :60], raw)
        npt.assert_array_equal(out[:, 60:], 0.0)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(size=(7, 5))
        w, b = rng.normal(size=(4, 5)), rng.normal(size=4)
        out = tok.project_tokens(raw, w, b)
        expected = np.zeros((7, 4))
        for i in range(7):
            for j in range(4):
                acc = b[j]
                for k in range(5):
                    acc += raw[i, k] * w[j, k]
                expected[i, j] = acc
        npt.assert_allclose(out, expected, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="features"):
            tok.project_tokens(np.zeros((3, 6)), np.zeros((4, 5)), np.zeros(4))


class TestSte:
    def test_zero_table_is_identity(self):
        x = np.random.default_rng(3).normal(size=(180, 16))
        npt.assert_array_equal(tok.add_ste(x, np.zeros((180, 16))), x)

    def test_zero_tokens_give_table(self):
        table = np.random.default_rng(4).normal(size=(10, 8))
        npt.assert_array_equal(tok.add_ste(np.zeros((10, 8)), table), table)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="STE shape"):
            tok.add_ste(np.zeros((10, 8)), np.zeros((9, 8)))

    def test_ste_gradient_equals_token_gradient(self):
        """dL/dSTE == dL/dtokens at the same point (elementwise sum)."""
        rng = np.random.default_rng(5)
        ste = tok.SteTable(6, 4, rng, std=0.1)
        x = rng.normal(size=(6, 4))
        report = nn.gradient_check(ste, x, max_coords=None)
        assert report.passed(1e-4)
        ste.zero_grad()
        dy = rng.normal(size=(6, 4))
        ste.forward(x)
        dx = ste.backward(dy)
        npt.assert_array_equal(ste.table.grad, dx)

    def test_ste_batched_gradient_sums_over_batch(self):
        rng = np.random.default_rng(6)
        ste = tok.SteTable(5, 3, rng)
        x = rng.normal(size=(4, 5, 3))
        dy = rng.normal(size=(4, 5, 3))
        ste.forward(x)
        ste.zero_grad()
        ste.backward(dy)
        npt.assert_allclose(ste.table.grad, dy.sum(axis=0), atol=1e-12)
