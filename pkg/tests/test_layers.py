import math

import numpy as np
import pytest

from tscan import autodiff as ad
from tscan import layers as ly
from tscan.autodiff import ParamStore, ShapeError
from tscan.layers import LayerConfig, positional_encoding

from conftest import param_finite_diff


class TestLayerConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            LayerConfig(d_model=10, n_heads=3)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            LayerConfig(dropout_rate=1.0)

    def test_defaults(self):
        cfg = LayerConfig()
        assert (cfg.d_model, cfg.n_heads, cfg.d_ff) == (64, 4, 128)
        assert cfg.d_head == 16


class TestPositionalEncoding:
    def test_first_row_alternates_zero_one(self):
        table = positional_encoding(5, 8).numpy()
        np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1, 0, 1],
                                   atol=1e-15)

    def test_range(self):
        table = positional_encoding(50, 16).numpy()
        assert (table >= -1).all() and (table <= 1).all()

    def test_matches_scalar_loop_oracle(self):
        length, d_model = 12, 16
        table = positional_encoding(length, d_model).numpy()
        for p in range(length):
            for i in range(0, d_model, 2):
                angle = p / (10000.0 ** (i / d_model))
                assert table[p, i] == pytest.approx(math.sin(angle), abs=1e-12)
                assert table[p, i + 1] == pytest.approx(math.cos(angle),
                                                        abs=1e-12)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            positional_encoding(4, 7)

    def test_deterministic_not_trainable(self):
        a = positional_encoding(6, 8).numpy()
        b = positional_encoding(6, 8).numpy()
        assert (a == b).all()


def _identity_attention_store(cfg: LayerConfig, prefix: str = "attn") -> ParamStore:
    store = ParamStore()
    d = cfg.d_model
    for mat in ("wq", "wk", "wv", "wo"):
        store.register(f"{prefix}.{mat}", np.eye(d))
    store.register(f"{prefix}.ln.g", np.ones(d))
    store.register(f"{prefix}.ln.b", np.zeros(d))
    return store


def _random_msa_store(cfg, rng, prefix="msa"):
    store = ParamStore()
    ly.init_msa(store, prefix, cfg, rng)
    return store


class TestMsa:
    def test_single_token_identity_projections(self, rng):
        cfg = LayerConfig(d_model=4, n_heads=1, d_ff=4, dropout_rate=0.0)
        store = _identity_attention_store(cfg)
        x = rng.normal(size=(1, 4))
        out, weights = ly._attention(ad.constant(x), ad.constant(x),
                                     ad.constant(x), store, "attn", cfg,
                                     train=False, rng=None)
        np.testing.assert_allclose(weights.probs, [[[1.0]]], atol=1e-15)
        # one key, identity maps: the output row is the value row itself
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.0)
        store = _random_msa_store(cfg, rng)
        _, weights = ly.msa(ad.constant(rng.normal(size=(5, 8))), store, "msa",
                            cfg)
        np.testing.assert_allclose(weights.row_sums(), 1.0, atol=1e-6)
        assert weights.probs.shape == (2, 5, 5)

    def test_hand_computed_three_tokens(self):
        # 3 tokens, 1 head, d_model=2, fixed small weights; oracle below
        # recomputes scaled-dot-product attention with scalar loops.
        cfg = LayerConfig(d_model=2, n_heads=1, d_ff=2, dropout_rate=0.0)
        x = np.array([[0.1, 0.3], [-0.2, 0.5], [0.4, -0.1]])
        wq = np.array([[0.2, -0.1], [0.05, 0.3]])
        wk = np.array([[-0.3, 0.2], [0.1, 0.15]])
        wv = np.array([[0.5, 0.1], [-0.2, 0.4]])
        wo = np.array([[1.0, -0.5], [0.25, 0.75]])
        store = ParamStore()
        for name, mat in (("a.wq", wq), ("a.wk", wk), ("a.wv", wv), ("a.wo", wo)):
            store.register(name, mat)
        store.register("a.ln.g", np.ones(2))
        store.register("a.ln.b", np.zeros(2))
        out, weights = ly._attention(ad.constant(x), ad.constant(x),
                                     ad.constant(x), store, "a", cfg,
                                     train=False, rng=None)

        def matvec(m, v):
            return [sum(m[r][c] * v[r] for r in range(2)) for c in range(2)]

        q = [matvec(wq, row) for row in x]
        k = [matvec(wk, row) for row in x]
        v = [matvec(wv, row) for row in x]
        scale = 1.0 / math.sqrt(2.0)
        expected = []
        expected_probs = []
        for qi in q:
            logits = [scale * (qi[0] * kj[0] + qi[1] * kj[1]) for kj in k]
            m = max(logits)
            exps = [math.exp(z - m) for z in logits]
            s = sum(exps)
            probs = [e / s for e in exps]
            expected_probs.append(probs)
            ctx = [sum(p * vj[c] for p, vj in zip(probs, v)) for c in range(2)]
            expected.append(matvec(wo, ctx))
        np.testing.assert_allclose(weights.probs[0], expected_probs, atol=1e-12)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_width_mismatch(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.0)
        store = _random_msa_store(cfg, rng)
        with pytest.raises(ShapeError, match="width"):
            ly.msa(ad.constant(rng.normal(size=(5, 6))), store, "msa", cfg)

    def test_param_gradients(self, rng):
        cfg = LayerConfig(d_model=4, n_heads=2, d_ff=4, dropout_rate=0.0)
        store = _random_msa_store(cfg, rng)
        x = rng.normal(size=(3, 4))
        probe = rng.normal(size=(3, 4))

        def build():
            out, _ = ly.msa(ad.constant(x), store, "msa", cfg)
            return ad.sum(ad.mul(out, ad.constant(probe)))

        param_finite_diff(build, store)


class TestMca:
    def _store(self, cfg, rng):
        store = ParamStore()
        ly.init_mca(store, "mca", cfg, rng)
        return store

    def test_single_key_attends_fully(self, rng):
        cfg = LayerConfig(d_model=4, n_heads=2, d_ff=4, dropout_rate=0.0)
        store = self._store(cfg, rng)
        q = ad.constant(rng.normal(size=(3, 4)))
        kv = ad.constant(rng.normal(size=(1, 4)))
        _, weights = ly.mca(q, kv, kv, store, "mca", cfg)
        np.testing.assert_allclose(weights.probs, 1.0, atol=1e-12)

    def test_weight_shape(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=4, d_ff=8, dropout_rate=0.0)
        store = self._store(cfg, rng)
        q = ad.constant(rng.normal(size=(3, 8)))
        kv = ad.constant(rng.normal(size=(5, 8)))
        _, weights = ly.mca(q, kv, kv, store, "mca", cfg)
        assert weights.probs.shape == (4, 3, 5)

    def test_reduces_to_msa_on_shared_input(self, rng):
        cfg = LayerConfig(d_model=6, n_heads=2, d_ff=6, dropout_rate=0.0)
        rng_a = np.random.default_rng(7)
        msa_store = ParamStore()
        ly.init_msa(msa_store, "blk", cfg, rng_a)
        rng_b = np.random.default_rng(7)
        mca_store = ParamStore()
        ly.init_mca(mca_store, "blk", cfg, rng_b)
        x = ad.constant(rng.normal(size=(4, 6)))
        out_msa, w_msa = ly.msa(x, msa_store, "blk", cfg)
        out_mca, w_mca = ly.mca(x, x, x, mca_store, "blk", cfg)
        np.testing.assert_allclose(out_mca.data, out_msa.data, atol=1e-12)
        np.testing.assert_allclose(w_mca.probs, w_msa.probs, atol=1e-12)

    def test_kv_length_mismatch(self, rng):
        cfg = LayerConfig(d_model=4, n_heads=2, d_ff=4, dropout_rate=0.0)
        store = self._store(cfg, rng)
        q = ad.constant(rng.normal(size=(3, 4)))
        with pytest.raises(ShapeError, match="length"):
            ly.mca(q, ad.constant(rng.normal(size=(2, 4))),
                   ad.constant(rng.normal(size=(3, 4))), store, "mca", cfg)


class TestFfn:
    def _store(self, cfg, rng):
        store = ParamStore()
        ly.init_ffn(store, "ffn", cfg, rng)
        return store

    def test_zero_weights_leave_residual_path(self, rng):
        cfg = LayerConfig(d_model=6, n_heads=2, d_ff=4, dropout_rate=0.0)
        store = self._store(cfg, rng)
        for name in ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"):
            store.assign(name, np.zeros(store[name].shape))
        x = rng.normal(size=(3, 6))
        out = ly.ffn(ad.constant(x), store, "ffn", cfg)
        np.testing.assert_allclose(out.data,
                                   ad.layer_norm(ad.constant(x)).data,
                                   atol=1e-12)

    def test_shape_preserved(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=16, dropout_rate=0.0)
        store = self._store(cfg, rng)
        for length in (1, 4, 9):
            x = ad.constant(rng.normal(size=(length, 8)))
            assert ly.ffn(x, store, "ffn", cfg).shape == (length, 8)

    def test_gradients_vs_finite_differences(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.0)
        store = self._store(cfg, rng)
        x = rng.normal(size=(4, 8))
        probe = rng.normal(size=(4, 8))

        def build():
            return ad.sum(ad.mul(ly.ffn(ad.constant(x), store, "ffn", cfg),
                                 ad.constant(probe)))

        param_finite_diff(build, store)


class TestVMlp:
    def _store(self, cfg, rng):
        store = ParamStore()
        ly.init_v_mlp(store, "vmlp", cfg, rng)
        return store

    def test_output_width(self, rng):
        cfg = LayerConfig(d_model=6, n_heads=2, d_ff=10, dropout_rate=0.0)
        store = self._store(cfg, rng)
        q = ad.constant(rng.normal(size=(5, 6)))
        k = ad.constant(rng.normal(size=(5, 6)))
        assert ly.v_mlp(q, k, store, "vmlp", cfg).shape == (5, 6)

    def test_zero_inputs_zero_bias_give_zero(self, rng):
        cfg = LayerConfig(d_model=4, n_heads=2, d_ff=4, dropout_rate=0.0)
        store = self._store(cfg, rng)
        store.assign("vmlp.b1", np.zeros(4))
        store.assign("vmlp.b2", np.zeros(4))
        z = ad.constant(np.zeros((3, 4)))
        np.testing.assert_array_equal(ly.v_mlp(z, z, store, "vmlp", cfg).data,
                                      np.zeros((3, 4)))

    def test_gradient_reaches_both_inputs(self, rng):
        cfg = LayerConfig(d_model=4, n_heads=2, d_ff=6, dropout_rate=0.0)
        store = self._store(cfg, rng)
        q = ad.constant(rng.normal(size=(3, 4)))
        k = ad.constant(rng.normal(size=(3, 4)))
        ad.backward(ad.sum(ly.v_mlp(q, k, store, "vmlp", cfg)))
        assert q.grad is not None and np.abs(q.grad).max() > 0
        assert k.grad is not None and np.abs(k.grad).max() > 0

    def test_shape_mismatch(self, rng):
        cfg = LayerConfig(d_model=4, n_heads=2, d_ff=4, dropout_rate=0.0)
        store = self._store(cfg, rng)
        with pytest.raises(ShapeError):
            ly.v_mlp(ad.constant(np.zeros((3, 4))),
                     ad.constant(np.zeros((2, 4))), store, "vmlp", cfg)


class TestLayerProperties:
    def test_row_sums_all_modes(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=4, d_ff=8, dropout_rate=0.3)
        store = ParamStore()
        ly.init_msa(store, "msa", cfg, rng)
        for train in (False, True):
            _, weights = ly.msa(ad.constant(rng.normal(size=(6, 8))), store,
                                "msa", cfg, train=train,
                                rng=np.random.default_rng(0))
            np.testing.assert_allclose(weights.row_sums(), 1.0, atol=1e-6)

    def test_independent_evaluation_matches_isolated(self, rng):
        # layers hold no cross-call state: evaluating two samples in one
        # process equals evaluating each in isolation, bit for bit
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.0)
        store = _random_msa_store(cfg, rng)
        x1 = rng.normal(size=(4, 8))
        x2 = rng.normal(size=(4, 8))
        out1_pair, _ = ly.msa(ad.constant(x1), store, "msa", cfg)
        out2_pair, _ = ly.msa(ad.constant(x2), store, "msa", cfg)
        out1_solo, _ = ly.msa(ad.constant(x1), store, "msa", cfg)
        out2_solo, _ = ly.msa(ad.constant(x2), store, "msa", cfg)
        assert (out1_pair.data == out1_solo.data).all()
        assert (out2_pair.data == out2_solo.data).all()

    def test_zero_dropout_bit_deterministic(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.0)
        store = _random_msa_store(cfg, rng)
        x = rng.normal(size=(5, 8))
        a, _ = ly.msa(ad.constant(x), store, "msa", cfg, train=True,
                      rng=np.random.default_rng(0))
        b, _ = ly.msa(ad.constant(x), store, "msa", cfg, train=True,
                      rng=np.random.default_rng(99))
        assert (a.data == b.data).all()

    def test_dropout_train_mode_only(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.5)
        store = _random_msa_store(cfg, rng)
        x = rng.normal(size=(5, 8))
        eval_a, _ = ly.msa(ad.constant(x), store, "msa", cfg, train=False)
        eval_b, _ = ly.msa(ad.constant(x), store, "msa", cfg, train=False)
        assert (eval_a.data == eval_b.data).all()
        train_a, _ = ly.msa(ad.constant(x), store, "msa", cfg, train=True,
                            rng=np.random.default_rng(1))
        assert not (train_a.data == eval_a.data).all()

    def test_dropout_requires_rng(self, rng):
        cfg = LayerConfig(d_model=8, n_heads=2, d_ff=8, dropout_rate=0.5)
        store = _random_msa_store(cfg, rng)
        with pytest.raises(ValueError, match="rng"):
            ly.msa(ad.constant(rng.normal(size=(3, 8))), store, "msa", cfg,
                   train=True)
