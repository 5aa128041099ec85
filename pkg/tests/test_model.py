import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rerank import model as M
from rerank.errors import NumericError, StateError
from rerank.tokenizer import Batch
from tests.oracles import central_difference

CFG = M.ModelConfig(num_layers=2, num_heads=2, hidden=16, ffn=32, vocab_size=40, seed=3)


def random_batch(rng, n=4, t=12, vocab=40, ragged=True):
    tok = rng.integers(4, vocab, size=(n, t))
    seg = np.zeros((n, t), dtype=np.int64)
    mask = np.ones((n, t), dtype=np.int64)
    for i in range(n):
        length = int(rng.integers(4, t + 1)) if ragged else t
        split = int(rng.integers(1, length - 1))
        seg[i, split:length] = 1
        mask[i, length:] = 0
        tok[i, length:] = 0
        seg[i, length:] = 0
    return Batch(tok, seg, mask)


def perturbed(config, scale=0.3, seed=0):
    rng = np.random.default_rng(seed)
    params = M.init_params(config)
    return {k: v + rng.normal(0, scale, v.shape) for k, v in params.items()}


class TestConfigAndInit:
    def test_indivisible_heads(self):
        with pytest.raises(ValueError):
            M.ModelConfig(hidden=33, num_heads=4)

    def test_bad_dropout(self):
        with pytest.raises(ValueError):
            M.ModelConfig(dropout=1.0)

    def test_deterministic(self):
        a, b = M.init_params(CFG), M.init_params(CFG)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_layout(self):
        p = M.init_params(CFG)
        assert {k: v.shape for k, v in p.items()} == M.param_shapes(CFG)
        assert not p["head.w"].any() and not p["head.b"].any()
        assert np.all(p["layer0.ln1_scale"] == 1) and not p["layer0.bq"].any()
        w = p["layer1.w1"]
        assert np.abs(w).max() <= 2 * M.INIT_STD
        assert abs(w.std() - M.INIT_STD * 0.88) < 0.004  # std of a 2-sigma truncated normal

    def test_zero_head_gives_half(self):
        probs, _ = M.forward(M.init_params(CFG), random_batch(np.random.default_rng(0)), CFG)
        assert np.all(probs == 0.5)

    def test_decay_groups(self):
        assert M.is_decayed("layer0.wq") and M.is_decayed("emb.token") and M.is_decayed("head.w")
        assert not M.is_decayed("layer0.bq") and not M.is_decayed("head.b")
        assert not M.is_decayed("layer1.ln2_scale") and not M.is_decayed("emb.ln_shift")


class TestPrimitives:
    def test_softmax_symmetric(self):
        assert M.softmax([0.0, 0.0]).tolist() == [0.5, 0.5]

    def test_softmax_stable(self):
        out = M.softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] < 1e-300

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-1e3, 1e3))
    def test_softmax_properties(self, v, c):
        out = M.softmax(v)
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(M.softmax(np.asarray(v) + c), out, rtol=1e-9, atol=1e-15)

    def test_layer_norm_constant(self):
        assert np.all(M.layer_norm(np.full(5, 3.0), 1.0, 0.0) == 0.0)

    def test_layer_norm_hand(self):
        np.testing.assert_allclose(M.layer_norm([1.0, -1.0], 1.0, 0.0), [1.0, -1.0], atol=1e-11)

    def test_layer_norm_moments(self):
        x = np.random.default_rng(1).normal(3, 5, size=64)
        y = M.layer_norm(x, 1.0, 0.0)
        assert abs(y.mean()) < 1e-12 and abs(y.var() - 1) < 1e-9


class TestAttention:
    def _saved(self, x, params, mask):
        _, saved = M._attention_fwd(x, params, "layer0.", mask, CFG.num_heads, M._Dropout(0.0, None))
        return saved

    def test_uniform_when_logits_equal(self):
        params = M.init_params(CFG)
        params["layer0.wq"][:] = 0
        params["layer0.wk"][:] = 0
        x = np.random.default_rng(0).normal(size=(1, 6, 16))
        mask = np.array([[1, 1, 1, 1, 0, 0]])
        probs = self._saved(x, params, mask)[4]
        np.testing.assert_allclose(probs[..., :4], 0.25, atol=1e-15)
        assert np.all(probs[..., 4:] == 0)

    def test_only_first_key_visible(self):
        params = perturbed(CFG)
        x = np.random.default_rng(0).normal(size=(2, 5, 16))
        mask = np.array([[1, 0, 0, 0, 0]] * 2)
        _, _, _, v, _, _, ctx, _ = self._saved(x, params, mask)
        expected = M._merge_heads(np.broadcast_to(v[:, :, :1], v.shape))
        np.testing.assert_allclose(ctx, expected, atol=1e-12)

    def test_shape(self):
        x = np.random.default_rng(0).normal(size=(3, 7, 16))
        out = M.attention_layer(x, perturbed(CFG), np.ones((3, 7)), CFG.num_heads)
        assert out.shape == x.shape


class TestForward:
    def test_shapes_and_range(self):
        batch = random_batch(np.random.default_rng(1), n=5)
        probs, cache = M.forward(perturbed(CFG), batch, CFG)
        assert probs.shape == (5,) and np.all((probs > 0) & (probs < 1)) and cache is None

    def test_infer_deterministic(self):
        batch = random_batch(np.random.default_rng(1))
        p = perturbed(CFG)
        assert np.array_equal(M.predict(p, batch, CFG), M.predict(p, batch, CFG))

    def test_dropout_only_in_train(self):
        batch = random_batch(np.random.default_rng(1))
        p = perturbed(CFG)
        a, cache = M.forward(p, batch, CFG, "train", dropout_key=(0, 1))
        b, _ = M.forward(p, batch, CFG, "train", dropout_key=(0, 1))
        c, _ = M.forward(p, batch, CFG, "train", dropout_key=(0, 2))
        assert cache is not None
        assert np.array_equal(a, b) and not np.array_equal(a, c)
        assert not np.array_equal(a, M.predict(p, batch, CFG))

    def test_padding_invariance(self):
        rng = np.random.default_rng(2)
        batch = random_batch(rng, ragged=True)
        p = perturbed(CFG)
        extra = 9
        padded = Batch(*(np.pad(a, ((0, 0), (0, extra))) for a in
                         (batch.token_ids, batch.segment_ids, batch.mask)))
        np.testing.assert_allclose(M.predict(p, padded, CFG), M.predict(p, batch, CFG),
                                   atol=1e-10, rtol=0)

    def test_padding_token_content_ignored(self):
        rng = np.random.default_rng(3)
        batch = random_batch(rng)
        noisy = batch.token_ids.copy()
        noisy[batch.mask == 0] = rng.integers(4, 40, size=int((batch.mask == 0).sum()))
        p = perturbed(CFG)
        np.testing.assert_allclose(M.predict(p, Batch(noisy, batch.segment_ids, batch.mask), CFG),
                                   M.predict(p, batch, CFG), atol=1e-10, rtol=0)

    def test_batch_permutation(self):
        batch = random_batch(np.random.default_rng(4), n=6)
        perm = np.random.default_rng(5).permutation(6)
        p = perturbed(CFG)
        shuffled = Batch(batch.token_ids[perm], batch.segment_ids[perm], batch.mask[perm])
        np.testing.assert_allclose(M.predict(p, shuffled, CFG), M.predict(p, batch, CFG)[perm],
                                   atol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_layer(self):
        p = perturbed(CFG)
        p["layer1.w1"][0, 0] = np.inf
        with pytest.raises(NumericError, match="layer 1"):
            M.predict(p, random_batch(np.random.default_rng(0)), CFG)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            M.forward(perturbed(CFG), random_batch(np.random.default_rng(0)), CFG, "eval")


class TestBackward:
    def test_requires_cache(self):
        with pytest.raises(StateError):
            M.backward(M.init_params(CFG), None, [1.0], CFG)

    def test_head_bias_is_p_minus_y(self):
        p = perturbed(CFG)
        batch = random_batch(np.random.default_rng(0), n=1)
        for y in (0.0, 1.0):
            probs, cache = M.forward(p, batch, CFG, "train")
            g = M.backward(p, cache, [y], CFG)
            diff = probs[0] - y
            np.testing.assert_allclose(g["head.b"], [-diff, diff], atol=1e-15)

    def test_unused_rows_zero(self):
        p = perturbed(CFG)
        batch = random_batch(np.random.default_rng(0))
        _, cache = M.forward(p, batch, CFG, "train")
        g = M.backward(p, cache, np.ones(len(batch)), CFG)
        used = set(batch.token_ids.ravel().tolist())
        for row in range(CFG.vocab_size):
            if row not in used:
                assert not g["emb.token"][row].any()
        assert not g["emb.position"][batch.token_ids.shape[1]:].any()

    def test_clamped_examples_have_no_gradient(self):
        p = perturbed(CFG)
        batch = random_batch(np.random.default_rng(0), n=2)
        p["head.b"][:] = [-40.0, 40.0]
        probs, cache = M.forward(p, batch, CFG, "train")
        assert np.all(probs > 1 - M.PROB_CLAMP)
        g = M.backward(p, cache, [1.0, 1.0], CFG)
        assert all(not v.any() for v in g.values())

    def test_shapes(self):
        p = perturbed(CFG)
        _, cache = M.forward(p, random_batch(np.random.default_rng(0)), CFG, "train", (1, 1))
        g = M.backward(p, cache, [1, 0, 1, 0], CFG)
        assert {k: v.shape for k, v in g.items()} == {k: v.shape for k, v in p.items()}

    def test_finite_differences_small(self):
        cfg = M.ModelConfig(num_layers=1, num_heads=2, hidden=8, ffn=12, vocab_size=20,
                            max_positions=16, dropout=0.1, seed=0)
        rng = np.random.default_rng(7)
        p = perturbed(cfg)
        batch = random_batch(rng, n=3, t=10, vocab=20)
        labels = np.array([1.0, 0.0, 1.0])
        key = (5, 9)

        def loss():
            probs, _ = M.forward(p, batch, cfg, "train", key)
            s = np.clip(probs, M.PROB_CLAMP, 1 - M.PROB_CLAMP)
            return -(labels * np.log(s) + (1 - labels) * np.log(1 - s)).sum()

        _, cache = M.forward(p, batch, cfg, "train", key)
        grads = M.backward(p, cache, labels, cfg)
        for name in p:
            for idx in np.ndindex(p[name].shape):
                fd = central_difference(loss, p[name], idx)
                an = grads[name][idx]
                scale = max(abs(fd), abs(an))
                if scale < 1e-7:
                    assert abs(fd - an) < 1e-9, (name, idx)
                else:
                    assert abs(fd - an) / scale < 1e-4, (name, idx, fd, an)


def test_checkpoint_round_trip(tmp_path):
    p = perturbed(CFG)
    M.save_checkpoint(p, CFG, tmp_path / "a.ckpt")
    back, cfg = M.load_checkpoint(tmp_path / "a.ckpt")
    assert cfg == CFG
    assert all(np.array_equal(back[k], p[k]) for k in p)
    M.save_checkpoint(back, cfg, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        M.load_checkpoint(tmp_path / "x")
