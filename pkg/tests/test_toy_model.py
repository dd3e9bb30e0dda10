import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pivotsteer.toy_model import (
    BOS,
    EOS,
    LayerHook,
    Model,
    ModelConfig,
    build_model,
    detokenize,
    tokenize,
)

SMALL = ModelConfig(n_layers=3, d_model=32, n_heads=4, d_ff=64, max_seq=64, seed=5)


@pytest.fixture(scope="module")
def model():
    return build_model(SMALL)


@pytest.fixture(scope="module")
def encoder():
    return build_model(ModelConfig(n_layers=2, d_model=32, n_heads=2, d_ff=64, max_seq=64,
                                   seed=9, kind="encoder"))


def zero_hooks(n_layers, d):
    return [LayerHook(l, lambda h, v=np.zeros(d): h + v) for l in range(n_layers)]


class TestBuild:
    def test_deterministic(self):
        assert build_model(SMALL).checksum == build_model(SMALL).checksum

    def test_seed_sensitivity(self):
        other = ModelConfig(**{**SMALL.__dict__, "seed": 6})
        assert build_model(SMALL).checksum != build_model(other).checksum

    def test_head_dim(self):
        assert ModelConfig(d_model=64, n_heads=4).head_dim == 16

    @pytest.mark.parametrize("bad", [
        dict(d_model=30, n_heads=4), dict(n_layers=0), dict(max_seq=1), dict(kind="bert"),
    ])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            build_model(ModelConfig(**{**SMALL.__dict__, **bad}))

    def test_checkpoint_round_trip(self, model, tmp_path):
        path = tmp_path / "m.npz"
        model.save(path)
        loaded = Model.load(path)
        assert loaded.config == model.config
        assert loaded.checksum == model.checksum
        for k in model.weights:
            assert np.array_equal(loaded.weights[k], model.weights[k])


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == [BOS, EOS]

    def test_bytes(self):
        assert tokenize("ab") == [BOS, 97, 98, EOS]

    @given(st.text())
    def test_round_trip(self, s):
        assert detokenize(tokenize(s)) == s


class TestForward:
    def test_shapes(self, model):
        tr = model.forward(tokenize("hello"))
        assert tr.logits.shape == (7, 260)
        assert len(tr.hidden_states) == 3
        assert tr.pooled is None

    def test_zero_hooks_bitwise(self, model):
        toks = tokenize("steer me")
        a = model.forward(toks)
        b = model.forward(toks, zero_hooks(3, 32))
        assert np.array_equal(a.logits, b.logits)

    def test_identity_hook(self, model):
        toks = tokenize("steer me")
        b = model.forward(toks, [LayerHook(1, lambda h: h)])
        assert np.array_equal(model.forward(toks).logits, b.logits)

    def test_large_constant_changes_argmax(self, model):
        toks = tokenize("the cat sat")
        base = model.forward(toks).logits[-1].argmax()
        v = np.random.default_rng(0).standard_normal(32) * 100
        steered = model.forward(toks, [LayerHook(1, lambda h: h + v)]).logits[-1].argmax()
        assert base != steered

    def test_hook_locality(self, model):
        toks = tokenize("locality")
        a = model.forward(toks)
        b = model.forward(toks, [LayerHook(2, lambda h: h + 5.0)])
        for l in range(2):
            assert np.array_equal(a.hidden_states[l], b.hidden_states[l])
        assert not np.array_equal(a.hidden_states[2], b.hidden_states[2])

    def test_hidden_states_record_post_hook(self, model):
        toks = tokenize("x")
        a = model.forward(toks)
        b = model.forward(toks, [LayerHook(0, lambda h: h + 1.0)])
        np.testing.assert_allclose(b.hidden_states[0], a.hidden_states[0] + 1.0, atol=1e-12)

    def test_hooks_compose_in_order(self, model):
        toks = tokenize("order")
        hooks = [LayerHook(1, lambda h: h * 2.0), LayerHook(1, lambda h: h + 1.0)]
        ref = model.forward(toks, [LayerHook(1, lambda h: h * 2.0 + 1.0)])
        assert np.array_equal(model.forward(toks, hooks).logits, ref.logits)

    def test_causality(self, model):
        a = model.forward(tokenize("abcdef"))
        b = model.forward(tokenize("abcxyz"))
        np.testing.assert_array_equal(a.logits[:4], b.logits[:4])

    def test_overlong(self, model):
        with pytest.raises(ValueError, match="exceeds max_seq"):
            model.forward([BOS] * 65)

    def test_bad_hook_layer(self, model):
        with pytest.raises(ValueError):
            model.forward(tokenize("a"), [LayerHook(3, lambda h: h)])

    def test_encoder_pooled(self, encoder):
        tr = encoder.forward(tokenize("pool this"))
        np.testing.assert_allclose(tr.pooled, tr.hidden_states[-1].mean(axis=0), atol=1e-12)

    def test_encoder_not_causal(self, encoder):
        a = encoder.forward(tokenize("abcdef"))
        b = encoder.forward(tokenize("abcxyz"))
        assert not np.array_equal(a.logits[:4], b.logits[:4])


def softmax_logprob_mp(logits_row, token):
    mpmath.mp.dps = 50
    vals = [mpmath.mpf(float(x)) for x in logits_row]
    z = mpmath.fsum(mpmath.exp(v) for v in vals)
    return float(vals[token] - mpmath.log(z))


class TestLogprobs:
    def test_matches_extended_precision(self, model):
        prompt = tokenize("Rate this:", eos=False)
        cont = list(b"abc")
        got = model.token_logprobs(prompt, cont)
        logits = model.forward(prompt + cont).logits
        start = len(prompt) - 1
        for i, t in enumerate(cont):
            assert got[i] == pytest.approx(softmax_logprob_mp(logits[start + i], t), abs=1e-12)

    def test_nonpositive(self, model):
        assert np.all(model.token_logprobs(tokenize("p", eos=False), list(b"hello")) <= 0)

    def test_normalisation(self, model):
        dist = model.next_token_distribution(tokenize("some prompt", eos=False))
        assert dist.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all((dist >= 0) & (dist <= 1))

    def test_empty_continuation(self, model):
        with pytest.raises(ValueError, match="empty continuation"):
            model.token_logprobs([BOS], [])

    def test_distribution_zero_hooks_bitwise(self, model):
        toks = tokenize("abc", eos=False)
        assert np.array_equal(model.next_token_distribution(toks),
                              model.next_token_distribution(toks, zero_hooks(3, 32)))
