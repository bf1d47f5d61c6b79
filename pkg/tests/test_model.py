import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alfa import tensor as T
from alfa.model import (
    EncoderConfig,
    FeatureTriple,
    concat_features,
    encode,
    heads,
    init_params,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from alfa.tensor import Tensor

CFG = EncoderConfig(input_size=3 * 4 * 4, hidden=(16,), embed_dim=32)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, 4, 4))


def zero_weights(params):
    for t in params.tensors.values():
        if not t.name.startswith("cls.ln"):
            t.data = np.zeros_like(t.data)


def test_encode_shapes():
    p = init_params(CFG, 2, 3, seed=0)
    feats = encode(p, images(4))
    assert [f.shape for f in feats] == [(4, 32)] * 3


def test_zero_encoders_give_zero_embeddings():
    p = init_params(CFG, 2, 3, seed=0)
    zero_weights(p)
    for f in encode(p, images(4)):
        np.testing.assert_array_equal(f.data, 0.0)


def test_encode_input_size_mismatch():
    p = init_params(CFG, 2, 3, seed=0)
    with pytest.raises(T.ShapeError, match="encode"):
        encode(p, np.zeros((2, 3, 5, 5)))


def test_perturbing_alpha_leaves_others():
    p = init_params(CFG, 2, 3, seed=0)
    x = images(5)
    before = encode(p, x)
    p.tensors["alpha.0.w"].data = p.tensors["alpha.0.w"].data + 0.5
    after = encode(p, x)
    assert not np.array_equal(before.alpha.data, after.alpha.data)
    np.testing.assert_array_equal(before.beta.data, after.beta.data)
    np.testing.assert_array_equal(before.gamma.data, after.gamma.data)


def test_encoders_do_not_share_weights():
    p = init_params(CFG, 2, 3, seed=0)
    feats = encode(p, images(3))
    assert not np.allclose(feats.alpha.data, feats.beta.data)


def test_inactive_extractors_not_created():
    p = init_params(CFG, 2, 3, mask=(True, False, False), seed=0)
    names = set(p.tensors)
    assert not any(n.startswith(("beta", "gamma", "head_")) for n in names)
    assert p.tensors["cls.0.w"].shape == (32, 2)


# ---------------------------------------------------------------- layer norm


def ln(x):
    d = x.shape[1]
    return T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data


def test_layer_norm_constant_row():
    np.testing.assert_array_equal(ln(np.full((1, 4), 2.5)), 0.0)


def test_layer_norm_two_values():
    np.testing.assert_allclose(ln(np.array([[1.0, 3.0]])), [[-1.0, 1.0]], atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-100, 100)))
def test_layer_norm_statistics(x):
    spread = x.std(axis=1)
    out = ln(x)
    assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
    big = spread > 1.0
    assert np.all(np.abs(out[big].var(axis=1) - 1) < 1e-4)


def test_layer_norm_gain_and_bias():
    x = np.random.default_rng(0).normal(size=(2, 5))
    g, b = np.arange(1.0, 6.0), np.linspace(-1, 1, 5)
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(out, ln(x) * g + b)


# ----------------------------------------------------------------- concat


def marker_triple(n=2, d=3):
    return FeatureTriple(*(Tensor(np.tile([[v, -v, 0.0]], (n, 1))) for v in (1.0, 2.0, 3.0)))


def test_concat_full_width():
    p = init_params(EncoderConfig(48, (8,), 3), 2, 3, seed=0)
    assert concat_features(p, marker_triple()).shape == (2, 9)


def test_concat_single_equals_layer_norm():
    p = init_params(EncoderConfig(48, (8,), 3), 2, 3, mask=(False, True, False), seed=0)
    feats = marker_triple()
    np.testing.assert_array_equal(concat_features(p, feats).data, ln(feats.beta.data))


def test_concat_order_alpha_gamma():
    p = init_params(EncoderConfig(48, (8,), 3), 2, 3, mask=(True, False, True), seed=0)
    p.tensors["cls.ln_alpha.bias"].data = np.full(3, 10.0)
    p.tensors["cls.ln_gamma.bias"].data = np.full(3, 30.0)
    out = concat_features(p, marker_triple()).data
    assert out.shape == (2, 6)
    assert np.all(out[:, :3] < 20) and np.all(out[:, 3:] > 20)


def test_concat_all_false_mask():
    p = init_params(EncoderConfig(48, (8,), 3), 2, 3, seed=0)
    with pytest.raises(ValueError, match="at least one"):
        concat_features(p, marker_triple(), mask=(False, False, False))


# ------------------------------------------------------------------- heads


def test_head_shapes():
    p = init_params(CFG, 2, 3, seed=0)
    lb, lg, lc = heads(p, encode(p, images(4)))
    assert (lb.shape, lg.shape, lc.shape) == ((4, 2), (4, 3), (4, 2))


def test_zero_weights_give_uniform_softmax():
    p = init_params(CFG, 2, 3, seed=0)
    zero_weights(p)
    for logits in heads(p, encode(p, images(4))):
        np.testing.assert_array_equal(logits.data, 0.0)
        np.testing.assert_allclose(T.softmax(logits).data, 1.0 / logits.shape[1])


def test_domain_head_ignores_beta():
    p = init_params(CFG, 2, 3, seed=0)
    x = images(4)
    _, before, _ = heads(p, encode(p, x))
    p.tensors["beta.1.w"].data = p.tensors["beta.1.w"].data * 3
    _, after, _ = heads(p, encode(p, x))
    np.testing.assert_array_equal(before.data, after.data)


def test_heads_mask_width_mismatch():
    p = init_params(CFG, 2, 3, seed=0)
    with pytest.raises(ValueError, match="classifier width"):
        heads(p, encode(p, images(2)), mask=(True, True, False))


def test_gradient_isolation_beta_only_loss():
    p = init_params(CFG, 2, 3, seed=0)
    feats = encode(p, images(4))
    T.backward(T.sum(feats.beta * feats.beta))
    assert all(p.tensors[n].grad is None for n in p.tensors if n.startswith(("alpha", "gamma")))
    assert all(p.tensors[n].grad is not None for n in p.tensors if n.startswith("beta"))


def test_predict_proba_rows_sum_to_one():
    p = init_params(CFG, 2, 3, seed=0)
    probs = predict_proba(p.detached(), images(7), batch=3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_wide_preset_width():
    assert EncoderConfig.wide_preset(48).embed_dim == 512


def test_checkpoint_round_trip(tmp_path):
    p = init_params(CFG, 2, 3, mask=(True, False, True), seed=4)
    save_checkpoint(p, tmp_path)
    q = load_checkpoint(tmp_path)
    assert q.mask == p.mask and q.config == p.config and list(q.tensors) == list(p.tensors)
    for name in p.tensors:
        np.testing.assert_allclose(q.tensors[name].data, p.tensors[name].data, rtol=1e-6, atol=1e-7)
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "alpha.0.w 48 16"
