import numpy as np
import pytest

from addl.autodiff import Tensor, ops
from addl.autodiff.checkpoint import loads
from addl.gabor import PARAM_HI, PARAM_LO
from addl.nets import (
    ADDLModel,
    GsacLayer,
    ModelConfig,
    N_FEATURES,
    gsac_forward,
    init_weights,
    param_activation,
    param_features,
)
from addl.selftest import random_maps


@pytest.fixture(scope="module")
def model():
    return ADDLModel(seed=3)


@pytest.mark.parametrize("shape", [(16, 16), (24, 40), (18, 22)])
def test_gabor_net_shapes_and_ranges(model, shape):
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1) + shape))
    p = model.gabor_net(x).data
    assert p.shape == (2, 5, shape[0] // 2, shape[1] // 2)
    lo, hi = PARAM_LO[None, :, None, None], PARAM_HI[None, :, None, None]
    assert ((p >= lo) & (p <= hi)).all()


def test_gabor_net_rejects_odd_input(model):
    with pytest.raises(ValueError):
        model.gabor_net(Tensor(np.zeros((1, 1, 15, 16))))


@pytest.mark.parametrize("shape", [(8, 8), (9, 13)])
def test_predict_net_shapes(model, shape):
    p = model.predict_net(Tensor(np.full((1, 1) + shape, 0.5))).data
    assert p.shape == (1, 5) + shape


def test_upsampler_shape_range_and_bilinear_start(model):
    rng = np.random.default_rng(1)
    y = rng.uniform(size=(2, 1, 8, 12))
    p = Tensor(random_maps(rng, 2, 8, 12))
    out = model.upsampler(Tensor(y), p).data
    assert out.shape == (2, 1, 16, 24)
    # the tail starts at zero, so the untrained upsampler is bilinear interpolation
    np.testing.assert_array_equal(out, np.clip(ops.bilinear_up2(Tensor(y)).data, 0, 1))


def test_param_activation_covers_ranges():
    raw = Tensor(np.array([-50.0, 0.0, 50.0]).reshape(1, 1, 1, 3).repeat(5, axis=1))
    p = param_activation(raw).data[0]
    np.testing.assert_allclose(p[:, 0, 0], PARAM_LO, atol=1e-12)
    np.testing.assert_allclose(p[:, 0, 1], 0.5 * (PARAM_LO + PARAM_HI))
    np.testing.assert_allclose(p[:, 0, 2], PARAM_HI, atol=1e-12)


def test_param_features_are_continuous_across_theta_wrap():
    a = np.array([4.0, 1e-9, 0.3, 1.0, 0.5]).reshape(1, 5, 1, 1)
    b = a.copy()
    b[0, 1] = np.pi - 1e-9
    fa, fb = param_features(Tensor(a)).data, param_features(Tensor(b)).data
    assert fa.shape == (1, N_FEATURES, 1, 1)
    np.testing.assert_allclose(fa, fb, atol=1e-8)


def gsac_loops(x, feats, layer):
    w1, b1 = layer.ext1.weight.data[:, :, 0, 0], layer.ext1.bias.data
    w2, b2 = layer.ext2.weight.data[:, :, 0, 0], layer.ext2.bias.data
    w, b = layer.conv.weight.data[:, :, 0, 0], layer.conv.bias.data
    N, C, H, W = x.shape
    out = np.zeros((N, w.shape[0], H, W))
    for n in range(N):
        for i in range(H):
            for j in range(W):
                hidden = np.maximum(w1 @ feats[n, :, i, j] + b1, 0.0)
                f = w2 @ hidden + b2
                for o in range(w.shape[0]):
                    out[n, o, i, j] = b[o] + sum(w[o, c] * f[c] * x[n, c, i, j] for c in range(C))
    return out


def test_gsac_matches_per_pixel_formula():
    rng = np.random.default_rng(2)
    layer = GsacLayer(rng, 4, 6)
    x = rng.standard_normal((2, 4, 3, 5))
    params = Tensor(random_maps(rng, 2, 3, 5))
    feats = param_features(params)
    got = gsac_forward(Tensor(x), feats, layer).data
    np.testing.assert_allclose(got, gsac_loops(x, feats.data, layer), rtol=1e-12, atol=1e-12)


def test_gsac_unit_modulation_is_plain_convolution():
    rng = np.random.default_rng(3)
    layer = GsacLayer(rng, 4, 6)
    x = Tensor(rng.standard_normal((1, 4, 5, 5)))
    plain = gsac_forward(x, None, layer).data
    ones = gsac_forward(x, None, layer, modulation=Tensor(np.ones((1, 4, 5, 5)))).data
    assert plain.tobytes() == ones.tobytes()
    assert plain.tobytes() == layer.conv(x).data.tobytes()


def test_gsac_modulation_shape_is_checked():
    rng = np.random.default_rng(4)
    layer = GsacLayer(rng, 4, 6)
    with pytest.raises(ValueError):
        gsac_forward(Tensor(np.zeros((1, 4, 2, 2))), None, layer, modulation=Tensor(np.ones((1, 3, 2, 2))))


def test_initialization_is_seeded():
    a, b, c = init_weights(seed=1), init_weights(seed=1), init_weights(seed=2)
    assert sorted(a) == sorted(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if a[k].any())


def test_forward_is_deterministic(model):
    x = Tensor(np.random.default_rng(9).uniform(size=(1, 1, 16, 16)))
    assert model.gabor_net(x).data.tobytes() == model.gabor_net(x).data.tobytes()


def test_model_serialization_round_trip(model):
    blob = model.to_bytes()
    back = ADDLModel.from_weights(loads(blob))
    assert back.to_bytes() == blob
    assert back.model_id() == model.model_id()
    assert back.config == model.config


def test_full_scale_config_round_trips():
    cfg = ModelConfig.full_scale()
    m = ADDLModel(cfg)
    assert ADDLModel.from_weights(loads(m.to_bytes())).config == cfg
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_load_rejects_mismatched_weights(model):
    w = model.state_dict()
    w.pop(next(iter(w)))
    with pytest.raises(KeyError):
        ADDLModel().load_state_dict(w)


def test_sub_network_digests_are_independent():
    m = ADDLModel(seed=0)
    before = {p: m.digest(p) for p in ("gabor_net/", "predict_net/", "upsampler/")}
    m.predict_net.params()[next(iter(m.predict_net.params()))].data += 1.0
    assert m.digest("gabor_net/") == before["gabor_net/"]
    assert m.digest("upsampler/") == before["upsampler/"]
    assert m.digest("predict_net/") != before["predict_net/"]
