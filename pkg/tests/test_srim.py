import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosam import nn
from cosam import tensor as T
from cosam.gradcheck import grad_check
from cosam.srim import (
    MaskedSelfAttention,
    Srim,
    SrimConfig,
    masked_mhsa,
    object_association,
    redistribute,
    srim_forward,
    temporal_mask,
    weighted_avg_pool,
)
from cosam.tensor import Tensor


def wap_oracle(f, a):
    t, c, h, w = f.shape
    out = np.zeros((t, a.shape[1], c))
    for i in range(t):
        for o in range(a.shape[1]):
            for ch in range(c):
                s = 0.0
                for y in range(h):
                    for x in range(w):
                        s += a[i, o, y, x] * f[i, ch, y, x]
                out[i, o, ch] = s
    return out


def random_assoc(rng, t, n_o, h, w):
    return T.softmax(Tensor(rng.normal(size=(t, n_o, h * w))), axis=-1).data.reshape(t, n_o, h, w)


def test_config_validation():
    with pytest.raises(ValueError):
        SrimConfig(C_L=8, C_R=8)
    with pytest.raises(ValueError):
        SrimConfig(C_L=16, C_R=6, heads=4)
    with pytest.raises(ValueError):
        SrimConfig(C_L=16, C_R=8, heads=2, window=-1)


def test_constant_logits_give_uniform_association(rng):
    conv = nn.Conv1x1(4, 2, rng)
    conv.weight.data[:] = 0
    a = object_association(rng.normal(size=(2, 4, 3, 3)), conv).data
    assert np.allclose(a, 1 / 9, rtol=0, atol=1e-15)


def test_association_is_spatial_distribution(rng):
    conv = nn.Conv1x1(4, 3, rng)
    a = object_association(rng.normal(size=(2, 4, 3, 5)), conv).data
    assert a.shape == (2, 3, 3, 5) and np.all(a >= 0)
    assert np.allclose(a.sum(axis=(2, 3)), 1.0, atol=1e-12)


def test_wap_constant_features(rng):
    f = np.full((2, 4, 3, 3), 1.25)
    assert np.allclose(weighted_avg_pool(f, random_assoc(rng, 2, 3, 3, 3)).data, 1.25, atol=1e-14)


def test_wap_one_hot_picks_pixel(rng):
    f = rng.normal(size=(1, 4, 3, 3))
    a = np.zeros((1, 1, 3, 3))
    a[0, 0, 2, 1] = 1
    assert np.array_equal(weighted_avg_pool(f, a).data[0, 0], f[0, :, 2, 1])


def test_wap_matches_loop(rng):
    f, a = rng.normal(size=(3, 5, 4, 3)), random_assoc(rng, 3, 2, 4, 3)
    assert np.max(np.abs(weighted_avg_pool(f, a).data - wap_oracle(f, a))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_wap_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    f, a = rng.normal(size=(2, 3, 3, 4)), random_assoc(rng, 2, 4, 3, 4)
    out = weighted_avg_pool(f, a).data
    lo, hi = f.min(axis=(2, 3)), f.max(axis=(2, 3))
    assert np.all(out >= lo[:, None, :] - 1e-12) and np.all(out <= hi[:, None, :] + 1e-12)


def test_temporal_mask():
    m = temporal_mask(3, 2, 1)
    assert m.shape == (6, 6)
    assert m[0, 3] and not m[0, 4] and m[5, 2]
    assert temporal_mask(1, 3, 0).all()


def test_single_frame_equals_unmasked(rng):
    att = MaskedSelfAttention(4, 2, rng)
    obj = rng.normal(size=(1, 3, 4))
    cfg = SrimConfig(C_L=8, C_R=4, N_o=3, heads=2, window=0)
    full = att(Tensor(obj.reshape(1, 3, 4))).data.reshape(1, 3, 4)
    assert np.array_equal(masked_mhsa(obj, cfg, att).data, full)


@pytest.mark.parametrize("window", [2, 3])
def test_full_window_equals_all_to_all(rng, window):
    att = MaskedSelfAttention(4, 2, rng)
    obj = rng.normal(size=(3, 2, 4))
    cfg = SrimConfig(C_L=8, C_R=4, N_o=2, heads=2, window=window)
    full = att(Tensor(obj.reshape(1, 6, 4))).data.reshape(3, 2, 4)
    assert np.array_equal(masked_mhsa(obj, cfg, att).data, full)


def test_attention_rows_sum_to_one_over_allowed(rng):
    att = MaskedSelfAttention(4, 2, rng)
    cfg = SrimConfig(C_L=8, C_R=4, N_o=2, heads=2, window=1)
    masked_mhsa(rng.normal(size=(4, 2, 4)), cfg, att)
    p = att.last_attention
    mask = temporal_mask(4, 2, 1)
    assert np.all(p[..., ~mask] == 0)
    assert np.allclose(p.sum(-1), 1, atol=1e-6)


def test_redistribute_uniform_hand_case():
    t, n_o, h, w, c = 2, 3, 2, 2, 4
    v = np.arange(c, dtype=np.float64)
    expand = nn.Conv1x1(c, c, np.random.default_rng(0))
    expand.weight.data[:] = np.eye(c)
    expand.bias.data[:] = 0
    out = redistribute(np.broadcast_to(v, (t, n_o, c)), np.full((t, n_o, h, w), 1 / (h * w)), expand).data
    assert np.allclose(out, (n_o / (h * w) * v)[None, :, None, None], atol=1e-15)


def test_redistribute_zero_features_gives_bias(rng):
    expand = nn.Conv1x1(4, 6, rng)
    out = redistribute(np.zeros((2, 3, 4)), random_assoc(rng, 2, 3, 2, 2), expand).data
    assert np.allclose(out, expand.bias.data[None, :, None, None])


def test_identity_at_init(rng):
    m = Srim(SrimConfig(C_L=8, C_R=4, N_o=2, heads=2), rng)
    f = rng.normal(size=(3, 8, 3, 3))
    assert np.array_equal(srim_forward(f, m).data, f)


def test_shape_preservation(rng):
    m = Srim(SrimConfig(C_L=64, C_R=32, N_o=5, heads=8), rng)
    f = rng.normal(size=(10, 64, 14, 14))
    with T.no_grad():
        assert srim_forward(f, m).shape == f.shape
    assert m(rng.normal(size=(2, 3, 64, 4, 4))).shape == (2, 3, 64, 4, 4)


def _randomise(m, rng):
    for p in m.parameters():
        p.data += rng.normal(0, 0.5, size=p.shape)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients(seed):
    rng = np.random.default_rng([seed, 77])
    f = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    conv = nn.Conv1x1(4, 2, rng)
    r = rng.normal(size=(2, 2, 3, 3))
    assert grad_check(lambda: (object_association(f, conv) * r).sum(), [f] + conv.parameters()) < 1e-4

    m = Srim(SrimConfig(C_L=8, C_R=4, N_o=2, heads=2), rng)
    _randomise(m, rng)
    x = Tensor(rng.normal(size=(3, 8, 3, 3)), requires_grad=True)
    r = rng.normal(size=x.shape)
    assert grad_check(lambda: (m(x) * r).sum(), [x] + m.parameters()) < 1e-4

    att, logits = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True), Tensor(rng.normal(size=(2, 2, 9)), requires_grad=True)
    expand = nn.Conv1x1(4, 8, rng)
    r = rng.normal(size=(2, 8, 3, 3))

    def f_red():
        return (redistribute(att, T.softmax(logits, -1).reshape(2, 2, 3, 3), expand) * r).sum()

    assert grad_check(f_red, [att, logits] + expand.parameters()) < 1e-4
