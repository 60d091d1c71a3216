import numpy as np
import pytest

from ggam import tensor as T
from ggam.tensor import Tensor
from ggam.attention import (
    AttentionParams,
    channel_weights,
    apply_channel,
    spatial_map,
    apply_spatial,
    attention_forward,
)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def random_params(c, r, seed=0):
    g = rng(seed)
    return AttentionParams(
        fc1=Tensor(g.normal(size=(c, c // r)), requires_grad=True),
        fc2=Tensor(g.normal(size=(c // r, c)), requires_grad=True),
        reduction=r,
    )


def zero_params(c, r=4):
    return AttentionParams(
        fc1=Tensor(np.zeros((c, c // r))), fc2=Tensor(np.zeros((c // r, c))), reduction=r
    )


# ---------------------------------------------------------------------------
# channel weights


def test_zero_fc_weights_give_uniform_weights():
    a = Tensor(np.full((8, 4, 4), 3.7))
    s = channel_weights(a, zero_params(8))
    assert np.allclose(s.data, 1.0 / 8, atol=1e-12)


def test_identity_acting_fc_closed_form():
    # channel means [0, ln 3] pass through identity FCs, softmax -> [0.25, 0.75]
    a = Tensor(np.stack([np.zeros((2, 2)), np.full((2, 2), np.log(3.0))]))
    params = AttentionParams(fc1=Tensor(np.eye(2)), fc2=Tensor(np.eye(2)), reduction=1)
    s = channel_weights(a, params)
    assert np.allclose(s.data, [0.25, 0.75], atol=1e-12)


def test_channel_weights_match_straight_line_oracle():
    c, r = 8, 4
    g = rng(1)
    a = g.random((c, 5, 3))
    params = random_params(c, r, seed=2)
    s = channel_weights(Tensor(a), params).data

    # independent straight-line evaluation
    pooled = np.array([a[i].mean() for i in range(c)])
    hidden = np.maximum(pooled @ params.fc1.data, 0.0)
    scores = hidden @ params.fc2.data
    e = np.exp(scores - scores.max())
    assert np.allclose(s, e / e.sum(), atol=1e-10)


def test_channel_mismatch_raises():
    with pytest.raises(ValueError):
        channel_weights(Tensor(np.ones((6, 2, 2))), zero_params(8))


# ---------------------------------------------------------------------------
# apply_channel


def test_uniform_weights_scale_by_inverse_channel_count():
    a = rng(3).random((4, 3, 3))
    b = apply_channel(Tensor(a), Tensor(np.full(4, 0.25)))
    assert np.allclose(b.data, a / 4, atol=1e-15)


def test_one_hot_weights_zero_other_channels():
    a = rng(4).random((3, 2, 2))
    b = apply_channel(Tensor(a), Tensor([0.0, 1.0, 0.0]))
    assert np.array_equal(b.data[0], np.zeros((2, 2)))
    assert np.array_equal(b.data[1], a[1])
    assert np.array_equal(b.data[2], np.zeros((2, 2)))


def test_apply_channel_matches_loop_oracle():
    g = rng(5)
    a, s = g.random((5, 4, 3)), g.random(5)
    b = apply_channel(Tensor(a), Tensor(s)).data
    for c in range(5):
        for i in range(4):
            for j in range(3):
                assert abs(b[c, i, j] - a[c, i, j] * s[c]) < 1e-12


def test_apply_channel_length_mismatch():
    with pytest.raises(ValueError):
        apply_channel(Tensor(np.ones((3, 2, 2))), Tensor(np.ones(4)))


# ---------------------------------------------------------------------------
# spatial map


def test_equal_channel_sums_give_uniform_map():
    a = np.full((3, 4, 2), 1.25)
    t = spatial_map(Tensor(a))
    assert np.allclose(t.data, 1.0 / 8, atol=1e-12)


def test_spatial_map_hand_case():
    t = spatial_map(Tensor([[[1.0, 1.0], [1.0, 3.0]]]))
    assert np.allclose(t.data, [[1 / 6, 1 / 6], [1 / 6, 1 / 2]], atol=1e-12)


def test_spatial_map_scale_invariant():
    b = rng(6).random((4, 3, 3))
    t1 = spatial_map(Tensor(b)).data
    t2 = spatial_map(Tensor(7.3 * b)).data
    assert np.allclose(t1, t2, atol=1e-9)


def test_spatial_map_zero_total_is_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        spatial_map(Tensor(np.zeros((2, 2, 2))))


def test_spatial_map_exp_mode_normalizes_exponentials():
    b = rng(7).random((2, 2, 2))
    t = spatial_map(Tensor(b), mode="exp").data
    summed = b.sum(axis=0)
    e = np.exp(summed - summed.max())
    assert np.allclose(t, e / e.sum(), atol=1e-12)


def test_spatial_map_unknown_mode():
    with pytest.raises(ValueError):
        spatial_map(Tensor(np.ones((1, 2, 2))), mode="linear")


# ---------------------------------------------------------------------------
# apply_spatial


def test_uniform_map_scales_by_inverse_area():
    a = rng(8).random((3, 4, 4))
    d = apply_spatial(Tensor(a), Tensor(np.full((4, 4), 1.0 / 16)))
    assert np.allclose(d.data, a / 16, atol=1e-15)


def test_zero_location_annihilates_every_channel():
    a = rng(9).random((3, 2, 2))
    t = np.full((2, 2), 0.5)
    t[1, 0] = 0.0
    d = apply_spatial(Tensor(a), Tensor(t)).data
    assert np.array_equal(d[:, 1, 0], np.zeros(3))


def test_apply_spatial_matches_loop_oracle():
    g = rng(10)
    a, t = g.random((4, 3, 5)), g.random((3, 5))
    d = apply_spatial(Tensor(a), Tensor(t)).data
    for c in range(4):
        for i in range(3):
            for j in range(5):
                assert abs(d[c, i, j] - a[c, i, j] * t[i, j]) < 1e-12


def test_apply_spatial_shape_mismatch():
    with pytest.raises(ValueError):
        apply_spatial(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 2))))


# ---------------------------------------------------------------------------
# composition


def test_constant_input_with_zero_fc_composes_to_area_scaling():
    a = np.full((8, 4, 4), 2.0)
    s, b, t, d = attention_forward(Tensor(a), zero_params(8))
    assert np.allclose(s.data, 1.0 / 8, atol=1e-12)
    assert np.allclose(t.data, 1.0 / 16, atol=1e-12)
    assert np.allclose(d.data, a / 16, atol=1e-12)


def test_forward_preserves_shape():
    a = Tensor(rng(11).random((8, 6, 4)))
    _, _, _, d = attention_forward(a, random_params(8, 4, seed=12))
    assert d.shape == a.shape


def test_forward_equals_sequential_application_bit_exactly():
    a = Tensor(rng(13).random((8, 4, 4)))
    params = random_params(8, 2, seed=14)
    s1, b1, t1, d1 = attention_forward(a, params)
    s2 = channel_weights(a, params)
    b2 = apply_channel(a, s2)
    t2 = spatial_map(b2)
    d2 = apply_spatial(a, t2)
    for x, y in ((s1, s2), (b1, b2), (t1, t2), (d1, d2)):
        assert np.array_equal(x.data, y.data)


def test_invariants_on_random_nonnegative_inputs():
    g = rng(15)
    for trial in range(25):
        c = 8
        a = Tensor(g.random((c, 4, 4)) + 0.01)
        params = random_params(c, 4, seed=100 + trial)
        s, b, t, d = attention_forward(a, params)
        assert np.all(s.data > 0)
        assert abs(s.data.sum() - 1.0) < 1e-9
        assert np.all(t.data >= 0)
        assert abs(t.data.sum() - 1.0) < 1e-9
        assert d.shape == a.shape


def test_identity_bypass_hook():
    # uniform channel weights and an all-ones map leave the input unchanged
    a = Tensor(rng(16).random((4, 3, 3)))
    d = apply_spatial(a, Tensor(np.ones((3, 3))))
    assert np.array_equal(d.data, a.data)


def test_end_to_end_gradient_through_attention():
    c, r = 4, 2
    g = rng(17)
    a = Tensor(g.random((c, 3, 3)) + 0.1, requires_grad=True)
    params = random_params(c, r, seed=18)
    weights = Tensor(g.normal(size=(c, 3, 3)))

    def builder(ai, w1, w2):
        p = AttentionParams(fc1=w1, fc2=w2, reduction=r)
        _, _, _, d = attention_forward(ai, p)
        return T.reduce_sum(T.hadamard(d, weights))

    report = T.grad_check(builder, [a, params.fc1, params.fc2], eps=1e-5, tol=1e-4)
    assert report.passed, report


def test_params_validation():
    with pytest.raises(ValueError):
        AttentionParams(fc1=Tensor(np.zeros((8, 2))), fc2=Tensor(np.zeros((2, 8))), reduction=3)
    with pytest.raises(ValueError):
        AttentionParams(fc1=Tensor(np.zeros((8, 3))), fc2=Tensor(np.zeros((3, 8))), reduction=4)
