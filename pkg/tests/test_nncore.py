from __future__ import annotations

import math

import numpy as np
import pytest

from ktrace import nncore
from ktrace.nncore import (
    AdamState,
    GruParams,
    adam_update,
    clip_global_norm,
    embed_lookup,
    embed_lookup_backward,
    fd_max_rel_error,
    grad_check,
    gru_backward,
    gru_forward,
    init_net,
    masked_bce,
    masked_bce_backward,
    net_loss,
    net_loss_and_grads,
    readout,
    zero_net,
)


def random_gru(rng: np.random.Generator, d_in: int, d_h: int, scale: float = 0.4) -> GruParams:
    def m(*shape):
        return rng.normal(scale=scale, size=shape)

    return GruParams(
        w_z=m(d_in, d_h), w_r=m(d_in, d_h), w_h=m(d_in, d_h),
        u_z=m(d_h, d_h), u_r=m(d_h, d_h), u_h=m(d_h, d_h),
        b_z=m(d_h), b_r=m(d_h), b_h=m(d_h),
    )


def random_batch(rng: np.random.Generator, b: int, t: int, k: int):
    x_idx = rng.integers(0, 2 * k, size=(b, t))
    s_next = rng.integers(0, k, size=(b, t))
    y_next = rng.integers(0, 2, size=(b, t)).astype(float)
    w = np.ones((b, t))
    w[:, -1] = 0.0
    w[0, : t // 3] = 0.0
    return x_idx, s_next, y_next, w


# ---------------------------------------------------------------------------
# embed_lookup


def test_embed_lookup_unit_rows():
    e = np.eye(5)
    out = embed_lookup(np.array([3]), e)
    assert np.array_equal(out[0], np.eye(5)[3])


def test_embed_lookup_repeated_index_gives_identical_rows():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(6, 4))
    out = embed_lookup(np.array([2, 2, 5]), e)
    assert np.array_equal(out[0], out[1])


def test_embed_lookup_out_of_range_is_hard_error():
    e = np.zeros((4, 3))
    with pytest.raises(IndexError):
        embed_lookup(np.array([4]), e)
    with pytest.raises(IndexError):
        embed_lookup(np.array([-1]), e)


def test_embed_lookup_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(7, 3))
    idx = np.array([1, 4, 1, 6, 0])
    coef = rng.normal(size=(5, 3))

    def loss():
        return float((embed_lookup(idx, e) * coef).sum())

    analytic = embed_lookup_backward(idx, coef, e.shape[0])
    err = fd_max_rel_error(loss, {"e": e}, {"e": analytic}, eps=1e-5)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# GRU


def test_gru_zero_parameters_fixed_point():
    d_in, d_h, t = 3, 4, 5
    p = GruParams(
        w_z=np.zeros((d_in, d_h)), w_r=np.zeros((d_in, d_h)), w_h=np.zeros((d_in, d_h)),
        u_z=np.zeros((d_h, d_h)), u_r=np.zeros((d_h, d_h)), u_h=np.zeros((d_h, d_h)),
        b_z=np.zeros(d_h), b_r=np.zeros(d_h), b_h=np.zeros(d_h),
    )
    x = np.random.default_rng(2).normal(size=(t, d_in))
    h, tape = gru_forward(x, p)
    assert np.array_equal(h, np.zeros((t, d_h)))
    assert np.allclose(tape.z, 0.5)
    assert np.allclose(tape.r, 0.5)
    assert np.array_equal(tape.hcand, np.zeros((1, t, d_h)))


def test_gru_t1_equals_single_cell():
    rng = np.random.default_rng(3)
    p = random_gru(rng, 3, 4)
    x = rng.normal(size=(1, 3))
    h, _ = gru_forward(x, p)

    xt = x[0]
    z = nncore.sigmoid(xt @ p.w_z + p.b_z)
    r = nncore.sigmoid(xt @ p.w_r + p.b_r)
    c = np.tanh(xt @ p.w_h + p.b_h)
    expected = z * c
    assert np.allclose(h[0], expected, atol=0, rtol=0)


def test_gru_sequence_equals_stepwise_application():
    rng = np.random.default_rng(4)
    p = random_gru(rng, 3, 4)
    x = rng.normal(size=(5, 3))
    h_full, _ = gru_forward(x, p)
    h_prev = np.zeros(4)
    for t in range(5):
        step, _ = gru_forward(x[t : t + 1], p, h0=h_prev)
        h_prev = step[0]
        assert np.array_equal(h_full[t], h_prev)


def test_gru_nonfinite_raises_with_step_index():
    rng = np.random.default_rng(5)
    p = random_gru(rng, 2, 3)
    x = rng.normal(size=(4, 2))
    x[2, 0] = np.nan
    with pytest.raises(FloatingPointError, match="step 2"):
        gru_forward(x, p)


def test_gru_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    d_in, d_h, t = 3, 4, 5
    p = random_gru(rng, d_in, d_h)
    x = rng.normal(size=(2, t, d_in))
    coef = rng.normal(size=(2, t, d_h))

    def loss():
        h, _ = gru_forward(x, p)
        return float((h * coef).sum())

    _, tape = gru_forward(x, p)
    grads, dx, _ = gru_backward(p, tape, coef)
    tensors = dict(p.flat())
    tensors["x"] = x
    analytic = dict(grads)
    analytic["x"] = dx
    err = fd_max_rel_error(loss, tensors, analytic, eps=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# readout


def test_readout_zero_weights_gives_half():
    h = np.random.default_rng(7).normal(size=(3, 4))
    p = readout(h, np.zeros((4, 2)), np.zeros(2))
    assert np.array_equal(p, np.full((3, 2), 0.5))


def test_readout_large_bias_saturates():
    p = readout(np.zeros((1, 4)), np.zeros((4, 1)), np.array([30.0]))
    assert p[0, 0] > 1.0 - 1e-9
    assert p[0, 0] < 1.0


def test_readout_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    h = rng.normal(size=(2, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    y = rng.integers(0, 2, size=(2, 3)).astype(float)
    mask = np.ones((2, 3))

    def loss():
        return masked_bce(readout(h, w, b), y, mask)

    p = readout(h, w, b)
    dp = masked_bce_backward(p, y, mask)
    da = dp * p * (1.0 - p)
    analytic = {"w": h.T @ da, "b": da.sum(axis=0)}
    err = fd_max_rel_error(loss, {"w": w, "b": b}, analytic, eps=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# masked BCE


def test_masked_bce_single_cell_ln2():
    loss = masked_bce(np.array([[0.5]]), np.array([[1.0]]), np.array([[1.0]]))
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_masked_bce_is_bit_invariant_at_masked_positions():
    rng = np.random.default_rng(9)
    p = rng.uniform(0.1, 0.9, size=(2, 3))
    y = rng.integers(0, 2, size=(2, 3)).astype(float)
    w = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    base = masked_bce(p, y, w)
    for value in (0.0, 1.0, 123.0, -5.0, np.nan):
        q = p.copy()
        q[w == 0] = value
        assert masked_bce(q, y, w) == base


def test_masked_bce_matches_scalar_loop_oracle():
    rng = np.random.default_rng(10)
    p = rng.uniform(0.01, 0.99, size=(2, 3))
    y = rng.integers(0, 2, size=(2, 3)).astype(float)
    w = rng.integers(0, 2, size=(2, 3)).astype(float)
    w[0, 0] = 1.0

    total = 0.0
    count = 0.0
    for i in range(2):
        for j in range(3):
            if w[i, j] == 1.0:
                total += -(y[i, j] * math.log(p[i, j]) + (1 - y[i, j]) * math.log(1 - p[i, j]))
                count += 1.0
    assert masked_bce(p, y, w) == pytest.approx(total / count, abs=1e-12)


def test_masked_bce_empty_mask_raises():
    with pytest.raises(ValueError, match="no valid targets"):
        masked_bce(np.array([[0.5]]), np.array([[1.0]]), np.array([[0.0]]))


def test_masked_bce_backward_matches_finite_differences_and_masks():
    rng = np.random.default_rng(11)
    p = rng.uniform(0.05, 0.95, size=(2, 4))
    y = rng.integers(0, 2, size=(2, 4)).astype(float)
    w = np.array([[1.0, 0.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]])

    analytic = masked_bce_backward(p, y, w)
    assert np.all(analytic[w == 0] == 0.0)
    err = fd_max_rel_error(lambda: masked_bce(p, y, w), {"p": p}, {"p": analytic}, eps=1e-6)
    assert err < 1e-7


# ---------------------------------------------------------------------------
# clipping and Adam


def test_clip_noop_below_threshold():
    g = {"a": np.array([3.0]), "b": np.array([0.0])}
    out = clip_global_norm(g, max_norm=5.0)
    assert out is g


def test_clip_rescales_to_max_norm():
    g = {"a": np.array([3.0, 4.0])}
    out = clip_global_norm(g, max_norm=1.0)
    assert np.allclose(out["a"], [0.6, 0.8], atol=1e-12)


def test_clip_property_random_tensors():
    rng = np.random.default_rng(12)
    for _ in range(50):
        g = {
            "a": rng.normal(scale=rng.uniform(0.1, 10), size=(3, 2)),
            "b": rng.normal(scale=rng.uniform(0.1, 10), size=5),
        }
        out = clip_global_norm(g, max_norm=2.5)
        norm = math.sqrt(sum(float((t * t).sum()) for t in out.values()))
        assert norm <= 2.5 + 1e-9


def test_adam_zero_gradient_keeps_params_and_increments_t():
    params = {"a": np.array([1.0, -2.0])}
    state = AdamState.for_params(params, lr=0.1)
    new, state = adam_update(params, {"a": np.zeros(2)}, state)
    assert np.array_equal(new["a"], params["a"])
    assert state.t == 1


def test_adam_first_step_is_signed_lr():
    params = {"a": np.array([0.0, 0.0])}
    grads = {"a": np.array([1.0, -1.0])}
    state = AdamState.for_params(params, lr=1e-3)
    new, _ = adam_update(params, grads, state)
    assert np.allclose(new["a"], [-1e-3, 1e-3], atol=1e-9)


def test_adam_lr_zero_is_identity():
    rng = np.random.default_rng(13)
    params = {"a": rng.normal(size=4)}
    state = AdamState.for_params(params, lr=0.0)
    new, _ = adam_update(params, {"a": rng.normal(size=4)}, state)
    assert np.array_equal(new["a"], params["a"])


def test_adam_descends_quadratic():
    params = {"x": np.array([1.0])}
    state = AdamState.for_params(params, lr=0.05)
    values = [1.0]
    for _ in range(100):
        g = {"x": 2.0 * params["x"]}
        params, state = adam_update(params, g, state)
        values.append(float(params["x"][0] ** 2))
    assert values[-1] < 0.01
    assert values[-1] < values[0]


# ---------------------------------------------------------------------------
# full stack


def test_full_stack_grad_check_small_net():
    rng = np.random.default_rng(14)
    k = 5
    net = init_net(2 * k, 3, 4, k, seed=21)
    x_idx, s_next, y_next, w = random_batch(rng, 2, 6, k)
    err = grad_check(net, x_idx, s_next, y_next, w, eps=1e-5)
    assert err < 1e-4


def test_grad_check_detects_sign_flip():
    rng = np.random.default_rng(15)
    k = 4
    net = init_net(2 * k, 3, 4, k, seed=22)
    x_idx, s_next, y_next, w = random_batch(rng, 2, 5, k)

    def corrupted(n):
        grads = net_loss_and_grads(n, x_idx, s_next, y_next, w)[1]
        grads["w_out"] = grads["w_out"].copy()
        grads["w_out"][0, 0] = -grads["w_out"][0, 0]
        return grads

    err = grad_check(net, x_idx, s_next, y_next, w, eps=1e-5, grad_fn=corrupted)
    assert err > 1e-2


def test_linear_only_composite_grad_error_tiny():
    rng = np.random.default_rng(16)
    h = rng.normal(size=(3, 4))
    w = rng.normal(scale=0.5, size=(4, 2))
    b = rng.normal(scale=0.5, size=2)
    y = rng.integers(0, 2, size=(3, 2)).astype(float)
    mask = np.ones((3, 2))

    def loss():
        return masked_bce(readout(h, w, b), y, mask)

    p = readout(h, w, b)
    da = np.where(mask > 0, (p - y) / mask.sum(), 0.0)
    analytic = {"w": h.T @ da, "b": da.sum(axis=0)}
    err = fd_max_rel_error(loss, {"w": w, "b": b}, analytic, eps=1e-6)
    assert err < 1e-7


def test_zero_net_outputs_half_everywhere():
    net = zero_net(10, 3, 4, 5)
    probs, _ = nncore.net_forward(net, np.array([[0, 3, 9]]))
    assert np.array_equal(probs, np.full((1, 3, 5), 0.5))


def test_loss_gradient_zero_at_masked_probabilities():
    rng = np.random.default_rng(17)
    k = 4
    net = init_net(2 * k, 3, 4, k, seed=23)
    x_idx, s_next, y_next, w = random_batch(rng, 2, 5, k)
    base_loss = net_loss(net, x_idx, s_next, y_next, w)
    # flipping targets at masked positions must not change the loss
    y_mod = y_next.copy()
    y_mod[w == 0] = 1.0 - y_mod[w == 0]
    assert net_loss(net, x_idx, s_next, y_mod, w) == base_loss


def test_forward_outputs_finite_for_seeded_init():
    rng = np.random.default_rng(18)
    net = init_net(20, 8, 16, 10, seed=3)
    x_idx = rng.integers(0, 20, size=(4, 12))
    probs, tape = nncore.net_forward(net, x_idx)
    assert np.isfinite(probs).all()
    assert np.isfinite(tape.h).all()
    assert probs.min() > 0.0 and probs.max() < 1.0
