"""Reference implementations against frozen hand-derived values.

These oracles anchor every other test, so they get checked against numbers
computed outside the package (closed forms and a central-difference probe),
never against package code.
"""

import math

import numpy as np
import pytest

from tilefuse import oracles


def test_gemm_ref_known_product():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0, 6.0], [7.0, 8.0]]
    assert np.array_equal(oracles.gemm_ref(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_gemm_ref_transposes():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    got = oracles.gemm_ref(a, b, trans_b=True)
    assert np.allclose(got, a @ b.T, rtol=0, atol=1e-15)
    got = oracles.gemm_ref(a.T, b, trans_a=True, trans_b=True)
    assert np.allclose(got, a @ b.T, rtol=0, atol=1e-15)


def test_gemm_ref_matches_blas():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((7, 9)), rng.standard_normal((9, 5))
    assert np.allclose(oracles.gemm_ref(a, b), a @ b, rtol=1e-14, atol=1e-14)


def test_sigmoid_silu_frozen():
    assert oracles.sigmoid_ref(np.array([1.0]))[0] == pytest.approx(
        0.7310585786300049, abs=1e-16
    )
    assert oracles.sigmoid_ref(np.array([0.0]))[0] == 0.5
    # large negative arguments must not overflow
    assert oracles.sigmoid_ref(np.array([-1000.0]))[0] == 0.0
    assert oracles.silu_ref(np.array([0.0]))[0] == 0.0


def test_swiglu_frozen_pair():
    # gate 1, up 2: silu(1) * 2
    out = oracles.swiglu_ref(np.array([[1.0, 2.0]]))
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(1.4621171572600098, abs=1e-16)


def test_swiglu_backward_silu_slope_at_zero():
    # d silu/dx at 0 is sigma(0) = 0.5; up lane 3 scales it into the gate slot
    z = np.array([[0.0, 3.0]])
    g = np.array([[1.0]])
    grad = oracles.swiglu_backward_ref(g, z)
    assert grad[0, 0] == pytest.approx(1.5, abs=1e-15)
    assert grad[0, 1] == pytest.approx(oracles.silu_ref(np.array([0.0]))[0], abs=1e-15)


def test_rmsnorm_frozen_row():
    x = np.array([[3.0, 4.0]])
    gamma = np.array([1.0, 1.0])
    normed, inv_rms = oracles.rmsnorm_ref(x, gamma, eps=0.0)
    assert inv_rms[0] == pytest.approx(0.282842712474619, abs=1e-16)
    assert normed[0, 0] == pytest.approx(0.848528137423857, abs=1e-15)
    assert normed[0, 1] == pytest.approx(1.131370849898476, abs=1e-15)


def test_rmsnorm_gamma_scales_columns():
    x = np.array([[3.0, 4.0]])
    normed, _ = oracles.rmsnorm_ref(x, np.array([2.0, 0.5]), eps=0.0)
    base, _ = oracles.rmsnorm_ref(x, np.array([1.0, 1.0]), eps=0.0)
    assert np.allclose(normed, base * [2.0, 0.5], rtol=0, atol=1e-15)


def test_rmsnorm_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 6))
    gamma = 1 + 0.1 * rng.standard_normal(6)
    grad_out = rng.standard_normal((3, 6))

    def loss_x(v):
        return float(np.sum(oracles.rmsnorm_ref(v, gamma)[0] * grad_out))

    def loss_g(v):
        return float(np.sum(oracles.rmsnorm_ref(x, v)[0] * grad_out))

    gx, gg = oracles.rmsnorm_backward_ref(grad_out, x, gamma)
    assert np.allclose(gx, oracles.finite_diff_grad(loss_x, x), rtol=1e-6, atol=1e-8)
    assert np.allclose(gg, oracles.finite_diff_grad(loss_g, gamma), rtol=1e-6, atol=1e-8)


def test_rope_quarter_turn():
    # cos 0 / sin 1 sends the pair (1, 0) to (0, 1)
    x = np.array([[1.0, 0.0]])
    cos, sin = np.zeros((1, 2)), np.ones((1, 2))
    assert np.allclose(oracles.rope_ref(x, cos, sin), [[0.0, 1.0]], atol=1e-16)


def test_rope_backward_inverts_rope():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 8))
    theta = rng.uniform(0, 2 * np.pi, size=(5, 4))
    cos = np.repeat(np.cos(theta), 2, axis=1)
    sin = np.repeat(np.sin(theta), 2, axis=1)
    y = oracles.rope_ref(x, cos, sin)
    assert np.allclose(oracles.rope_backward_ref(y, cos, sin), x, atol=1e-14)
    # rotation preserves row norms
    assert np.allclose(
        np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1), rtol=1e-14
    )


def test_logsumexp_frozen():
    assert oracles.logsumexp_ref(np.zeros((1, 2)))[0] == pytest.approx(
        0.6931471805599453, abs=1e-16
    )
    shifted = oracles.logsumexp_ref(np.array([[1000.0, 1000.0]]))
    assert shifted[0] == pytest.approx(1000.0 + 0.6931471805599453, abs=1e-12)


def test_cross_entropy_uniform_logits():
    losses, mean = oracles.cross_entropy_ref(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert np.allclose(losses, math.log(4.0), atol=1e-15)
    assert mean == pytest.approx(1.3862943611198906, abs=1e-15)


def test_cross_entropy_prefers_true_label():
    logits = np.array([[5.0, 0.0], [0.0, 5.0]])
    losses, _ = oracles.cross_entropy_ref(logits, np.array([0, 1]))
    assert np.all(losses < 0.01)


def test_grrg_ref_composition():
    rng = np.random.default_rng(5)
    x, w0 = rng.standard_normal((4, 3)), rng.standard_normal((3, 6))
    z = rng.standard_normal((4, 6))
    gamma = 1 + 0.1 * rng.standard_normal(6)
    w1 = rng.standard_normal((6, 2))
    out = oracles.grrg_ref(x, w0, z, gamma, w1)
    h1 = x @ w0 + z
    normed, _ = oracles.rmsnorm_ref(h1, gamma)
    assert np.allclose(out["h1"], h1, atol=1e-13)
    assert np.allclose(out["y"], normed @ w1, atol=1e-13)


def test_layer_ref_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    m, d, ffn = 2, 4, 8
    x, z = rng.standard_normal((m, d)), rng.standard_normal((m, d))
    w_out = rng.standard_normal((d, d)) * 0.3
    gamma_ffn = 1 + 0.1 * rng.standard_normal(d)
    w_gate_up = rng.standard_normal((d, ffn)) * 0.3
    w_down = rng.standard_normal((ffn // 2, d)) * 0.3
    gamma_qkv = 1 + 0.1 * rng.standard_normal(d)
    w_qkv = rng.standard_normal((d, 3 * d)) * 0.3
    theta = rng.uniform(0, 2 * np.pi, size=(m, 3 * d // 2))
    cos = np.repeat(np.cos(theta), 2, axis=1)
    sin = np.repeat(np.sin(theta), 2, axis=1)
    g_qkv = rng.standard_normal((m, 3 * d))

    fwd = oracles.layer_ref_forward(
        x, z, w_out, gamma_ffn, w_gate_up, w_down, gamma_qkv, w_qkv, cos, sin
    )
    grads = oracles.layer_ref_backward(
        g_qkv, None, fwd, x, w_out, gamma_ffn, w_gate_up, w_down,
        gamma_qkv, w_qkv, cos, sin,
    )

    def loss_wrt_x(v):
        out = oracles.layer_ref_forward(
            v, z, w_out, gamma_ffn, w_gate_up, w_down, gamma_qkv, w_qkv, cos, sin
        )
        return float(np.sum(out["qkv"] * g_qkv))

    fd = oracles.finite_diff_grad(loss_wrt_x, x)
    assert np.allclose(grads["x"], fd, rtol=1e-5, atol=1e-7)


def test_finite_diff_grad_quadratic():
    fd = oracles.finite_diff_grad(lambda v: float(np.sum(v**2)), np.array([3.0, -2.0]))
    assert np.allclose(fd, [6.0, -4.0], atol=1e-8)
