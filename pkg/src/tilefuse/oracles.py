"""Independent reference implementations used to validate the engine.

Everything here works on plain float64 ndarrays and deliberately shares no
code with the engine modules: matrix products use either a pure-Python
triple loop (``gemm_ref``) or whole-matrix ``np.matmul`` in canonical
unfused operator order (the layer references), never the tiled mainloop.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ProbeError

# ===================================================================
# Dense primitives
# ===================================================================


def gemm_ref(a, b, trans_a: bool = False, trans_b: bool = False) -> np.ndarray:
    """Matrix product by explicit triple loop in binary64.

    k is accumulated in ascending order per output element, one add at a
    time. Slow on purpose: this is the route the engine is checked against.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if trans_a:
        a = a.T
    if trans_b:
        b = b.T
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"inner dims differ: {k} vs {k2}")
    rows_a = a.tolist()
    rows_b = b.tolist()
    out = []
    for i in range(m):
        ai = rows_a[i]
        acc = [0.0] * n
        for kk in range(k):
            aik = ai[kk]
            bk = rows_b[kk]
            acc = [c + aik * bv for c, bv in zip(acc, bk)]
        out.append(acc)
    return np.array(out, dtype=np.float64)


def sigmoid_ref(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu_ref(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * sigmoid_ref(x)


def rmsnorm_ref(x, gamma, eps: float = 1e-6):
    """Root-mean-square normalization with learned per-column scale.

    Returns (normalized output, per-row inverse RMS).
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=1) + eps)
    return x * inv_rms[:, None] * gamma[None, :], inv_rms


def rmsnorm_backward_ref(grad_out, x, gamma, eps: float = 1e-6):
    """Analytic backward of rmsnorm_ref.

    grad_out is the gradient w.r.t. the normalized output. Returns
    (grad_x, grad_gamma). The per-row statistic s = mean(grad_out * out)
    is formed explicitly, matching the derivation
        grad_x = r * (grad_out * gamma - (x * r) * s).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=1) + eps)
    normed = x * inv_rms[:, None]
    s = np.mean(grad_out * normed * gamma[None, :], axis=1)
    grad_x = inv_rms[:, None] * (grad_out * gamma[None, :] - normed * s[:, None])
    grad_gamma = np.sum(grad_out * normed, axis=0)
    return grad_x, grad_gamma


def rope_ref(x, cos, sin) -> np.ndarray:
    """Rotate adjacent column pairs (2k, 2k+1) by per-position angles.

    cos/sin are pre-broadcast to the full output shape; each output lane
    reads the table entry at its own position.
    """
    x = np.asarray(x, dtype=np.float64)
    cos = np.asarray(cos, dtype=np.float64)
    sin = np.asarray(sin, dtype=np.float64)
    if x.shape[1] % 2:
        raise DimensionError(f"pairwise rotation needs even width, got {x.shape[1]}")
    x0, x1 = x[:, ::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, ::2] = x0 * cos[:, ::2] - x1 * sin[:, ::2]
    out[:, 1::2] = x0 * sin[:, 1::2] + x1 * cos[:, 1::2]
    return out


def rope_backward_ref(grad_out, cos, sin) -> np.ndarray:
    """Adjoint of rope_ref (transpose of the per-pair rotation)."""
    g = np.asarray(grad_out, dtype=np.float64)
    cos = np.asarray(cos, dtype=np.float64)
    sin = np.asarray(sin, dtype=np.float64)
    g0, g1 = g[:, ::2], g[:, 1::2]
    out = np.empty_like(g)
    out[:, ::2] = g0 * cos[:, ::2] + g1 * sin[:, 1::2]
    out[:, 1::2] = -g0 * sin[:, ::2] + g1 * cos[:, 1::2]
    return out


def swiglu_ref(z) -> np.ndarray:
    """Gated activation on interleaved columns: even lanes gate, odd lanes up.

    out[:, k] = silu(z[:, 2k]) * z[:, 2k+1]; output has half the width.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] % 2:
        raise DimensionError(f"interleaved split needs even width, got {z.shape[1]}")
    gate, up = z[:, ::2], z[:, 1::2]
    return silu_ref(gate) * up


def swiglu_backward_ref(grad_out, z) -> np.ndarray:
    """Gradient of swiglu_ref w.r.t. the interleaved pre-activation."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    gate, up = z[:, ::2], z[:, 1::2]
    sig = sigmoid_ref(gate)
    sil = gate * sig
    grad_up = grad_out * sil
    grad_gate = grad_out * up * (sig + sil * (1.0 - sig))
    out = np.empty_like(z)
    out[:, ::2] = grad_gate
    out[:, 1::2] = grad_up
    return out


def logsumexp_ref(z) -> np.ndarray:
    """Row-wise log-sum-exp with the usual max shift."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=1)
    return m + np.log(np.sum(np.exp(z - m[:, None]), axis=1))


def cross_entropy_ref(logits, labels):
    """Per-row -log softmax probability of the label, plus the mean."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    lse = logsumexp_ref(logits)
    picked = logits[np.arange(logits.shape[0]), labels]
    losses = lse - picked
    return losses, float(np.mean(losses))


# ===================================================================
# Pattern references (canonical unfused operator order, np.matmul)
# ===================================================================


def grrg_ref(x, w0, z, gamma, w1, eps: float = 1e-6) -> dict:
    """GEMM -> residual add -> rmsnorm -> GEMM, via the triple-loop GEMM."""
    h0 = gemm_ref(x, w0)
    h1 = h0 + np.asarray(z, dtype=np.float64)
    normed, inv_rms = rmsnorm_ref(h1, gamma, eps)
    y = gemm_ref(normed, w1)
    return {"h0": h0, "h1": h1, "normed": normed, "inv_rms": inv_rms, "y": y}


def layer_ref_forward(x, z, w_out, gamma_ffn, w_gate_up, w_down, gamma_qkv, w_qkv,
                      cos, sin, eps: float = 1e-6) -> dict:
    """Canonical transformer sub-layer chain, unfused, with BLAS matmuls.

    out-proj GEMM -> residual -> rmsnorm -> gate/up GEMM -> swiglu ->
    down GEMM -> residual -> rmsnorm -> qkv GEMM -> rope. Returns every
    intermediate so backward references and tape checks can reuse them.
    """
    x = np.asarray(x, dtype=np.float64)
    h1a = x @ np.asarray(w_out, dtype=np.float64) + np.asarray(z, dtype=np.float64)
    na, ra = rmsnorm_ref(h1a, gamma_ffn, eps)
    za = na @ np.asarray(w_gate_up, dtype=np.float64)
    oa = swiglu_ref(za)
    h1b = oa @ np.asarray(w_down, dtype=np.float64) + h1a
    nb, rb = rmsnorm_ref(h1b, gamma_qkv, eps)
    zb = nb @ np.asarray(w_qkv, dtype=np.float64)
    qkv = rope_ref(zb, cos, sin)
    return {
        "h1a": h1a, "na": na, "ra": ra, "za": za, "oa": oa,
        "h1b": h1b, "nb": nb, "rb": rb, "zb": zb, "qkv": qkv,
    }


def layer_ref_backward(grad_qkv, grad_residual, fwd: dict, x, w_out, gamma_ffn,
                       w_gate_up, w_down, gamma_qkv, w_qkv, cos, sin,
                       eps: float = 1e-6) -> dict:
    """Analytic backward of layer_ref_forward.

    grad_qkv and grad_residual are the gradients w.r.t. the two layer
    outputs (qkv and the residual stream h1b); grad_residual may be None.
    """
    grad_zb = rope_backward_ref(grad_qkv, cos, sin)
    grad_nb = grad_zb @ np.asarray(w_qkv, dtype=np.float64).T
    grad_w_qkv = fwd["nb"].T @ grad_zb
    grad_h1b, grad_gamma_qkv = rmsnorm_backward_ref(grad_nb, fwd["h1b"], gamma_qkv, eps)
    if grad_residual is not None:
        grad_h1b = grad_h1b + np.asarray(grad_residual, dtype=np.float64)
    grad_oa = grad_h1b @ np.asarray(w_down, dtype=np.float64).T
    grad_w_down = fwd["oa"].T @ grad_h1b
    grad_za = swiglu_backward_ref(grad_oa, fwd["za"])
    grad_na = grad_za @ np.asarray(w_gate_up, dtype=np.float64).T
    grad_w_gate_up = fwd["na"].T @ grad_za
    grad_h1a, grad_gamma_ffn = rmsnorm_backward_ref(grad_na, fwd["h1a"], gamma_ffn, eps)
    grad_h1a = grad_h1a + grad_h1b
    grad_x = grad_h1a @ np.asarray(w_out, dtype=np.float64).T
    grad_w_out = np.asarray(x, dtype=np.float64).T @ grad_h1a
    return {
        "x": grad_x, "z": grad_h1a.copy(),
        "w_out": grad_w_out, "gamma_ffn": grad_gamma_ffn,
        "w_gate_up": grad_w_gate_up, "w_down": grad_w_down,
        "gamma_qkv": grad_gamma_qkv, "w_qkv": grad_w_qkv,
    }


# ===================================================================
# Finite differences
# ===================================================================


def finite_diff_grad(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an ndarray.

    Probes every element with step h; any non-finite evaluation raises
    ProbeError rather than returning garbage.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        fp = float(f(xp))
        xm = x.copy()
        xm[idx] -= h
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ProbeError(f"non-finite probe at index {idx}: {fp}, {fm}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
