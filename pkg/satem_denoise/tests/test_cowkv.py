import os

import numpy as np
import pytest

from satem_denoise.cowkv import (
    CoWkvParams,
    bench_kernel,
    cowkv,
    cowkv_grad,
    cowkv_naive,
    cowkv_scan,
    relative_error,
)
from satem_denoise.numerics import NonFiniteError, Tensor, finite_diff_check, parameter, sum_

slow = pytest.mark.skipif(
    os.environ.get("SATEM_DENOISE_SLOW") != "1", reason="set SATEM_DENOISE_SLOW=1 to run"
)


def random_inputs(T, C, seed=0, low=-1.0, high=1.0):
    rng = np.random.default_rng(seed)
    K = rng.uniform(low, high, size=(T, C))
    V = rng.uniform(low, high, size=(T, C))
    w = rng.uniform(-0.5, 1.0, size=C)
    u = rng.uniform(-1.0, 1.0, size=C)
    return K, V, w, u


def unidirectional_wkv(K, V, w, u):
    """classic causal WKV, used only to show the bidirectionality check has teeth"""
    T = K.shape[0]
    out = np.empty_like(V)
    for t in range(T):
        i = np.arange(t)
        weights = np.exp(K[:t] - (t - i - 1)[:, None] * w)
        center = np.exp(u + K[t])
        out[t] = ((weights * V[:t]).sum(axis=0) + center * V[t]) / (weights.sum(axis=0) + center)
    return out


def perturb_last_changes_first(kernel, K, V, w, u):
    V2 = V.copy()
    V2[-1] += 1.0
    return np.max(np.abs(kernel(K, V2, w, u)[0] - kernel(K, V, w, u)[0])) > 1e-12


def test_single_step_returns_values():
    K, V, w, u = random_inputs(1, 3)
    assert np.allclose(cowkv_naive(K, V, w, u), V)
    assert np.allclose(cowkv_scan(K, V, w, u), V)


def test_constant_values():
    K, _, w, u = random_inputs(7, 2)
    V = np.full_like(K, 5.0)
    assert np.allclose(cowkv_naive(K, V, w, u), 5.0)
    assert np.allclose(cowkv_scan(K, V, w, u), 5.0)


def test_naive_matches_direct_formula():
    K, V, w, u = random_inputs(4, 2, seed=11)
    expected = np.empty_like(V)
    for t in range(4):
        for c in range(2):
            num = den = 0.0
            for i in range(4):
                if i == t:
                    e = np.exp(u[c] + K[t, c])
                else:
                    e = np.exp(K[i, c] - (abs(t - i) - 1) * w[c])
                num += e * V[i, c]
                den += e
            expected[t, c] = num / den
    assert np.allclose(cowkv_naive(K, V, w, u), expected, rtol=1e-13)


@pytest.mark.parametrize("seed", range(100))
def test_scan_matches_naive(seed):
    rng = np.random.default_rng(seed)
    T, C = int(rng.integers(1, 257)), int(rng.integers(1, 17))
    K, V, w, u = random_inputs(T, C, seed=seed, low=-3, high=3)
    assert relative_error(cowkv_scan(K, V, w, u), cowkv_naive(K, V, w, u)) < 1e-10


def test_batched_inputs():
    K, V, w, u = random_inputs(9, 3, seed=5)
    stacked_K, stacked_V = np.stack([K, K[::-1]]), np.stack([V, V[::-1]])
    out = cowkv_scan(stacked_K, stacked_V, w, u)
    assert np.allclose(out[0], cowkv_naive(K, V, w, u))
    assert np.allclose(out[1], cowkv_naive(K[::-1], V[::-1], w, u))


def test_large_key_does_not_overflow():
    K, V, w, u = random_inputs(16, 2, seed=3)
    K[:] = 0.0
    K[5] = 80.0
    naive, scan = cowkv_naive(K, V, w, u), cowkv_scan(K, V, w, u)
    assert np.all(np.isfinite(scan))
    assert relative_error(scan, naive) < 1e-10


def test_extreme_keys_stay_finite():
    K, V, w, u = random_inputs(32, 4, seed=8, low=-700, high=700)
    assert np.all(np.isfinite(cowkv_scan(K, V, w, u)))


def test_convex_combination_bound():
    # 100 batches of 100 instances each
    rng = np.random.default_rng(21)
    violations = 0
    for _ in range(100):
        T, C = int(rng.integers(1, 20)), int(rng.integers(1, 5))
        K = rng.uniform(-5, 5, size=(100, T, C))
        V = rng.uniform(-5, 5, size=(100, T, C))
        w = rng.uniform(-1, 2, size=C)
        u = rng.uniform(-2, 2, size=C)
        out = cowkv_scan(K, V, w, u)
        tol = 1e-12 * np.max(np.abs(V))
        violations += np.sum(out < V.min(axis=-2, keepdims=True) - tol)
        violations += np.sum(out > V.max(axis=-2, keepdims=True) + tol)
    assert violations == 0


def test_bidirectional():
    K, V, w, u = random_inputs(10, 3, seed=2)
    assert perturb_last_changes_first(cowkv_naive, K, V, w, u)
    assert perturb_last_changes_first(cowkv_scan, K, V, w, u)


def test_unidirectional_reference_fails_bidirectionality():
    K, V, w, u = random_inputs(10, 3, seed=2)
    assert not perturb_last_changes_first(unidirectional_wkv, K, V, w, u)


def test_reversal_equivariance():
    K, V, w, u = random_inputs(12, 3, seed=4)
    forward = cowkv_scan(K, V, w, u)
    backward = cowkv_scan(K[::-1], V[::-1], w, u)
    assert np.allclose(backward[::-1], forward, rtol=1e-12)


def test_empty_sequence_raises():
    with pytest.raises(ValueError):
        cowkv_naive(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(2), np.zeros(2))


def test_non_finite_input_raises():
    K, V, w, u = random_inputs(4, 2)
    K[1, 1] = np.inf
    with pytest.raises(NonFiniteError):
        cowkv_scan(K, V, w, u)


def test_params_shape_checked():
    with pytest.raises(ValueError):
        CoWkvParams(parameter(np.zeros(3)), parameter(np.zeros(2)))


def test_initialization():
    params = CoWkvParams.initialize(4)
    assert params.channels == 4
    assert np.all(params.w.data > 0)
    assert np.all(np.diff(params.w.data) > 0)
    assert np.array_equal(params.u.data, np.zeros(4))


def test_zero_upstream_gives_zero_gradients():
    K, V, w, u = random_inputs(6, 3)
    for grad in cowkv_grad(K, V, w, u, np.zeros_like(K)):
        assert np.array_equal(grad, np.zeros_like(grad))


def test_non_finite_upstream_raises():
    K, V, w, u = random_inputs(6, 3)
    upstream = np.ones_like(K)
    upstream[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        cowkv_grad(K, V, w, u, upstream)


def numeric_gradients(K, V, w, u, upstream, h=1e-6):
    def loss(K, V, w, u):
        return float(np.sum(cowkv_naive(K, V, w, u) * upstream))

    arrays = [K.copy(), V.copy(), w.copy(), u.copy()]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            original = a[idx]
            a[idx] = original + h
            plus = loss(*arrays)
            a[idx] = original - h
            minus = loss(*arrays)
            a[idx] = original
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


@pytest.mark.parametrize("shape", [(6, 3), (8, 4), (1, 2)])
def test_gradient_matches_naive_finite_differences(shape):
    K, V, w, u = random_inputs(*shape, seed=7)
    upstream = np.random.default_rng(8).normal(size=K.shape)
    analytic = cowkv_grad(K, V, w, u, upstream)
    for a, n in zip(analytic, numeric_gradients(K, V, w, u, upstream)):
        assert np.allclose(a, n, rtol=1e-5, atol=1e-7)


def test_batched_gradient_sums_channel_parameters():
    K, V, w, u = random_inputs(5, 2, seed=9)
    upstream = np.random.default_rng(1).normal(size=K.shape)
    single = cowkv_grad(K, V, w, u, upstream)
    double = cowkv_grad(np.stack([K, K]), np.stack([V, V]), w, u, np.stack([upstream] * 2))
    assert np.allclose(double[2], 2 * single[2])
    assert np.allclose(double[3], 2 * single[3])
    assert np.allclose(double[0][1], single[0])


def test_constant_values_have_no_decay_gradient():
    K, _, w, u = random_inputs(7, 3, seed=6)
    V = np.full_like(K, 2.0)
    upstream = np.random.default_rng(2).normal(size=K.shape)
    _, _, dw, du = cowkv_grad(K, V, w, u, upstream)
    assert np.allclose(dw, 0.0, atol=1e-12)
    assert np.allclose(du, 0.0, atol=1e-12)


def test_tape_gradient_matches_finite_differences():
    K0, V0, w0, u0 = random_inputs(8, 4, seed=10)
    K, V = parameter(K0), parameter(V0)
    params = CoWkvParams(parameter(w0), parameter(u0))
    weights = np.random.default_rng(3).normal(size=K0.shape)

    def loss():
        return sum_(cowkv(K, V, params) * weights)

    assert finite_diff_check(loss, {"K": K, "V": V, "w": params.w, "u": params.u}) < 1e-5


def test_tape_op_on_constants_records_nothing():
    K0, V0, _, _ = random_inputs(3, 2)
    params = CoWkvParams.initialize(2).detached()
    out = cowkv(Tensor(K0), Tensor(V0), params)
    assert not out.requires_grad


def test_bench_kernel_schema():
    df = bench_kernel([8, 16], channels=2, repeats=1)
    assert list(df.columns) == ["T", "impl", "seconds", "rel_error"]
    assert len(df) == 4
    assert (df["rel_error"] < 1e-10).all()
    assert (df["seconds"] >= 0).all()


def test_bench_kernel_skips_naive_above_limit():
    df = bench_kernel([8, 32], channels=2, repeats=1, naive_max=8)
    assert list(df["impl"]) == ["scan", "naive", "scan"]


@slow
def test_scan_scales_linearly():
    df = bench_kernel([1024, 2048, 4096], channels=16, repeats=3, naive_max=1024)
    scan = df[df.impl == "scan"].set_index("T")["seconds"]
    assert 3 <= scan[4096] / scan[1024] <= 6
    assert 1.7 <= scan[2048] / scan[1024] <= 2.6


@slow
def test_naive_scales_quadratically():
    df = bench_kernel([1024, 2048, 4096], channels=16, repeats=2)
    naive = df[df.impl == "naive"].set_index("T")["seconds"]
    assert 12 <= naive[4096] / naive[1024] <= 24
