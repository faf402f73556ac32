import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cirsurrogate.codec import (
    CodecError,
    DegenerateWaveformError,
    ShapeCodec,
    TauGrid,
    WarpTriplet,
    factorize,
    fit_codec,
    fit_shape_basis,
    gaussian_weights,
    reconstruct,
)
from cirsurrogate.core import TimeGrid

T = TimeGrid().t


def pulse(t, amp, t0, k, plateau, t1=0.05):
    x = np.maximum(t / t0, 1e-12)
    return amp * (x**k * np.exp(-k * (x - 1.0)) + plateau * (1.0 - np.exp(-t / t1)))


def corpus(n, seed=0):
    r = np.random.default_rng(seed)
    H = [pulse(T, 10 ** r.uniform(-4, 0), r.uniform(0.04, 0.2), r.uniform(3, 12), r.uniform(0, 0.2))
         for _ in range(n)]
    return np.array(H)


@pytest.fixture(scope="module")
def codec():
    return fit_codec(corpus(120), T)


def test_factorize_hand_example():
    trip, _, _ = factorize([0, 1, 2, 1, 0], [1, 2, 3, 4, 5.0])
    assert (trip.A, trip.t_p) == (2.0, 3.0)
    assert trip.w == pytest.approx(math.sqrt(0.5), rel=1e-12)


def test_peak_ties_take_earliest():
    trip, _, _ = factorize([0, 2, 1, 2, 0], [1, 2, 3, 4, 5.0])
    assert trip.t_p == 2.0


@settings(max_examples=60, deadline=None)
@given(amp=st.floats(1e-6, 10), t0=st.floats(0.03, 0.3), k=st.floats(2, 15), plateau=st.floats(0, 0.5))
def test_unit_shape_is_one_at_zero(amp, t0, k, plateau):
    grid = TauGrid()
    _, y, _ = factorize(pulse(T, amp, t0, k, plateau), T, grid)
    assert y[np.argmin(abs(grid.tau))] == 1.0


def test_shift_equivariance():
    dt = T[1] - T[0]
    h = pulse(T, 1.0, 0.1, 8, 0.0)
    shifted = np.concatenate([np.zeros(20), h[:-20]])
    a, ya, _ = factorize(h, T)
    b, yb, _ = factorize(shifted, T)
    assert b.t_p == pytest.approx(a.t_p + 20 * dt, rel=1e-12)
    # the last 20 samples (~2e-9 of the mass) drop off the end of the grid
    assert (b.A, b.w) == pytest.approx((a.A, a.w), rel=1e-6)
    np.testing.assert_allclose(ya, yb, atol=1e-6)


def test_degenerate_waveforms():
    with pytest.raises(DegenerateWaveformError):
        factorize(np.zeros(10), np.arange(1.0, 11))
    with pytest.raises(DegenerateWaveformError):
        factorize(np.eye(10)[3], np.arange(1.0, 11))


def test_untruncated_reconstruction_is_identity():
    t = np.linspace(1e-3, 0.5, 2000)
    h = np.exp(-((t - 0.2) / 0.03) ** 2) * 3.0
    grid = TauGrid()
    trip, y, trunc = factorize(h, t, grid)
    assert trunc < 1e-4
    back = reconstruct(trip, y, t, grid)
    tau = (t - trip.t_p) / trip.w
    inside = (tau >= grid.tau_min) & (tau <= grid.tau_max)
    assert np.max(abs(back - h)[inside]) <= 1e-3 * trip.A


def test_truncation_diagnostic():
    h = pulse(T, 1.0, 0.05, 6, 0.0)
    h[-1] = 1.0  # far tail outside tau_max
    _, _, trunc = factorize(h, T, TauGrid(201, -1, 1))
    assert trunc > 0


def test_weights_sum_to_grid_length():
    tau = TauGrid().tau
    w = gaussian_weights(tau, 2.0)
    assert w.sum() == pytest.approx(len(tau), rel=1e-10)
    with pytest.raises(CodecError):
        gaussian_weights(tau, 0.1)


def test_basis_orthonormal_and_centered(codec):
    sb = codec.shape
    N = len(sb.weights)
    G = (sb.basis * sb.weights) @ sb.basis.T / N
    np.testing.assert_allclose(G, np.eye(codec.K), atol=1e-8)
    shapes = np.array([factorize(h, T)[1] for h in corpus(120)])
    mean_coef = sb.project(shapes.mean(axis=0))[0]
    np.testing.assert_allclose(mean_coef, 0.0, atol=1e-8)
    assert sb.explained[-1] >= 0.995


def test_identical_shapes_give_single_component():
    y = np.exp(-np.linspace(-3, 3, 61) ** 2)
    sb = fit_shape_basis(np.tile(y, (5, 1)), gaussian_weights(np.linspace(-4, 8, 61), 2.0))
    assert sb.K == 1
    np.testing.assert_allclose(sb.mu, y, atol=1e-15)


def test_two_sample_closed_form():
    tau = np.linspace(-4, 8, 61)
    w = gaussian_weights(tau, 2.0)
    N = len(tau)
    mu = np.exp(-tau**2)
    delta = 0.1 * np.sin(tau)
    sb = fit_shape_basis(np.array([mu + delta, mu - delta]), w)
    norm = math.sqrt(np.sum(w * delta**2) / N)
    assert sb.K == 1
    phi = sb.basis[0] * np.sign(sb.basis[0] @ delta)
    np.testing.assert_allclose(phi, delta / norm, atol=1e-10)
    coefs = np.sort(sb.project(np.array([mu + delta, mu - delta]))[:, 0] * np.sign(sb.basis[0] @ delta))
    np.testing.assert_allclose(coefs, [-norm, norm], rtol=1e-10)
    # 2x2 Gram matrix of residuals under the weighted inner product
    R = np.array([delta, -delta])
    gram = (R * w) @ R.T / N
    lam = np.linalg.eigvalsh(gram)
    assert lam[-1] == pytest.approx(2 * norm**2, rel=1e-12)


def brute_force_basis(shapes, w, K):
    """Eigenvectors of the weighted covariance operator Rt R W / N, normalized in the weighted norm."""
    N = shapes.shape[1]
    R = shapes - shapes.mean(axis=0)
    M = R.T @ R @ np.diag(w) / N
    lam, V = np.linalg.eig(M)
    order = np.argsort(-lam.real)[:K]
    V = V[:, order].real.T
    norms = np.sqrt((V**2 * w).sum(axis=1) / N)
    return V / norms[:, None]


def toy_shapes(n=50, n_tau=61, seed=4):
    r = np.random.default_rng(seed)
    tau = np.linspace(-4, 8, n_tau)
    rows = [r.uniform(0.8, 1.2) * np.exp(-((tau - r.normal(0, 0.3)) / r.uniform(0.7, 1.5)) ** 2)
            + r.uniform(0, 0.1) * np.exp(-tau / 3) * (tau > 0) for _ in range(n)]
    return tau, np.array(rows)


def test_basis_matches_brute_force_eigendecomposition():
    tau, Y = toy_shapes()
    w = gaussian_weights(tau, 2.0)
    sb = fit_shape_basis(Y, w)
    ref = brute_force_basis(Y, w, sb.K)
    sign = np.sign(np.sum(sb.basis * ref, axis=1))
    assert np.max(abs(sb.basis * sign[:, None] - ref)) <= 1e-6


def test_too_few_samples():
    tau, Y = toy_shapes(3)
    with pytest.raises(CodecError):
        fit_shape_basis(Y[:1], gaussian_weights(tau, 2.0))
    with pytest.raises(CodecError):
        fit_shape_basis(Y, gaussian_weights(tau, 2.0), variance_target=0.9999999, K_max=1)


def test_mean_shape_has_zero_coefficients(codec):
    np.testing.assert_allclose(codec.shape.project(codec.shape.mu), 0.0, atol=1e-12)


def test_training_targets_standardized(codec):
    raw = np.array([codec.raw_target(h, T) for h in corpus(120)])
    Z = codec.standardize(raw) / codec.W_loss
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-10)


def test_loss_weights(codec):
    assert tuple(codec.W_loss[-3:]) == (4.0, 5.0, 3.0)
    assert np.all(codec.W_loss[:-3] == 1.0)


def test_target_space_identity(codec, rng):
    raw = rng.normal(size=codec.m) * codec.sigma_Y + codec.mu_Y
    np.testing.assert_allclose(codec.unstandardize(codec.standardize(raw)), raw, rtol=1e-12, atol=1e-12)
    c = rng.normal(size=codec.K)
    np.testing.assert_allclose(codec.shape.project(codec.shape.expand(c))[0], c, atol=1e-12)


def test_reweighting_consistency(codec, rng):
    y = rng.normal(size=codec.m)
    np.testing.assert_allclose((y / codec.W_loss) * codec.W_loss, y, rtol=1e-15, atol=0)


def test_decode_mean_shape(codec):
    raw = codec.mu_Y.copy()
    raw[: codec.K] = 0.0
    h = codec.decode(codec.standardize(raw), T)
    A, tp, w = math.exp(raw[codec.K]), raw[codec.K + 1], math.exp(raw[codec.K + 2])
    expect = np.maximum(A * np.interp((T - tp) / w, codec.tau_grid.tau, codec.shape.mu, left=0, right=0), 0)
    np.testing.assert_allclose(h, expect, rtol=1e-12, atol=0)


def test_amplitude_scales_output(codec, rng):
    raw = codec.mu_Y + 0.3 * codec.sigma_Y * rng.normal(size=codec.m)
    h1 = codec.decode(codec.standardize(raw), T)
    raw[codec.K] += math.log(2.0)
    h2 = codec.decode(codec.standardize(raw), T)
    np.testing.assert_allclose(h2, 2 * h1, rtol=1e-12)


def test_decode_rejects_non_finite(codec):
    y = np.zeros(codec.m)
    y[0] = np.nan
    with pytest.raises(CodecError):
        codec.decode(y, T)


def test_round_trip_on_training_set():
    # the synthetic family is more varied than solver output, so it needs a tighter target
    H = corpus(120)
    codec = fit_codec(H, T, variance_target=0.999)
    errs = [np.linalg.norm(codec.decode(codec.encode(h, T), T) - h) / np.linalg.norm(h) for h in H]
    assert np.mean(np.array(errs) <= 0.05) >= 0.95


def test_serialization(tmp_path, codec):
    path = tmp_path / "codec.bin"
    codec.save(path)
    back = ShapeCodec.load(path)
    assert back.content_hash() == codec.content_hash()
    head = back.header()
    assert {"N_tau", "tau_min", "tau_max", "sigma_w", "K", "mu_Y", "sigma_Y", "W_loss"} <= set(head)
    y = codec.encode(corpus(1, 9)[0], T)
    np.testing.assert_array_equal(back.decode(y, T), codec.decode(y, T))
    with pytest.raises(CodecError):
        ShapeCodec.from_bytes(b"garbage" * 4)


def test_reconstruct_zero_outside_grid():
    trip = WarpTriplet(1.0, 0.1, 0.01)
    out = reconstruct(trip, np.ones(1201), np.array([0.0, 0.1, 0.5]))
    assert list(out) == [0.0, 1.0, 0.0]
