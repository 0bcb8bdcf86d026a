from __future__ import annotations

import math

import numpy as np
import pytest

from harper.cocycle import (
    FourierSeries,
    build_q_conjugation,
    cocycle_product,
    harper_cocycle,
    lyapunov_closed_form,
    lyapunov_numeric,
    strip_norm,
    transfer_matrix,
    verified_strip,
)
from harper.config import ConfigError
from harper.operator import Coupling, build_truncation, dual_coupling, dual_log_ratio, eigenvalues


def test_fourier_series_evaluation_and_shift(golden):
    f = FourierSeries.from_modes({-1: 0.5j, 0: 1.0, 2: 0.25})
    xs = np.linspace(0.0, 1.0, 9)
    expected = 0.5j * np.exp(-2j * np.pi * xs) + 1.0 + 0.25 * np.exp(4j * np.pi * xs)
    assert np.allclose(f(xs), expected)
    assert np.allclose(f.shifted(golden.value)(xs), f(xs + golden.value))
    assert f.coefficient(5) == 0j


def test_fourier_series_from_samples_recovers_modes():
    xs = np.arange(64) / 64
    values = 2.0 + np.cos(2 * np.pi * xs) + 0.1j * np.sin(6 * np.pi * xs)
    f = FourierSeries.from_samples(values, 8)
    assert f.coefficient(0) == pytest.approx(2.0)
    assert f.coefficient(1) == pytest.approx(0.5)
    assert f.coefficient(3) == pytest.approx(0.05)
    with pytest.raises(ConfigError):
        FourierSeries.from_samples(values, 40)


def test_strip_norm_of_constant_and_single_mode():
    lo, hi = strip_norm(FourierSeries.constant(3.0), 0.2)
    assert lo == pytest.approx(3.0) and hi == pytest.approx(3.0)
    lo, hi = strip_norm(FourierSeries.from_modes({1: 1.0}), 0.1)
    assert lo <= hi
    assert lo == pytest.approx(math.exp(2 * math.pi * 0.1), rel=1e-9)


def test_renormalized_cocycle_is_unimodular(extended, golden):
    xs = np.random.default_rng(0).random(200)
    dets = np.linalg.det(transfer_matrix(extended, golden, 0.7, xs))
    assert np.allclose(dets, 1.0, atol=1e-12)


def test_raw_cocycle_iterates_the_eigen_equation(extended, golden):
    # (u_{n+1}, u_n) = A(x + nα) (u_n, u_{n-1}) for H u = E u
    op = build_truncation(extended, golden, 0.31, 60)
    dense = op.to_dense()
    E, vecs = np.linalg.eigh(dense)
    u, energy = vecs[:, 30], E[30]
    for n in range(5, 50):
        x = 0.31 + n * golden.value
        A = transfer_matrix(extended, golden, energy, x, kind="raw")
        assert np.allclose(A @ np.array([u[n], u[n - 1]]), [u[n + 1], u[n]], atol=1e-10)


def test_unknown_kind_is_rejected(amo, golden):
    with pytest.raises(ConfigError):
        transfer_matrix(amo, golden, 0.0, 0.1, kind="other")


def test_renormalized_product_matches_naive_product(extended, golden):
    coc = harper_cocycle(extended, golden, 0.4)
    xs = np.array([0.1, 0.6])
    naive = np.broadcast_to(np.eye(2, dtype=complex), (2, 2, 2)).copy()
    for l in range(100):
        naive = coc(xs + l * golden.value) @ naive
    product = cocycle_product(coc, xs, 100)
    assert np.allclose(product.full(), naive, rtol=1e-9)
    assert np.allclose(product.log_norm(), np.log(np.linalg.norm(naive, ord=2, axis=(-2, -1))))


def test_closed_form_lyapunov(amo):
    assert lyapunov_closed_form(amo) == math.log(2.0)
    with pytest.raises(ConfigError):
        lyapunov_closed_form(Coupling(l1=0.5, l2=0.5, l3=0.7))


def _dual_spectrum_points(lam, freq, count):
    dual = dual_coupling(lam)
    evs = eigenvalues(build_truncation(dual, freq, 0.0, 400))
    return dual, evs[np.linspace(40, 360, count).astype(int)]


def test_dual_lyapunov_on_spectrum(amo, golden):
    dual, energies = _dual_spectrum_points(amo, golden, 5)
    for E in energies:
        est = lyapunov_numeric(harper_cocycle(dual, golden, E), 2000, 64)
        assert est.value == pytest.approx(math.log(2.0), rel=0.02)


@pytest.mark.slow
def test_dual_lyapunov_on_spectrum_full_run(amo, extended, golden):
    for lam in (amo, extended):
        dual, energies = _dual_spectrum_points(lam, golden, 20)
        for E in energies:
            est = lyapunov_numeric(harper_cocycle(dual, golden, E), 10_000, 64)
            assert est.value == pytest.approx(dual_log_ratio(lam), rel=0.02)


def test_lyapunov_numeric_guards(amo, golden):
    coc = harper_cocycle(amo, golden, 0.0)
    with pytest.raises(ConfigError):
        lyapunov_numeric(coc, 50, 64)
    with pytest.raises(ConfigError):
        lyapunov_numeric(coc, 1000, 8)


def test_q_conjugation_amo_is_exact(amo, golden):
    qconj = build_q_conjugation(amo, golden, 64)
    assert qconj.residual <= 1e-13
    assert np.allclose(qconj.f.coeffs, 0.0)


def test_q_conjugation_extended(extended, golden):
    qconj = build_q_conjugation(extended, golden, 64, energy=0.3)
    assert qconj.residual <= 1e-8
    assert qconj.cohomological_residual <= 1e-8
    assert qconj.strip == pytest.approx(dual_log_ratio(extended) / (4 * math.pi))


def test_q_conjugation_needs_region_two(golden):
    with pytest.raises(ConfigError):
        build_q_conjugation(Coupling(l1=0.5, l2=0.5, l3=0.7), golden, 32)


def test_verified_strip_is_inside_the_analytic_strip(extended, golden):
    qconj = build_q_conjugation(extended, golden, 64)
    s = verified_strip(qconj, extended, golden, steps=8)
    assert 0.0 <= s < dual_log_ratio(extended) / (2 * math.pi)


def test_products_compose_along_the_orbit(extended, golden):
    # A_{k+m}(x) = A_k(x + mα) A_m(x)
    coc = harper_cocycle(extended, golden, 0.4)
    xs = np.array([0.05, 0.33, 0.8])
    k, m = 30, 20
    whole = cocycle_product(coc, xs, k + m).full()
    split = cocycle_product(coc, xs + m * golden.value, k).full() @ cocycle_product(coc, xs, m).full()
    scale = np.linalg.norm(whole, ord=2, axis=(-2, -1))[..., None, None]
    assert np.allclose(split / scale, whole / scale, rtol=0.0, atol=1e-10)


@pytest.mark.parametrize("energy", [0.4, 5.0])
def test_lyapunov_estimates_are_subadditive(extended, golden, energy):
    coc = harper_cocycle(extended, golden, energy)
    short = lyapunov_numeric(coc, 500, 64)
    long = lyapunov_numeric(coc, 1000, 64)
    assert long.value <= short.value + 1e-3
    assert long.value <= long.half_value + 1e-3


def test_q_residual_falls_with_the_cutoff(extended, golden):
    residuals = [build_q_conjugation(extended, golden, cutoff).residual for cutoff in (2, 4, 8)]
    assert residuals[0] > residuals[1] > residuals[2]


def test_verified_strip_bisects_to_the_edge_when_exact(amo, golden):
    qconj = build_q_conjugation(amo, golden, 16)
    top = dual_log_ratio(amo) / (2 * math.pi)
    assert verified_strip(qconj, amo, golden, steps=8) == pytest.approx(top * (1 - 2.0 ** -8))
