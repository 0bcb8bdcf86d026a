from __future__ import annotations

import math

import numpy as np
import pytest

from harper.arithmetic import ResonanceSet
from harper.cocycle import FourierSeries, MatrixCocycle, build_q_conjugation
from harper.config import ConfigError, NumericGuardError
from harper.operator import Coupling, dual_log_ratio
from harper.reducibility import (
    EPSILONS,
    Stage,
    bloch_decay_rate,
    build_windowed_vector,
    complete_to_sl2,
    conjugation_residuals,
    dual_bloch_wave,
    epsilon_intervals,
    holder_certificate,
    homological_eliminate,
    reducibility_config,
    run_pipeline,
)


def _upper_cocycle(freq, theta, b):
    e = np.exp(2j * np.pi * theta)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2, 2), dtype=complex)
        out[..., 0, 0] = e
        out[..., 1, 1] = 1.0 / e
        out[..., 0, 1] = b(x)
        return out

    return MatrixCocycle(freq=freq, kind="upper", evaluator=evaluate)


def _offdiag(x):
    return 0.3 * np.cos(2 * np.pi * x) + 0.1 * np.sin(4 * np.pi * x)


def _identity_frame():
    return complete_to_sl2([FourierSeries.constant(1.0), FourierSeries.constant(0.0)])


# --- Bloch wave ---
@pytest.fixture(scope="module")
def amo_wave(amo, golden, centered_energy):
    E = centered_energy(amo, golden, 0.1, 60)
    return dual_bloch_wave(amo, golden, E, 60, theta_grid=64)


def test_bloch_wave_is_normalized_at_the_origin(amo_wave):
    assert amo_wave.coefficient(0) == 1.0
    assert not amo_wave.flagged
    assert np.max(np.abs(amo_wave.coeffs)) <= 1.05
    assert amo_wave.dual_eigen_residual <= 1e-6
    assert amo_wave.candidates


def test_bloch_wave_decays(amo_wave):
    assert bloch_decay_rate(amo_wave, 5, 40) >= 0.3
    for k in range(10, 41):
        for sign in (1, -1):
            assert abs(amo_wave.coefficient(sign * k)) <= math.exp(-0.3 * k)


def test_bloch_wave_out_of_spectrum(amo, golden):
    with pytest.raises(NumericGuardError, match="not resolvable"):
        dual_bloch_wave(amo, golden, 100.0, 20, theta_grid=16)


def test_bloch_wave_needs_region_two(golden):
    with pytest.raises(ConfigError):
        dual_bloch_wave(Coupling(l1=0.5, l2=0.5, l3=0.7), golden, 0.0, 20)


def test_decay_rate_needs_three_points(amo_wave):
    with pytest.raises(NumericGuardError):
        bloch_decay_rate(amo_wave, 59, 60, floor=1.0)


# --- scales ---
def test_reducibility_config_without_resonances(extended, golden):
    config = reducibility_config(extended, golden, 0.25, 100)
    assert config.epsilon0 == 3.0
    assert config.resonances.resonances == []
    assert config.next_scale == 900
    assert config.window_I2 == (-100, 100)
    assert config.h == pytest.approx(dual_log_ratio(extended) / (200 * math.pi))
    assert config.strip_s == pytest.approx(config.h / 3)


def test_reducibility_config_rejects_oversized_cutoff(extended, golden):
    with pytest.raises(ConfigError):
        reducibility_config(extended, golden, 0.25, 100, fourier_cutoff=600, grid=1024)


def test_epsilon_windows():
    res = ResonanceSet(theta=0.0, epsilon0=1.0, horizon=1000, resonances=[3, -10], norms=[1e-2, 1e-5])
    windows = epsilon_intervals(0.5, res)
    assert [(w.n, w.N) for w in windows] == [(0, 3), (3, 10), (10, 1000)]
    assert [w.nonempty for w in windows] == [True, False, False]
    assert windows[0].lower == pytest.approx(math.exp(-0.015))


def test_windowed_vector_stays_inside_the_wave(amo, golden, amo_wave):
    config = reducibility_config(amo, golden, amo_wave.theta, amo_wave.M, fourier_cutoff=32, grid=128)
    qconj = build_q_conjugation(amo, golden, 32)
    windowed = build_windowed_vector(amo_wave, qconj, config)
    lo, hi = config.window_I2
    assert windowed.window == (lo, hi)
    assert len(windowed.u[0].coeffs) == hi - lo + 1
    assert 0.0 < windowed.min_norm <= windowed.max_norm
    assert math.isfinite(windowed.defect)
    too_wide = config.model_copy(update={"window_I2": (-amo_wave.M - 1, amo_wave.M + 1)})
    with pytest.raises(ConfigError, match="exceeds"):
        build_windowed_vector(amo_wave, qconj, too_wide)


# --- SL(2) completion ---
def test_completion_is_unimodular_and_well_conditioned():
    U = [FourierSeries.from_modes({0: 1.0, 1: 0.3}), FourierSeries.from_modes({-1: 0.2j})]
    B = complete_to_sl2(U, grid=256)
    dets = np.linalg.det(B.values)
    assert np.allclose(dets, 1.0, atol=1e-12)
    assert B.min_norm <= 1.0 <= B.max_norm
    cond = np.linalg.cond(B.values)
    assert np.all(cond <= (B.max_norm / B.min_norm) ** 2 + 1e-9)
    assert np.allclose(B.at(np.arange(256) / 256), B.values)


def test_constant_column_completes_to_identity():
    B = _identity_frame()
    assert np.allclose(B.values, np.eye(2))


def test_vanishing_column_is_rejected():
    with pytest.raises(NumericGuardError):
        complete_to_sl2([FourierSeries.constant(0.0), FourierSeries.constant(0.0)])


# --- conjugation and elimination ---
def test_exact_upper_triangular_cocycle(golden):
    theta = 0.123
    report = conjugation_residuals(_identity_frame(), _upper_cocycle(golden, theta, _offdiag), theta)
    assert report.stage == Stage.B_STAGE
    assert report.beta1_norm.lower == 0.0
    assert report.beta2_norm.lower == 0.0
    assert report.beta3_bound_holds
    assert report.offdiag_b_norm.lower == pytest.approx(0.35, abs=0.01)
    assert report.det_error <= 1e-12


def test_homological_step_removes_nonresonant_modes(extended, golden):
    theta = 0.123
    report = conjugation_residuals(_identity_frame(), _upper_cocycle(golden, theta, _offdiag), theta)
    config = reducibility_config(extended, golden, theta, 50)
    phi = homological_eliminate(report, theta, golden, config)
    assert phi.stage == Stage.PHI_STAGE
    assert phi.resonant_modes == [] and phi.near_resonant_modes == []
    assert phi.identity_residual <= 1e-10
    assert phi.eliminable_before == pytest.approx(report.offdiag_b_norm.lower)
    assert phi.eliminable_after <= 1e-10
    assert phi.det_error <= 1e-10


def test_resonant_mode_stays_in_the_residual(extended, golden):
    theta = golden.value / 2.0
    report = conjugation_residuals(_identity_frame(), _upper_cocycle(golden, theta, _offdiag), theta)
    config = reducibility_config(extended, golden, theta, 50)
    assert 1 in config.resonances.resonances
    phi = homological_eliminate(report, theta, golden, config)
    assert 1 in phi.resonant_modes + phi.near_resonant_modes
    assert phi.eliminated_modes > 0
    assert phi.eliminable_after <= 1e-10


def test_exact_small_divisor_is_guarded(extended, golden):
    # 2θ = 30α exactly, beyond the resonance horizon 9M = 27
    theta = 15.0 * golden.value
    report = conjugation_residuals(_identity_frame(), _upper_cocycle(golden, theta, _offdiag), theta)
    config = reducibility_config(extended, golden, theta, 3)
    assert config.resonances.resonances == []
    phi = homological_eliminate(report, theta, golden, config)
    assert 30 in phi.near_resonant_modes


def test_certificate_needs_a_harper_cocycle(extended, golden):
    theta = 0.123
    report = conjugation_residuals(_identity_frame(), _upper_cocycle(golden, theta, _offdiag), theta)
    with pytest.raises(ConfigError):
        holder_certificate(report, 1e-4)
    with pytest.raises(ConfigError):
        holder_certificate(report, 0.0)


# --- full pipeline ---
@pytest.mark.slow
@pytest.mark.parametrize("coupling", [(0.0, 2.0, 0.0), (0.1, 2.0, 0.2)])
def test_pipeline_end_to_end(coupling, golden, centered_energy):
    lam = Coupling(l1=coupling[0], l2=coupling[1], l3=coupling[2])
    E = centered_energy(lam, golden, 0.1, 200)
    report = run_pipeline(lam, golden, E, M=200, theta_grid=128, epsilons=EPSILONS, workers=4)

    assert report.bloch_residual <= 1e-6
    assert report.window_defect <= 1e-8
    b_stage, phi = report.b_stage, report.phi_stage
    assert b_stage.beta1_norm.lower <= 1e-2
    assert b_stage.beta2_norm.lower <= 1e-2
    assert b_stage.beta3_bound_holds
    assert phi.identity_residual <= 1e-10
    assert phi.eliminable_after <= 0.1 * phi.eliminable_before

    ratios = [c.bound / math.sqrt(c.epsilon) for c in report.certificates]
    assert max(ratios) <= 3.0 * min(ratios)
    assert all(c.det_error <= 1e-10 for c in report.certificates)
    assert all(c.valid for c in report.certificates)
    assert [c.epsilon for c in report.certificates] == list(EPSILONS)
    assert 0.0 <= report.q_verified_strip < dual_log_ratio(lam) / (2 * math.pi)
    assert report.model_dump(mode="json")["b_stage"]["stage"] == "B-stage"


@pytest.mark.slow
def test_certificate_at_unit_epsilon_is_finite(amo, golden, centered_energy):
    E = centered_energy(amo, golden, 0.1, 100)
    report = run_pipeline(amo, golden, E, M=100, theta_grid=64, epsilons=(1.0,))
    assert math.isfinite(report.certificates[0].bound)
