from __future__ import annotations

import math

import numpy as np
import pytest
from pydantic import ValidationError

from harper.config import ConfigError, NumericGuardError
from harper.operator import (
    Coupling,
    RegionTag,
    build_truncation,
    classify_region,
    dual_coupling,
    dual_log_ratio,
    eigenvalues,
    epsilon_star,
    eval_abs_c,
    eval_c,
    eval_cbar,
    gauge_to_real,
    mean_log_c,
    symbol_zero_free_strip,
)


def _c(l1, l2, l3):
    return Coupling(l1=l1, l2=l2, l3=l3)


@pytest.mark.parametrize("coupling, region", [
    ((0.0, 2.0, 0.0), RegionTag.II),
    ((0.1, 2.0, 0.2), RegionTag.II),
    ((0.2, 0.5, 0.2), RegionTag.I),
    ((0.5, 0.5, 0.7), RegionTag.III),
    ((0.0, 1.0, 0.0), RegionTag.BOUNDARY),
])
def test_classify_region(coupling, region):
    assert classify_region(_c(*coupling)) == region


def test_coupling_rejects_negative_and_zero():
    with pytest.raises(ValidationError):
        _c(-0.1, 2.0, 0.0)
    with pytest.raises(ValidationError):
        _c(0.0, 0.0, 0.0)


def test_amo_is_degenerate():
    lam = _c(0.0, 2.0, 0.0)
    assert lam.is_amo and lam.degenerate
    assert not _c(0.1, 2.0, 0.2).degenerate


def test_dual_coupling_is_an_involution(extended):
    dual = dual_coupling(extended)
    assert dual.as_tuple() == pytest.approx((0.1, 0.5, 0.05))
    assert dual_coupling(dual).as_tuple() == pytest.approx(extended.as_tuple())


def test_dual_log_ratio_closed_forms(amo):
    assert dual_log_ratio(amo) == math.log(2.0)
    assert dual_log_ratio(_c(0.1, 2.0, 0.1)) == pytest.approx(0.70079, abs=1e-4)


def test_epsilon_star(amo, extended):
    assert epsilon_star(amo) == math.inf
    assert epsilon_star(extended) == pytest.approx((2.0 + math.sqrt(3.92)) / 0.4)


def test_zero_free_strip_needs_region_two():
    with pytest.raises(ConfigError):
        symbol_zero_free_strip(_c(0.5, 0.5, 0.7))


def test_abs_c_extension_agrees_on_real_line(extended, golden):
    xs = np.linspace(0.0, 1.0, 17)
    assert np.allclose(eval_abs_c(extended, golden, xs + 0j), np.abs(eval_c(extended, golden, xs)))
    strip = symbol_zero_free_strip(extended)
    inside = xs + 0.5j * strip
    # |c|² = c · c̄ continues analytically
    assert np.allclose(eval_abs_c(extended, golden, inside) ** 2,
                       eval_c(extended, golden, inside) * eval_cbar(extended, golden, inside))
    with pytest.raises(NumericGuardError):
        eval_abs_c(extended, golden, xs + 1.1j * strip)


def test_truncation_shape_and_hermitian(extended, golden):
    op = build_truncation(extended, golden, 0.3, 50)
    dense = op.to_dense()
    assert op.size == 50
    assert np.allclose(dense, dense.conj().T)
    assert op.diag[1] == pytest.approx(2.0 * math.cos(2.0 * math.pi * (0.3 + golden.value)))


def test_truncation_rejects_empty(amo, golden):
    with pytest.raises(ConfigError):
        build_truncation(amo, golden, 0.0, 0)


def test_gauge_keeps_the_spectrum(extended, golden):
    op = build_truncation(extended, golden, 0.17, 40)
    diag, off, phases = gauge_to_real(op)
    assert phases[0] == 0.0
    assert np.all(off >= 0.0)
    D = np.diag(np.exp(1j * phases))
    real = D @ op.to_dense() @ D.conj().T
    assert np.allclose(real.imag, 0.0, atol=1e-12)
    assert np.allclose(np.diag(real, 1).real, off)


@pytest.mark.parametrize("coupling", [(0.0, 2.0, 0.0), (0.1, 2.0, 0.2), (0.5, 0.5, 0.7)])
def test_bisection_eigenvalues_match_dense_solver(coupling, golden):
    op = build_truncation(_c(*coupling), golden, 0.21, 120)
    oracle = np.linalg.eigvalsh(op.to_dense())
    assert np.allclose(eigenvalues(op), oracle, atol=1e-9)


def test_single_site_truncation(amo, golden):
    op = build_truncation(amo, golden, 0.0, 1)
    assert eigenvalues(op) == pytest.approx([2.0])


def test_mean_log_c_amo(amo):
    result = mean_log_c(amo)
    assert result.quadrature == pytest.approx(math.log(2.0), abs=1e-12)
    assert result.closed_form == pytest.approx(math.log(2.0))
    assert not result.flagged


def test_mean_log_c_extended(extended):
    result = mean_log_c(extended)
    assert result.closed_form == pytest.approx(math.log((2.0 + math.sqrt(3.92)) / 2.0))
    assert result.quadrature == pytest.approx(result.closed_form, abs=1e-10)


def test_mean_log_c_outside_region_two_is_flagged():
    result = mean_log_c(_c(0.5, 0.5, 0.7))
    assert result.flagged
    assert result.closed_form is None


def test_dual_coupling_exchanges_regions_one_and_two(extended):
    weak = _c(0.2, 0.5, 0.2)
    assert classify_region(weak) == RegionTag.I
    assert classify_region(dual_coupling(weak)) == RegionTag.II
    assert classify_region(dual_coupling(extended)) == RegionTag.I


def test_two_site_truncation_closed_form(extended, golden):
    op = build_truncation(extended, golden, 0.37, 2)
    d0, d1 = op.diag
    root = math.sqrt(((d0 - d1) / 2) ** 2 + abs(op.offdiag[0]) ** 2)
    mid = (d0 + d1) / 2
    assert eigenvalues(op) == pytest.approx([mid - root, mid + root], abs=1e-9)


@pytest.mark.parametrize("coupling", [(0.0, 2.0, 0.0), (0.1, 2.0, 0.2), (0.5, 0.5, 0.7)])
def test_truncations_interlace(coupling, golden):
    lam = _c(*coupling)
    outer = eigenvalues(build_truncation(lam, golden, 0.13, 80))
    inner = eigenvalues(build_truncation(lam, golden, 0.13, 79))
    assert np.all(outer[:-1] <= inner + 1e-9)
    assert np.all(inner <= outer[1:] + 1e-9)


@pytest.mark.parametrize("coupling", [(0.0, 2.0, 0.0), (0.1, 2.0, 0.2), (0.5, 0.5, 0.7)])
def test_spectral_radius_bound(coupling, golden):
    lam = _c(*coupling)
    bound = 2.0 + 2.0 * sum(lam.as_tuple())
    for x in (0.0, 0.29, 0.71):
        values = eigenvalues(build_truncation(lam, golden, x, 100))
        assert np.max(np.abs(values)) <= bound + 1e-9


def test_spectrum_is_gauge_invariant(extended, golden):
    op = build_truncation(extended, golden, 0.41, 60)
    rng = np.random.default_rng(7)
    D = np.diag(np.exp(2j * np.pi * rng.random(op.size)))
    conjugated = D @ op.to_dense() @ D.conj().T
    assert np.allclose(np.linalg.eigvalsh(conjugated), eigenvalues(op), atol=1e-9)
