import math
import logging
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.linalg import eigvalsh_tridiagonal

from harper.arithmetic import Frequency
from harper.config import BISECTION_TOL, REGION_TOL, ConfigError, NumericGuardError

logger = logging.getLogger(__name__)

# --- CONFIG ---
QUADRATURE_POINTS = 2**14


class RegionTag(str, Enum):
    I = "I"
    II = "II"
    III = "III"
    BOUNDARY = "Boundary"


class Coupling(BaseModel):
    model_config = ConfigDict(frozen=True)

    l1: float
    l2: float
    l3: float

    @model_validator(mode="after")
    def _check_signs(self):
        if min(self.l1, self.l2, self.l3) < 0.0:
            raise ValueError(f"coupling entries must be nonnegative, got {self.as_tuple()}")
        if max(self.l1, self.l2, self.l3) == 0.0:
            raise ValueError("coupling must not vanish identically")
        return self

    @property
    def degenerate(self) -> bool:
        """λ₁ = λ₃ = 0 (almost Mathieu) or any other vanishing entry."""
        return min(self.l1, self.l2, self.l3) == 0.0

    @property
    def is_amo(self) -> bool:
        return self.l1 == 0.0 and self.l3 == 0.0

    def as_tuple(self):
        return (self.l1, self.l2, self.l3)


class TridiagonalOperator(BaseModel):
    """Dirichlet truncation of H_{λ,α,x} on sites 0..n-1."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    diag: np.ndarray
    offdiag: np.ndarray
    phase: float
    coupling: Coupling
    frequency: Frequency

    @property
    def size(self) -> int:
        return len(self.diag)

    def to_dense(self) -> np.ndarray:
        mat = np.diag(self.diag.astype(complex))
        if self.size > 1:
            mat += np.diag(self.offdiag, 1) + np.diag(np.conj(self.offdiag), -1)
        return mat


# --- REGIONS AND DUALITY ---
def classify_region(lam: Coupling) -> RegionTag:
    outer = lam.l1 + lam.l3
    if 0.0 < max(outer, lam.l2) < 1.0 - REGION_TOL:
        return RegionTag.I
    if max(outer, 1.0) < lam.l2 - REGION_TOL:
        return RegionTag.II
    if max(lam.l2, 1.0) < outer - REGION_TOL:
        return RegionTag.III
    return RegionTag.BOUNDARY


def dual_coupling(lam: Coupling) -> Coupling:
    if lam.l2 == 0.0:
        raise ConfigError("dual_coupling: l2 must be positive")
    return Coupling(l1=lam.l3 / lam.l2, l2=1.0 / lam.l2, l3=lam.l1 / lam.l2)


def _root_term(lam: Coupling) -> float:
    # λ₂ + √(λ₂² − 4λ₁λ₃)
    return lam.l2 + math.sqrt(max(lam.l2 ** 2 - 4.0 * lam.l1 * lam.l3, 0.0))


def dual_log_ratio(lam: Coupling) -> float:
    """ln[(λ₂+√(λ₂²−4λ₁λ₃)) / (m+√(m²−4λ₁λ₃))], m = max{λ₁+λ₃, 1}."""
    m = max(lam.l1 + lam.l3, 1.0)
    return math.log(_root_term(lam) / (m + math.sqrt(max(m * m - 4.0 * lam.l1 * lam.l3, 0.0))))


def symbol_zero_free_strip(lam: Coupling) -> float:
    """Half-width of the strip where c and c̄ do not vanish (region II)."""
    if classify_region(lam) != RegionTag.II:
        raise ConfigError(f"coupling {lam.as_tuple()} is not in region II")
    return dual_log_ratio(lam) / (2.0 * math.pi)


def epsilon_star(lam: Coupling) -> float:
    """min over the outer couplings of (λ₂+√(λ₂²−4λ₁λ₃))/(2λ_outer); inf if both vanish."""
    candidates = [_root_term(lam) / (2.0 * l) for l in (lam.l1, lam.l3) if l > 0.0]
    return min(candidates) if candidates else math.inf


# --- SYMBOL ---
def _phase(freq: Frequency, z):
    return np.exp(2j * np.pi * (np.asarray(z) + freq.value / 2.0))


def eval_c(lam: Coupling, freq: Frequency, z):
    e = _phase(freq, z)
    return lam.l1 / e + lam.l2 + lam.l3 * e


def eval_cbar(lam: Coupling, freq: Frequency, z):
    """Analytic extension of conj(c): equals conj(eval_c) on the real line."""
    e = _phase(freq, z)
    return lam.l1 * e + lam.l2 + lam.l3 / e


def eval_abs_c(lam: Coupling, freq: Frequency, z):
    if np.all(np.imag(z) == 0):
        return np.abs(eval_c(lam, freq, np.real(z)))
    strip = symbol_zero_free_strip(lam)
    if np.max(np.abs(np.imag(z))) >= strip:
        raise NumericGuardError(f"eval_abs_c: |Im z| must stay below the zero-free strip {strip:.6g}")
    # principal logs are continuous on the strip, both factors have positive real part there
    return np.exp(0.5 * (np.log(eval_c(lam, freq, z)) + np.log(eval_cbar(lam, freq, z))))


# --- TRUNCATIONS ---
def build_truncation(lam: Coupling, freq: Frequency, x: float, n: int) -> TridiagonalOperator:
    if n < 1:
        raise ConfigError(f"truncation size must be >= 1, got {n}")
    sites = x + np.arange(n) * freq.value
    diag = 2.0 * np.cos(2.0 * np.pi * sites)
    offdiag = np.asarray(eval_c(lam, freq, sites[:-1]), dtype=complex)
    return TridiagonalOperator(diag=diag, offdiag=offdiag, phase=x, coupling=lam, frequency=freq)


def gauge_to_real(op: TridiagonalOperator):
    """Diagonal unitary diag(e^{iφ_k}) that makes the off-diagonal real and nonnegative.

    Returns (diag, |offdiag|, phases) with φ₀ = 0 and φ_{k+1} = φ_k + arg(offdiag_k)."""
    phases = np.concatenate([[0.0], np.cumsum(np.angle(op.offdiag))])
    return op.diag, np.abs(op.offdiag), phases


def eigenvalues(op: TridiagonalOperator, tol: float = BISECTION_TOL) -> np.ndarray:
    diag, off, _ = gauge_to_real(op)
    if op.size == 1:
        return diag.copy()
    # LAPACK stebz: Sturm-sequence bisection, splits at zero off-diagonals
    return eigvalsh_tridiagonal(diag, off, lapack_driver="stebz", tol=tol)


# --- MEAN LOG SYMBOL ---
class MeanLogC(BaseModel):
    quadrature: float
    closed_form: Optional[float] = None
    flagged: bool = False


def mean_log_c(lam: Coupling, points: int = QUADRATURE_POINTS) -> MeanLogC:
    """∫ ln|c(x)| dx by the trapezoid rule, plus the closed form in region II."""
    xs = np.arange(points) / points
    e = np.exp(2j * np.pi * xs)
    values = np.abs(lam.l1 / e + lam.l2 + lam.l3 * e)
    if np.any(values == 0.0):
        raise NumericGuardError(f"mean_log_c: symbol vanishes on the quadrature grid for {lam.as_tuple()}")
    quad = float(np.mean(np.log(values)))
    if classify_region(lam) == RegionTag.II or (lam.is_amo and lam.l2 > 0.0):
        closed = math.log(_root_term(lam) / 2.0)
        if abs(closed - quad) > 1e-10:
            logger.warning(f"mean_log_c: quadrature {quad} and closed form {closed} disagree")
        return MeanLogC(quadrature=quad, closed_form=closed)
    logger.warning(f"mean_log_c: {lam.as_tuple()} outside region II, quadrature only")
    return MeanLogC(quadrature=quad, flagged=True)
