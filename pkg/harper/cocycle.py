import math
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from harper.arithmetic import Frequency
from harper.config import RENORM_EVERY, ConfigError, NumericGuardError
from harper.operator import (
    Coupling,
    RegionTag,
    classify_region,
    dual_log_ratio,
    eval_c,
    eval_cbar,
)

logger = logging.getLogger(__name__)

# --- CONFIG ---
STRIP_GRID = 1024
LOG_BRANCH_GRID = 4096
DIVISOR_GUARD = 1e-13


# --- FOURIER SERIES ---
class FourierSeries(BaseModel):
    """Finitely supported Fourier series Σ_{|k|≤K} ĉ_k e^{2πikz} on the torus.

    ``coeffs[k + K]`` holds ĉ_k. Evaluation is a finite sum, so it is valid at
    any complex z."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    coeffs: np.ndarray

    @property
    def cutoff(self) -> int:
        return (len(self.coeffs) - 1) // 2

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.cutoff, self.cutoff + 1)

    def coefficient(self, k: int) -> complex:
        if abs(k) > self.cutoff:
            return 0j
        return complex(self.coeffs[k + self.cutoff])

    @classmethod
    def constant(cls, value: complex) -> "FourierSeries":
        return cls(coeffs=np.array([value], dtype=complex))

    @classmethod
    def from_modes(cls, modes: dict) -> "FourierSeries":
        cutoff = max((abs(k) for k in modes), default=0)
        coeffs = np.zeros(2 * cutoff + 1, dtype=complex)
        for k, v in modes.items():
            coeffs[k + cutoff] = v
        return cls(coeffs=coeffs)

    @classmethod
    def from_samples(cls, values: np.ndarray, cutoff: int) -> "FourierSeries":
        """Coefficients |k| ≤ cutoff of the trigonometric interpolant of grid samples x_j = j/M."""
        m = len(values)
        if 2 * cutoff + 1 > m:
            raise ConfigError(f"cutoff {cutoff} needs at least {2 * cutoff + 1} grid points, got {m}")
        spectrum = np.fft.fft(values) / m
        ks = np.arange(-cutoff, cutoff + 1)
        return cls(coeffs=spectrum[ks % m].astype(complex))

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z)
        waves = np.exp(2j * np.pi * np.multiply.outer(z, self.modes))
        return waves @ self.coeffs

    def shifted(self, alpha: float) -> "FourierSeries":
        """Series of x ↦ f(x + alpha)."""
        return FourierSeries(coeffs=self.coeffs * np.exp(2j * np.pi * self.modes * alpha))

    def times(self, other: "FourierSeries") -> "FourierSeries":
        return FourierSeries(coeffs=np.convolve(self.coeffs, other.coeffs))

    def scaled(self, factor: complex) -> "FourierSeries":
        return FourierSeries(coeffs=self.coeffs * factor)

    def to_json(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "coeffs": [[int(k), float(c.real), float(c.imag)] for k, c in zip(self.modes, self.coeffs)],
        }


SeriesLike = Union[FourierSeries, Sequence[FourierSeries], Sequence[Sequence[FourierSeries]]]


def _as_matrix(series: SeriesLike) -> List[List[FourierSeries]]:
    if isinstance(series, FourierSeries):
        return [[series]]
    if isinstance(series[0], FourierSeries):
        return [[s] for s in series]
    return [list(row) for row in series]


def strip_norm(series: SeriesLike, s: float, points: int = STRIP_GRID) -> Tuple[float, float]:
    """(lower, upper) bracket of sup over the strip |Im z| < s.

    lower is the max over a boundary grid at Im z = ±s; upper bounds each entry
    by Σ|ĉ_k|e^{2πs|k|} and combines entries in Frobenius norm."""
    if s < 0.0:
        raise ConfigError(f"strip half-width must be nonnegative, got {s}")
    mat = _as_matrix(series)
    xs = np.arange(points) / points
    lower = 0.0
    for im in (s, -s):
        values = np.stack([np.stack([entry(xs + 1j * im) for entry in row], axis=-1) for row in mat], axis=-2)
        if values.shape[-1] == 1:
            norms = np.linalg.norm(values[..., 0], axis=-1)
        else:
            norms = np.linalg.norm(values, ord=2, axis=(-2, -1))
        lower = max(lower, float(np.max(norms)))
    uppers = [float(np.sum(np.abs(e.coeffs) * np.exp(2 * np.pi * s * np.abs(e.modes)))) for row in mat for e in row]
    upper = math.sqrt(sum(u * u for u in uppers)) if len(uppers) > 1 else uppers[0]
    return lower, max(upper, lower)


# --- TRANSFER MATRICES ---
def transfer_matrix(lam: Coupling, freq: Frequency, E: complex, x, kind: str = "renormalized") -> np.ndarray:
    """A_{λ,E}(x) (kind="raw") or Ā_{λ,E}(x) (kind="renormalized"); shape (..., 2, 2)."""
    x = np.asarray(x, dtype=float)
    potential = E - 2.0 * np.cos(2.0 * np.pi * x)
    out = np.zeros(x.shape + (2, 2), dtype=complex)
    if kind == "raw":
        c = eval_c(lam, freq, x)
        if np.any(c == 0):
            raise NumericGuardError("transfer_matrix: c vanishes on the requested phases")
        out[..., 0, 0] = potential / c
        out[..., 0, 1] = -eval_cbar(lam, freq, x - freq.value) / c
        out[..., 1, 0] = 1.0
        return out
    if kind == "renormalized":
        here = np.abs(eval_c(lam, freq, x))
        before = np.abs(eval_c(lam, freq, x - freq.value))
        if np.any(here == 0) or np.any(before == 0):
            raise NumericGuardError("transfer_matrix: |c| vanishes on the requested phases")
        scale = 1.0 / np.sqrt(here * before)
        out[..., 0, 0] = potential * scale
        out[..., 0, 1] = -before * scale
        out[..., 1, 0] = here * scale
        return out
    raise ConfigError(f"unknown transfer matrix kind {kind!r}")


class MatrixCocycle(BaseModel):
    """Cocycle (α, A): ``evaluator`` maps phases of shape S to matrices of shape S + (2, 2)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    freq: Frequency
    kind: str
    evaluator: Callable
    coupling: Optional[Coupling] = None
    energy: Optional[complex] = None

    def __call__(self, x) -> np.ndarray:
        return self.evaluator(x)


def harper_cocycle(lam: Coupling, freq: Frequency, E: complex, kind: str = "renormalized") -> MatrixCocycle:
    return MatrixCocycle(freq=freq, kind=kind, evaluator=lambda x: transfer_matrix(lam, freq, E, x, kind),
                         coupling=lam, energy=E)


class TransferProduct(BaseModel):
    """A_k(x) = matrix · e^{log_scale}."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    matrix: np.ndarray
    log_scale: np.ndarray

    def full(self) -> np.ndarray:
        return self.matrix * np.exp(self.log_scale)[..., None, None]

    def log_norm(self) -> np.ndarray:
        return np.log(np.linalg.norm(self.matrix, ord=2, axis=(-2, -1))) + self.log_scale


def _run_product(coc: MatrixCocycle, x: np.ndarray, steps: int, start: TransferProduct = None,
                 offset: int = 0) -> TransferProduct:
    if start is None:
        mat = np.broadcast_to(np.eye(2, dtype=complex), x.shape + (2, 2)).copy()
        scale = np.zeros(x.shape)
    else:
        mat, scale = start.matrix.copy(), start.log_scale.copy()
    for l in range(offset, offset + steps):
        mat = coc(x + l * coc.freq.value) @ mat
        if (l + 1) % RENORM_EVERY == 0:
            norms = np.linalg.norm(mat, ord=2, axis=(-2, -1))
            mat = mat / np.asarray(norms)[..., None, None]
            scale = scale + np.log(norms)
    return TransferProduct(matrix=mat, log_scale=scale)


def cocycle_product(coc: MatrixCocycle, x, k: int) -> TransferProduct:
    """A_k(x) = A(x+(k-1)α) ··· A(x), rescaled every RENORM_EVERY steps."""
    if k < 1:
        raise ConfigError(f"cocycle_product needs k >= 1, got {k}")
    return _run_product(coc, np.asarray(x, dtype=float), k)


class LyapunovEstimate(BaseModel):
    value: float
    half_value: float
    steps: int
    phase_count: int


def lyapunov_numeric(coc: MatrixCocycle, k: int, phase_count: int) -> LyapunovEstimate:
    """(1/k)∫ln‖A_k‖ over an equispaced phase grid, with the k/2 value for the trend."""
    if k < 100:
        raise ConfigError(f"lyapunov_numeric needs k >= 100, got {k}")
    if phase_count < 32:
        raise ConfigError(f"lyapunov_numeric needs phase_count >= 32, got {phase_count}")
    xs = np.arange(phase_count) / phase_count
    half = k // 2
    first = _run_product(coc, xs, half)
    full = _run_product(coc, xs, k - half, start=first, offset=half)
    return LyapunovEstimate(
        value=float(np.mean(full.log_norm()) / k),
        half_value=float(np.mean(first.log_norm()) / half),
        steps=k,
        phase_count=phase_count,
    )


def lyapunov_closed_form(lam: Coupling) -> float:
    """L_λ̄ for λ in region II."""
    if classify_region(lam) != RegionTag.II:
        raise ConfigError(f"lyapunov_closed_form: coupling {lam.as_tuple()} is not in region II")
    return dual_log_ratio(lam)


# --- Q CONJUGATION ---
class QConjugation(BaseModel):
    """Diagonal conjugation Q with Q(x+α)A_{λ,E}(x)Q⁻¹(x) = Ā_{λ,E}(x).

    q_diag / qinv_diag hold the two diagonal entries of Q and Q⁻¹."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    f: FourierSeries
    g1: FourierSeries
    g2: FourierSeries
    q_diag: List[FourierSeries]
    qinv_diag: List[FourierSeries]
    strip: float
    residual: float
    cohomological_residual: float

    def matrix(self, z) -> np.ndarray:
        return _diag_matrix(self.q_diag, z)

    def inverse(self, z) -> np.ndarray:
        return _diag_matrix(self.qinv_diag, z)

    def abs_c(self, z) -> np.ndarray:
        """|c|(z) = e^{(g₁+g₂)/2}, the only definition used off the real line."""
        return np.exp(0.5 * (self.g1(z) + self.g2(z)))


def _diag_matrix(entries: List[FourierSeries], z) -> np.ndarray:
    z = np.asarray(z)
    out = np.zeros(z.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = entries[0](z)
    out[..., 1, 1] = entries[1](z)
    return out


def _log_branch(values: np.ndarray, name: str) -> np.ndarray:
    arg = np.unwrap(np.angle(values))
    winding = (arg[-1] - arg[0] + np.angle(values[0] / values[-1])) / (2.0 * np.pi)
    if abs(winding) > 0.5:
        raise NumericGuardError(f"{name} winds {winding:.0f} times around 0; no single-valued log")
    return np.log(np.abs(values)) + 1j * arg


def _conjugation_residual(qconj: QConjugation, lam: Coupling, freq: Frequency, z: np.ndarray, E: float) -> float:
    raw = np.zeros(z.shape + (2, 2), dtype=complex)
    c = eval_c(lam, freq, z)
    raw[..., 0, 0] = (E - 2.0 * np.cos(2.0 * np.pi * z)) / c
    raw[..., 0, 1] = -eval_cbar(lam, freq, z - freq.value) / c
    raw[..., 1, 0] = 1.0
    here, before = qconj.abs_c(z), qconj.abs_c(z - freq.value)
    scale = 1.0 / np.sqrt(here * before)
    target = np.zeros_like(raw)
    target[..., 0, 0] = (E - 2.0 * np.cos(2.0 * np.pi * z)) * scale
    target[..., 0, 1] = -before * scale
    target[..., 1, 0] = here * scale
    conj = qconj.matrix(z + freq.value) @ raw @ qconj.inverse(z)
    return float(np.max(np.abs(conj - target)))


def build_q_conjugation(lam: Coupling, freq: Frequency, cutoff: int, grid: int = LOG_BRANCH_GRID,
                        energy: float = 0.0) -> QConjugation:
    if classify_region(lam) != RegionTag.II:
        raise ConfigError(f"build_q_conjugation: coupling {lam.as_tuple()} is not in region II")
    grid = max(grid, LOG_BRANCH_GRID, 4 * cutoff + 1)
    lyap = dual_log_ratio(lam)
    if lyap < 5.0 * freq.beta_hat:
        logger.warning(f"L = {lyap:.4g} < 5·beta_hat = {5 * freq.beta_hat:.4g}; conjugation may lose analyticity")

    xs = np.arange(grid) / grid
    g1_grid = _log_branch(eval_c(lam, freq, xs), "c")
    g2_grid = _log_branch(eval_cbar(lam, freq, xs), "c̄")
    for name, values in (("arg c", g1_grid.imag), ("arg c̄", g2_grid.imag)):
        mean = float(np.mean(values))
        if abs(mean) > 1e-8:
            raise NumericGuardError(f"∫{name} = {mean:.3g}, expected 0")

    g1 = FourierSeries.from_samples(g1_grid, cutoff)
    g2 = FourierSeries.from_samples(g2_grid, cutoff)
    diff = g1.coeffs - g2.coeffs
    f_coeffs = np.zeros_like(diff)
    for idx, k in enumerate(g1.modes):
        if k == 0:
            continue
        divisor = np.exp(2j * np.pi * k * freq.value) - 1.0
        if abs(divisor) < DIVISOR_GUARD:
            raise NumericGuardError(f"cohomological equation: divisor vanishes at k = {k}")
        f_coeffs[idx] = diff[idx] / (2.0 * divisor)
    f = FourierSeries(coeffs=f_coeffs)

    # Q = e^{f(x)} √|c|(x-α) diag(1, √(c̄/c)(x-α)), all through the log branches
    g_sum_prev = (g1.shifted(-freq.value)(xs) + g2.shifted(-freq.value)(xs))
    g_diff_prev = (g2.shifted(-freq.value)(xs) - g1.shifted(-freq.value)(xs))
    log_q11 = f(xs) + 0.25 * g_sum_prev
    log_q22 = log_q11 + 0.5 * g_diff_prev
    q_diag = [FourierSeries.from_samples(np.exp(v), cutoff) for v in (log_q11, log_q22)]
    qinv_diag = [FourierSeries.from_samples(np.exp(-v), cutoff) for v in (log_q11, log_q22)]

    coh = 2.0 * f.shifted(freq.value)(xs) - 2.0 * f(xs) - (g1_grid - g2_grid)
    qconj = QConjugation(
        f=f, g1=g1, g2=g2, q_diag=q_diag, qinv_diag=qinv_diag,
        strip=lyap / (4.0 * math.pi), residual=0.0,
        cohomological_residual=float(np.max(np.abs(coh))),
    )
    residual = _conjugation_residual(qconj, lam, freq, xs, energy)
    logger.info(f"Q-conjugation for {lam.as_tuple()} at cutoff {cutoff}: residual {residual:.3e}")
    return qconj.model_copy(update={"residual": residual})


def verified_strip(qconj: QConjugation, lam: Coupling, freq: Frequency, tol: float = 1e-6,
                   steps: int = 24, energy: float = 0.0) -> float:
    """Largest s < L_λ̄/(2π) with conjugation residual < tol on Im z = ±s, by bisection."""
    xs = np.arange(STRIP_GRID) / STRIP_GRID

    def passes(s: float) -> bool:
        return max(_conjugation_residual(qconj, lam, freq, xs + 1j * sign * s, energy) for sign in (1.0, -1.0)) < tol

    if not passes(0.0):
        return 0.0
    lo, hi = 0.0, dual_log_ratio(lam) / (2.0 * math.pi)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        with np.errstate(all="ignore"):
            ok = passes(mid)
        lo, hi = (mid, hi) if ok else (lo, mid)
    logger.info(f"verified_strip for {lam.as_tuple()}: s = {lo:.4g} (tol {tol:g})")
    return lo
