"""Almost-reducibility pipeline for the renormalized cocycle at a fixed energy.

Dual Bloch wave → windowed vector U, U_⋆ = QU → pointwise SL(2,C) completion B
→ residual block of B⁻¹(x+α)ĀB → homological elimination Φ = BW → Hölder
certificate. Norms are measured on the real torus only; the completion is
not strip-analytic."""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import minimize_scalar
from scipy.stats import linregress
from tenacity import retry, retry_if_exception_type, stop_after_attempt
from tqdm import tqdm

from harper.arithmetic import Frequency, ResonanceSet, find_resonances
from harper.cocycle import (
    FourierSeries,
    MatrixCocycle,
    QConjugation,
    build_q_conjugation,
    harper_cocycle,
    strip_norm,
    transfer_matrix,
    verified_strip,
)
from harper.config import ConfigError, NumericGuardError
from harper.operator import (
    Coupling,
    RegionTag,
    TridiagonalOperator,
    build_truncation,
    classify_region,
    dual_coupling,
    dual_log_ratio,
    eigenvalues,
    gauge_to_real,
)

logger = logging.getLogger(__name__)

# --- CONFIG ---
GRID = 1024
FOURIER_CUTOFF = 128
THETA_GRID = 256
HORIZON_FACTOR = 9
DIVISOR_GUARD = 1e-12
MIN_COLUMN_NORM = 1e-10
CENTER_TOL = 1e-6
NORMALIZATION_SLACK = 0.05
RECENTER_ATTEMPTS = 4
EPSILONS = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


# --- BLOCH WAVE ---
class BlochWave(BaseModel):
    """Dual eigenvector u on sites |k| ≤ M with u₀ = 1, H_{λ̄,α,θ}u ≈ (E/λ₂)u."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    theta: float
    coeffs: np.ndarray
    energy: float
    dual_eigen_residual: float
    gap: float
    candidates: List[Tuple[float, float]]
    flagged: bool = False
    coupling: Coupling
    frequency: Frequency

    @property
    def M(self) -> int:
        return (len(self.coeffs) - 1) // 2

    def coefficient(self, k: int) -> complex:
        if abs(k) > self.M:
            return 0j
        return complex(self.coeffs[k + self.M])


class _OffCenter(Exception):
    pass


def _dual_truncation(dual: Coupling, freq: Frequency, theta: float, M: int) -> TridiagonalOperator:
    # site j carries phase θ + (j − M)α, i.e. dual index k = j − M
    return build_truncation(dual, freq, theta - M * freq.value, 2 * M + 1)


def _gap(dual: Coupling, freq: Frequency, theta: float, M: int, target: float, tol: Optional[float] = None) -> float:
    op = _dual_truncation(dual, freq, theta, M)
    ev = eigenvalues(op) if tol is None else eigenvalues(op, tol=tol)
    return float(np.min(np.abs(ev - target)))


def _refine(fun, a: float, b: float, c: float) -> Tuple[float, float]:
    """Golden-section search inside a bracket; bounded Brent when (a, b, c) does not bracket."""
    if a < b < c and fun(b) < fun(a) and fun(b) < fun(c):
        res = minimize_scalar(fun, bracket=(a, b, c), method="golden", tol=1e-12)
    else:
        res = minimize_scalar(fun, bounds=(min(a, c), max(a, c)), method="bounded", options={"xatol": 1e-13})
    return float(res.x), float(res.fun)


def _eigenvector(op: TridiagonalOperator, target: float) -> Tuple[float, np.ndarray]:
    diag, off, phases = gauge_to_real(op)
    ev = eigenvalues(op, tol=0.0)
    i = int(np.argmin(np.abs(ev - target)))
    _, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(i, i))
    # undo the gauge: Hu = μu for u = e^{−iφ}v
    return float(ev[i]), np.exp(-1j * phases) * vecs[:, 0]


def _apply(op: TridiagonalOperator, u: np.ndarray) -> np.ndarray:
    out = op.diag * u
    out[:-1] += op.offdiag * u[1:]
    out[1:] += np.conj(op.offdiag) * u[:-1]
    return out


def dual_bloch_wave(lam: Coupling, freq: Frequency, E: float, M: int, theta_grid: int = THETA_GRID,
                    workers: int = 1, progress: bool = False) -> BlochWave:
    if classify_region(lam) != RegionTag.II:
        raise ConfigError(f"dual_bloch_wave: coupling {lam.as_tuple()} is not in region II")
    if M < 2:
        raise ConfigError(f"M must be >= 2, got {M}")
    if theta_grid < 3:
        raise ConfigError(f"theta_grid must be >= 3, got {theta_grid}")

    dual = dual_coupling(lam)
    target = E / lam.l2
    thetas = np.linspace(0.0, 0.5, theta_grid)
    step = thetas[1] - thetas[0]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(lambda t: _gap(dual, freq, t, M, target), thetas)
        gaps = np.array(list(tqdm(results, total=theta_grid, desc="Theta grid", disable=not progress)))

    def fun(t: float) -> float:
        return _gap(dual, freq, t, M, target, tol=0.0)

    candidates = []
    for i in range(theta_grid):
        left, right = gaps[max(i - 1, 0)], gaps[min(i + 1, theta_grid - 1)]
        if gaps[i] <= left and gaps[i] <= right:
            candidates.append(_refine(fun, thetas[max(i - 1, 0)], thetas[i], thetas[min(i + 1, theta_grid - 1)]))
    candidates.sort(key=lambda c: c[1])
    logger.info(f"dual_bloch_wave E={E}: {len(candidates)} theta candidates, best gap {candidates[0][1]:.3e}")

    state = {"theta": candidates[0][0]}

    @retry(retry=retry_if_exception_type(_OffCenter), stop=stop_after_attempt(RECENTER_ATTEMPTS), reraise=True)
    def settle() -> Tuple[TridiagonalOperator, float, np.ndarray]:
        op = _dual_truncation(dual, freq, state["theta"], M)
        mu, v = _eigenvector(op, target)
        peak = int(np.argmax(np.abs(v)))
        if abs(v[M]) * (1.0 + NORMALIZATION_SLACK) < abs(v[peak]):
            shifted = state["theta"] + (peak - M) * freq.value
            logger.info(f"dual_bloch_wave: mass peaks at k={peak - M}, re-centering theta")
            state["theta"], _ = _refine(fun, shifted - step, shifted, shifted + step)
            raise _OffCenter()
        return op, mu, v

    flagged = False
    try:
        op, mu, v = settle()
    except _OffCenter:
        op = _dual_truncation(dual, freq, state["theta"], M)
        mu, v = _eigenvector(op, target)
        flagged = True
        logger.warning(f"dual_bloch_wave: eigenvector still off-center after {RECENTER_ATTEMPTS} attempts")

    edge = float(np.max(np.abs(op.offdiag)) * (abs(v[0]) + abs(v[-1])))
    gap = abs(mu - target)
    if gap > max(10.0 * edge, 1e-8):
        raise NumericGuardError(f"E = {E} not resolvable at this M = {M} (gap {gap:.3e}, edge mass {edge:.3e})")
    if abs(v[M]) < CENTER_TOL:
        raise NumericGuardError(f"dual_bloch_wave: |u_0| = {abs(v[M]):.2e}, normalization u_0 = 1 is ill-conditioned")

    u = v / v[M]
    u[M] = 1.0
    residual = float(np.max(np.abs(_apply(op, u) - target * u)))
    return BlochWave(theta=state["theta"], coeffs=u, energy=E, dual_eigen_residual=residual, gap=gap,
                     candidates=candidates, flagged=flagged, coupling=lam, frequency=freq)


def bloch_decay_rate(wave: BlochWave, k_min: int = 5, k_max: Optional[int] = None, floor: float = 1e-13) -> float:
    """−slope of ln|u_k| against |k| over k_min ≤ |k| ≤ k_max, ignoring entries at the round-off floor."""
    k_max = wave.M if k_max is None else min(k_max, wave.M)
    ks = np.abs(np.arange(-wave.M, wave.M + 1))
    mags = np.abs(wave.coeffs)
    sel = (ks >= k_min) & (ks <= k_max) & (mags > floor)
    if sel.sum() < 3:
        raise NumericGuardError(f"bloch_decay_rate: fewer than 3 usable coefficients in [{k_min}, {k_max}]")
    return float(-linregress(ks[sel], np.log(mags[sel])).slope)


# --- CONFIGURATION ---
class ReducibilityConfig(BaseModel):
    """Scales of one pipeline run: decay scale h, resonance threshold ε₀, window I₂ = [−⌊N/9⌋, ⌊N/9⌋]."""
    model_config = ConfigDict(frozen=True)

    h: float
    epsilon0: float
    window_I2: Tuple[int, int]
    fourier_cutoff: int
    strip_s: float
    grid: int = GRID
    resonances: ResonanceSet
    resonance_scale: int
    next_scale: int

    @model_validator(mode="after")
    def _check(self):
        if self.h <= 0.0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.window_I2[0] != -self.window_I2[1] or self.window_I2[1] < 0:
            raise ValueError(f"window_I2 must be symmetric about 0, got {self.window_I2}")
        if 2 * self.fourier_cutoff + 1 > self.grid:
            raise ValueError(f"fourier_cutoff {self.fourier_cutoff} too large for grid {self.grid}")
        return self


def reducibility_config(lam: Coupling, freq: Frequency, theta: float, M: int,
                        fourier_cutoff: int = FOURIER_CUTOFF, epsilon0: Optional[float] = None,
                        grid: int = GRID, strip_s: Optional[float] = None) -> ReducibilityConfig:
    """Resonances up to 9M; n is the last one with 3|n| ≤ M and N the next (or the horizon)."""
    h = dual_log_ratio(lam) / (200.0 * math.pi)
    eps0 = epsilon0 if epsilon0 is not None else max(10.0 * freq.beta_hat, 3.0)
    res = find_resonances(theta, freq, eps0, HORIZON_FACTOR * M)
    j = max((i for i, n in enumerate(res.resonances) if 3 * abs(n) <= M), default=-1)
    n = abs(res.resonances[j]) if j >= 0 else 0
    N = res.next_scale(j)
    half = min(N // 9, M)
    if half < 1:
        raise NumericGuardError(f"window I2 is empty: next resonance scale N = {N}")
    try:
        return ReducibilityConfig(h=h, epsilon0=eps0, window_I2=(-half, half), fourier_cutoff=fourier_cutoff,
                                  strip_s=h / 3.0 if strip_s is None else strip_s, grid=grid,
                                  resonances=res, resonance_scale=n, next_scale=N)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


class EpsilonWindow(BaseModel):
    n: int
    N: int
    lower: float
    upper: float
    nonempty: bool


def epsilon_intervals(h: float, resonances: ResonanceSet) -> List[EpsilonWindow]:
    """ε-windows [e^{−hN/100}, e^{−ε₀|n|}] certified by consecutive resonance scales (n, N), n₀ = 0."""
    scales = [0] + [abs(n) for n in resonances.resonances]
    windows = []
    for j, n in enumerate(scales):
        N = resonances.next_scale(j - 1)
        lower = math.exp(-h * N / 100.0)
        upper = math.exp(-resonances.epsilon0 * n)
        windows.append(EpsilonWindow(n=n, N=N, lower=lower, upper=upper, nonempty=lower < upper))
    return windows


# --- WINDOWED VECTOR ---
class WindowedVector(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    u: List[FourierSeries]
    u_star: List[FourierSeries]
    window: Tuple[int, int]
    defect: float
    min_norm: float
    max_norm: float
    strip_norm: Tuple[float, float]


def _column(series: Sequence[FourierSeries], x) -> np.ndarray:
    return np.stack([series[0](x), series[1](x)], axis=-1)


def build_windowed_vector(wave: BlochWave, qconj: QConjugation, config: ReducibilityConfig) -> WindowedVector:
    lo, hi = config.window_I2
    if hi > wave.M:
        raise ConfigError(f"window_I2 {config.window_I2} exceeds the Bloch wave range M = {wave.M}")
    alpha = wave.frequency.value
    ks = np.arange(lo, hi + 1)
    u = wave.coeffs[ks + wave.M]
    first = FourierSeries(coeffs=np.exp(2j * np.pi * wave.theta) * u)
    second = FourierSeries(coeffs=u * np.exp(-2j * np.pi * ks * alpha))
    u_star = [qconj.q_diag[0].times(first), qconj.q_diag[1].times(second)]

    xs = np.arange(config.grid) / config.grid
    here = _column(u_star, xs)
    ahead = _column(u_star, xs + alpha)
    abar = transfer_matrix(wave.coupling, wave.frequency, wave.energy, xs)
    defect = np.einsum("...ij,...j->...i", abar, here) - np.exp(2j * np.pi * wave.theta) * ahead
    norms = np.linalg.norm(here, axis=-1)
    result = WindowedVector(
        u=[first, second], u_star=u_star, window=config.window_I2,
        defect=float(np.max(np.linalg.norm(defect, axis=-1))),
        min_norm=float(np.min(norms)), max_norm=float(np.max(norms)),
        strip_norm=strip_norm(u_star, config.strip_s),
    )
    logger.info(f"Windowed vector on I2={config.window_I2}: defect {result.defect:.3e}, min norm {result.min_norm:.3e}")
    return result


# --- SL(2,C) COMPLETION ---
def _completion(column: Sequence[FourierSeries], x) -> np.ndarray:
    u1, u2 = column[0](x), column[1](x)
    norm2 = np.abs(u1) ** 2 + np.abs(u2) ** 2
    out = np.zeros(np.shape(u1) + (2, 2), dtype=complex)
    out[..., 0, 0] = u1
    out[..., 1, 0] = u2
    out[..., 0, 1] = -np.conj(u2) / norm2
    out[..., 1, 1] = np.conj(u1) / norm2
    return out


def _sl2_inverse(mat: np.ndarray) -> np.ndarray:
    out = np.empty_like(mat)
    out[..., 0, 0] = mat[..., 1, 1]
    out[..., 1, 1] = mat[..., 0, 0]
    out[..., 0, 1] = -mat[..., 0, 1]
    out[..., 1, 0] = -mat[..., 1, 0]
    return out


class SL2Completion(BaseModel):
    """B(x) = (U(x), V(x)) with V = (−conj U₂, conj U₁)ᵀ/‖U‖², so det B = 1 pointwise."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    column: List[FourierSeries]
    grid: int
    values: np.ndarray
    interpolant: List[List[FourierSeries]]
    min_norm: float
    max_norm: float

    def at(self, x) -> np.ndarray:
        """Exact evaluation at real x through the column series."""
        return _completion(self.column, x)


def complete_to_sl2(U: Sequence[FourierSeries], grid: int = GRID, cutoff: Optional[int] = None) -> SL2Completion:
    xs = np.arange(grid) / grid
    norms = np.sqrt(np.abs(U[0](xs)) ** 2 + np.abs(U[1](xs)) ** 2)
    if np.min(norms) < MIN_COLUMN_NORM:
        raise NumericGuardError(f"complete_to_sl2: column norm {np.min(norms):.2e} below {MIN_COLUMN_NORM}")
    values = _completion(U, xs)
    cutoff = grid // 2 - 1 if cutoff is None else cutoff
    interpolant = [[FourierSeries.from_samples(values[:, i, j], cutoff) for j in range(2)] for i in range(2)]
    return SL2Completion(column=list(U), grid=grid, values=values, interpolant=interpolant,
                         min_norm=float(np.min(norms)), max_norm=float(np.max(norms)))


# --- RESIDUAL REPORTS ---
class Stage(str, Enum):
    B_STAGE = "B-stage"
    PHI_STAGE = "Phi-stage"
    CERTIFICATE = "certificate"


class NormPair(BaseModel):
    """Real-torus sup norm: lower = grid max, upper = Σ|ĉ_k| of the grid interpolant."""
    lower: float
    upper: float


def _norm_pair(values: np.ndarray) -> NormPair:
    lower = float(np.max(np.abs(values)))
    upper = float(np.sum(np.abs(np.fft.fft(values) / len(values))))
    return NormPair(lower=lower, upper=max(lower, upper))


class ConjugationReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    stage: Stage
    theta: float
    offdiag_b_norm: NormPair
    beta1_norm: NormPair
    beta2_norm: NormPair
    beta3_norm: NormPair
    residual_matrix_norm: float
    det_error: float
    beta3_bound_ratio: float
    beta3_bound_holds: bool
    b_modes: List[Tuple[int, float, float]]
    eliminable_before: Optional[float] = None
    eliminable_after: Optional[float] = None
    resonant_modes: List[int] = []
    near_resonant_modes: List[int] = []
    eliminated_modes: int = 0
    identity_residual: Optional[float] = None

    # grid data for the next stage, kept out of serialized output
    conjugated: np.ndarray = Field(exclude=True)
    frame: np.ndarray = Field(exclude=True)
    frame_shifted: np.ndarray = Field(exclude=True)
    cocycle: MatrixCocycle = Field(exclude=True)
    b_series: FourierSeries = Field(exclude=True)
    w_series: Optional[FourierSeries] = Field(default=None, exclude=True)


def _rotation(theta: float) -> np.ndarray:
    e = np.exp(2j * np.pi * theta)
    return np.array([[e, 0.0], [0.0, 1.0 / e]], dtype=complex)


def _residual_report(stage: Stage, theta: float, conjugated: np.ndarray, frame: np.ndarray,
                     frame_shifted: np.ndarray, coc: MatrixCocycle, cutoff: int, **extra) -> ConjugationReport:
    block = conjugated - _rotation(theta)
    beta1, b, beta2, beta3 = block[..., 0, 0], block[..., 0, 1], block[..., 1, 0], block[..., 1, 1]
    n1, nb, n2, n3 = (float(np.max(np.abs(v))) for v in (beta1, b, beta2, beta3))
    # det = 1 gives β₃(e + β₁) = bβ₂ − e⁻¹β₁, hence ‖β₃‖ ≤ (‖b‖‖β₂‖ + ‖β₁‖)/(1 − ‖β₁‖)
    rhs = nb * n2 + n1
    allowed = rhs / (1.0 - n1) + 1e-10 if n1 < 1.0 else math.inf
    det = conjugated[..., 0, 0] * conjugated[..., 1, 1] - conjugated[..., 0, 1] * conjugated[..., 1, 0]
    b_series = FourierSeries.from_samples(b, cutoff)
    return ConjugationReport(
        stage=stage, theta=theta,
        offdiag_b_norm=_norm_pair(b), beta1_norm=_norm_pair(beta1),
        beta2_norm=_norm_pair(beta2), beta3_norm=_norm_pair(beta3),
        residual_matrix_norm=float(np.max(np.linalg.norm(block, ord=2, axis=(-2, -1)))),
        det_error=float(np.max(np.abs(det - 1.0))),
        beta3_bound_ratio=n3 / rhs if rhs > 0.0 else 0.0,
        beta3_bound_holds=n3 <= allowed,
        b_modes=[(int(k), float(c.real), float(c.imag)) for k, c in zip(b_series.modes, b_series.coeffs)],
        conjugated=conjugated, frame=frame, frame_shifted=frame_shifted, cocycle=coc, b_series=b_series,
        **extra,
    )


def conjugation_residuals(B: SL2Completion, coc: MatrixCocycle, theta: float,
                          cutoff: int = FOURIER_CUTOFF) -> ConjugationReport:
    """B⁻¹(x+α)Ā(x)B(x) − diag(e^{2πiθ}, e^{−2πiθ}) = [β₁, b; β₂, β₃] on the grid."""
    xs = np.arange(B.grid) / B.grid
    shifted = B.at(xs + coc.freq.value)
    conjugated = _sl2_inverse(shifted) @ coc(xs) @ B.values
    report = _residual_report(Stage.B_STAGE, theta, conjugated, B.values, shifted, coc, cutoff)
    if not report.beta3_bound_holds:
        logger.warning(f"B-stage: beta3 determinant bound violated (ratio {report.beta3_bound_ratio:.3g})")
    logger.info(f"B-stage: |b| {report.offdiag_b_norm.lower:.3e}, |beta1| {report.beta1_norm.lower:.3e}, "
                f"|beta2| {report.beta2_norm.lower:.3e}")
    return report


def _unipotent(w: np.ndarray, sign: float = 1.0) -> np.ndarray:
    out = np.zeros(w.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    out[..., 0, 1] = sign * w
    return out


def homological_eliminate(report: ConjugationReport, theta: float, freq: Frequency,
                          config: ReducibilityConfig) -> ConjugationReport:
    """Remove the non-resonant low modes of b with W = [1, w; 0, 1], Φ = BW.

    ŵ_k = −b̂_k e^{−2πiθ}/(1 − e^{−2πi(2θ−kα)}); modes in the resonance set or
    failing the divisor guard stay in b^r."""
    b = report.b_series
    e = np.exp(2j * np.pi * theta)
    resonant = sorted(n for n in config.resonances.resonances if abs(n) <= b.cutoff)
    near: List[int] = []
    w_coeffs = np.zeros_like(b.coeffs)
    low = b.coeffs.copy()
    for idx, k in enumerate(b.modes):
        if k in resonant:
            low[idx] = 0.0
            continue
        divisor = 1.0 - np.exp(-2j * np.pi * (2.0 * theta - k * freq.value))
        if abs(divisor) < DIVISOR_GUARD:
            near.append(int(k))
            low[idx] = 0.0
            continue
        w_coeffs[idx] = -b.coeffs[idx] / (e * divisor)
    eliminated = len(b.modes) - len(resonant) - len(near)
    if eliminated == 0:
        raise NumericGuardError("theta too resonant for elimination at this cutoff")
    if near:
        logger.warning(f"homological_eliminate: near-resonant modes {near} moved into b^r")

    w = FourierSeries(coeffs=w_coeffs)
    b_res = FourierSeries(coeffs=b.coeffs - low)
    b_low = FourierSeries(coeffs=low)
    xs = np.arange(len(report.conjugated)) / len(report.conjugated)
    w_here, w_ahead = w(xs), w(xs + freq.value)
    W, W_ahead_inv = _unipotent(w_here), _unipotent(w_ahead, -1.0)

    # retained modes: W⁻¹(x+α)[rot + b^l]W(x) = rot exactly
    retained = np.broadcast_to(_rotation(theta), W.shape).copy()
    retained[..., 0, 1] = b_low(xs)
    identity = float(np.max(np.abs(W_ahead_inv @ retained @ W - _rotation(theta))))

    conjugated = W_ahead_inv @ report.conjugated @ W
    b_r = b_res(xs)
    before = float(np.max(np.abs(report.conjugated[..., 0, 1] - b_r)))
    after = float(np.max(np.abs(conjugated[..., 0, 1] - b_r)))
    new = _residual_report(
        Stage.PHI_STAGE, theta, conjugated, report.frame @ W, report.frame_shifted @ _unipotent(w_ahead),
        report.cocycle, b.cutoff, eliminable_before=before, eliminable_after=after,
        resonant_modes=resonant, near_resonant_modes=near, eliminated_modes=eliminated,
        identity_residual=identity, w_series=w,
    )
    logger.info(f"Phi-stage: eliminable residual {before:.3e} -> {after:.3e} ({eliminated} modes)")
    return new


# --- CERTIFICATE ---
class Certificate(BaseModel):
    epsilon: float
    bound: float
    intercept: float
    valid: bool
    d: float
    det_error: float


def holder_certificate(phi_report: ConjugationReport, epsilon: float) -> Certificate:
    """ln sup‖B′‖ for B′ = Φ′⁻¹(x+α)Ā_{E+ε}(x)Φ′(x), Φ′ = Φ·diag(1/d, d), d = ‖Φ‖ε^{1/4}."""
    if epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    coc = phi_report.cocycle
    if coc.coupling is None or coc.energy is None:
        raise ConfigError("holder_certificate needs a Harper cocycle with coupling and energy")
    phi, phi_ahead = phi_report.frame, phi_report.frame_shifted
    xs = np.arange(len(phi)) / len(phi)
    base = coc(xs)
    perturbed = transfer_matrix(coc.coupling, coc.freq, coc.energy + epsilon, xs)
    d = float(np.max(np.linalg.norm(phi, ord=2, axis=(-2, -1)))) * epsilon ** 0.25
    scale = np.array([[1.0, d * d], [1.0 / (d * d), 1.0]])

    inv_ahead = _sl2_inverse(phi_ahead)
    # D⁻¹MD multiplies the (1,2) entry by d² and the (2,1) entry by d⁻²
    b_prime = (inv_ahead @ perturbed @ phi) * scale
    delta = (inv_ahead @ (perturbed - base) @ phi) * scale
    bound = float(np.log(np.max(np.linalg.norm(b_prime, ord=2, axis=(-2, -1)))))
    intercept = float(np.max(np.linalg.norm(delta, ord=2, axis=(-2, -1)))) / math.sqrt(epsilon)
    det = b_prime[..., 0, 0] * b_prime[..., 1, 1] - b_prime[..., 0, 1] * b_prime[..., 1, 0]
    return Certificate(epsilon=epsilon, bound=bound, intercept=intercept,
                       valid=bound <= 2.0 * math.sqrt(epsilon) * intercept, d=d,
                       det_error=float(np.max(np.abs(det - 1.0))))


# --- PIPELINE ---
class ReducibilityReport(BaseModel):
    coupling: Tuple[float, float, float]
    alpha: float
    energy: float
    theta: float
    theta_candidates: List[Tuple[float, float]]
    bloch_residual: float
    bloch_flagged: bool
    bloch_decay_rate: Optional[float] = None
    config: ReducibilityConfig
    q_residual: float
    q_strip: float
    q_verified_strip: float
    window_defect: float
    window_min_norm: float
    window_strip_norm: Tuple[float, float]
    b_stage: ConjugationReport
    phi_stage: ConjugationReport
    certificates: List[Certificate]
    epsilon_windows: List[EpsilonWindow]
    lyapunov: float
    beta_hat: float
    hypothesis_ratio: Optional[float] = None


def run_pipeline(lam: Coupling, freq: Frequency, E: float, M: int = 400, theta_grid: int = THETA_GRID,
                 fourier_cutoff: int = FOURIER_CUTOFF, epsilon0: Optional[float] = None, grid: int = GRID,
                 epsilons: Sequence[float] = EPSILONS, workers: int = 1, progress: bool = False) -> ReducibilityReport:
    """Bloch wave → U_⋆ → B → Φ → certificate sweep over ``epsilons``."""
    try:
        wave = dual_bloch_wave(lam, freq, E, M, theta_grid, workers, progress)
        config = reducibility_config(lam, freq, wave.theta, M, fourier_cutoff, epsilon0, grid)
        qconj = build_q_conjugation(lam, freq, fourier_cutoff, energy=E)
        strip = verified_strip(qconj, lam, freq, energy=E)
        windowed = build_windowed_vector(wave, qconj, config)
        completion = complete_to_sl2(windowed.u_star, grid)
        b_stage = conjugation_residuals(completion, harper_cocycle(lam, freq, E), wave.theta, fourier_cutoff)
        phi_stage = homological_eliminate(b_stage, wave.theta, freq, config)
        certificates = [holder_certificate(phi_stage, eps) for eps in epsilons]
    except Exception:
        logger.exception(f"Reducibility pipeline failed for {lam.as_tuple()} at E={E}")
        raise

    try:
        decay = bloch_decay_rate(wave, k_max=config.window_I2[1])
    except NumericGuardError:
        decay = None
    lyap = dual_log_ratio(lam)
    return ReducibilityReport(
        coupling=lam.as_tuple(), alpha=freq.value, energy=E, theta=wave.theta,
        theta_candidates=wave.candidates, bloch_residual=wave.dual_eigen_residual, bloch_flagged=wave.flagged,
        bloch_decay_rate=decay, config=config, q_residual=qconj.residual,
        q_strip=qconj.strip, q_verified_strip=strip,
        window_defect=windowed.defect, window_min_norm=windowed.min_norm, window_strip_norm=windowed.strip_norm,
        b_stage=b_stage, phi_stage=phi_stage, certificates=certificates,
        epsilon_windows=epsilon_intervals(config.h, config.resonances),
        lyapunov=lyap, beta_hat=freq.beta_hat,
        hypothesis_ratio=lyap / freq.beta_hat if freq.beta_hat > 0.0 else None,
    )
