import math
import logging
from fractions import Fraction
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from harper.config import ConfigError

logger = logging.getLogger(__name__)

# --- CONFIG ---
Q_CAP = 10**9            # denominators beyond this are not represented
PRECISION_WARN_Q = 10**7  # torus_norm(q*alpha) loses digits past this
EXHAUSTION_TOL = 1e-14
SCAN_CAP = 10**5
RESONANCE_CAP = 10**6
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class Frequency(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float
    cf_coeffs: List[int]
    convergents: List[Tuple[int, int]]
    beta_hat: float = 0.0
    truncated: bool = False
    precision_flag: bool = False

    @property
    def depth(self) -> int:
        return len(self.cf_coeffs)

    @property
    def denominators(self) -> List[int]:
        return [q for _, q in self.convergents]


class ResonanceSet(BaseModel):
    """Ordered ε₀-resonances of θ up to a finite horizon.

    When no further resonance exists up to the horizon, the horizon itself
    stands in for the next resonance (``next_scale``)."""
    model_config = ConfigDict(frozen=True)

    theta: float
    epsilon0: float
    horizon: int
    resonances: List[int]
    norms: List[float]

    def next_scale(self, j: int) -> int:
        """|n_{j+1}| for 0-based position j, or the horizon sentinel."""
        if j + 1 < len(self.resonances):
            return abs(self.resonances[j + 1])
        return self.horizon


# --- TORUS ---
def torus_norm(x):
    """Distance to the nearest integer. Works on scalars and arrays."""
    if np.ndim(x) == 0:
        x = float(x)
        return abs(x - round(x))
    x = np.asarray(x, dtype=float)
    return np.abs(x - np.rint(x))


# --- CONTINUED FRACTIONS ---
def _convergents(coeffs: List[int]) -> List[Tuple[int, int]]:
    p_prev, q_prev = 1, 0
    p, q = 0, 1
    out = []
    for a in coeffs:
        p, p_prev = a * p + p_prev, p
        q, q_prev = a * q + q_prev, q
        out.append((p, q))
    return out


def _with_beta(coeffs: List[int], value: float, truncated: bool) -> Frequency:
    conv = _convergents(coeffs)
    freq = Frequency(
        value=value,
        cf_coeffs=list(coeffs),
        convergents=conv,
        truncated=truncated,
        precision_flag=conv[-1][1] > PRECISION_WARN_Q,
    )
    if freq.precision_flag:
        logger.warning(f"q_D = {conv[-1][1]} exceeds {PRECISION_WARN_Q}: torus norms lose digits.")
    if len(conv) < 2:
        return freq
    beta = beta_estimate(freq, conv[-1][1]).value
    return freq.model_copy(update={"beta_hat": beta})


def continued_fraction(alpha: float, depth: int) -> Frequency:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")

    coeffs: List[int] = []
    rest = Fraction(alpha)
    truncated = False
    q_prev, q = 0, 1
    for _ in range(depth):
        inv = 1 / rest
        a = math.floor(inv)
        if a * q + q_prev > Q_CAP:
            truncated = True
            break
        coeffs.append(a)
        q, q_prev = a * q + q_prev, q
        rest = inv - a
        if rest < EXHAUSTION_TOL:
            truncated = True
            break
    if truncated:
        logger.warning(f"Continued fraction of {alpha} stopped at depth {len(coeffs)} (floating-point exhaustion).")
    return _with_beta(coeffs, alpha, truncated)


def frequency_from_cf(coeffs: List[int]) -> Frequency:
    """Frequency whose value is the finite continued fraction [0; a_1, ..., a_D]."""
    if not coeffs or any(int(a) < 1 for a in coeffs):
        raise ConfigError("cf_coeffs must be a non-empty list of positive integers")
    coeffs = [int(a) for a in coeffs]
    p, q = _convergents(coeffs)[-1]
    if q > Q_CAP:
        raise ConfigError(f"cf_coeffs give denominator {q} above the cap {Q_CAP}")
    value = float(Fraction(p, q))
    if not 0.0 < value < 1.0:
        raise ConfigError(f"cf_coeffs give value {value} outside (0, 1)")
    return _with_beta(coeffs, value, truncated=False)


def golden_mean(depth: int = 30) -> Frequency:
    return continued_fraction(GOLDEN, depth)


# --- BETA(ALPHA) ---
class BetaEstimate(BaseModel):
    """β̂ over the tail convergents (positions from ``depth // 2`` on), with brute-force scans."""
    model_config = ConfigDict(frozen=True)

    value: float
    horizon: int
    tail_start: int
    tail_q: int
    scan_max: float       # every 1 ≤ k ≤ min(K, SCAN_CAP)
    tail_scan_max: float  # every tail_q ≤ k ≤ min(K, SCAN_CAP, q_D − 1)


def _tail_indices(freq: Frequency, horizon: int) -> List[int]:
    # tail positions with a computed successor and a denominator inside the horizon
    depth = freq.depth
    return [k for k in range(depth // 2, depth - 1) if freq.denominators[k] <= horizon] if depth > 1 else []


def _scan(alpha: float, lo: int, hi: int) -> float:
    if hi < lo:
        return 0.0
    ks = np.arange(lo, hi + 1, dtype=float)
    norms = torus_norm(ks * alpha)
    mask = norms > 0.0
    return float(np.max(-np.log(norms[mask]) / ks[mask], initial=0.0))


def beta_estimate(freq: Frequency, horizon: int) -> BetaEstimate:
    qs = freq.denominators
    if len(qs) < 2:
        raise ConfigError("beta_estimate needs at least two convergents")
    if horizon < qs[1]:
        raise ConfigError(f"horizon {horizon} too small: minimum usable K is q_2 = {qs[1]}")
    tail = _tail_indices(freq, horizon)
    best = 0.0
    for k in tail:
        norm = torus_norm(qs[k] * freq.value)
        if norm > 0.0:
            best = max(best, -math.log(norm) / qs[k])
    top = min(horizon, SCAN_CAP)
    tail_q = qs[tail[0]] if tail else qs[-1]
    return BetaEstimate(
        value=best, horizon=horizon, tail_start=freq.depth // 2, tail_q=tail_q,
        scan_max=_scan(freq.value, 1, top),
        tail_scan_max=_scan(freq.value, tail_q, min(top, qs[-1] - 1)) if tail else 0.0,
    )


def liouville_frequency(target_beta: float, depth: int) -> Frequency:
    """Frequency with q_{k+1} ≈ e^{target_beta · q_k} at every level.

    a_{k+1} is the smallest positive integer with q_{k+1} >= e^{target_beta · q_k}.
    Construction stops (truncated=True) at the first denominator above Q_CAP."""
    if not 0.0 < target_beta <= 5.0:
        raise ConfigError(f"target_beta must lie in (0, 5], got {target_beta}")
    if not 1 <= depth <= 12:
        raise ConfigError(f"depth must lie in [1, 12], got {depth}")

    coeffs = [1]
    q_prev, q = 1, 1
    truncated = False
    while len(coeffs) < depth:
        exponent = target_beta * q
        if exponent > math.log(Q_CAP) + 1.0:
            truncated = True
            break
        a = max(1, math.ceil((math.exp(exponent) - q_prev) / q))
        if a * q + q_prev > Q_CAP:
            truncated = True
            break
        coeffs.append(a)
        q, q_prev = a * q + q_prev, q
    if truncated:
        logger.warning(f"Liouville construction capped at depth {len(coeffs)} (q_D = {q}).")
    freq = frequency_from_cf(coeffs)
    return freq.model_copy(update={"truncated": truncated})


def level_ratios(freq: Frequency) -> List[float]:
    """ln(q_{k+1}) / q_k along the computed convergents."""
    qs = freq.denominators
    return [math.log(qs[k + 1]) / qs[k] for k in range(len(qs) - 1)]


# --- RESONANCES ---
def find_resonances(theta: float, freq: Frequency, epsilon0: float, horizon: int) -> ResonanceSet:
    if epsilon0 <= 0.0:
        raise ConfigError(f"epsilon0 must be positive, got {epsilon0}")
    if not 1 <= horizon <= RESONANCE_CAP:
        raise ConfigError(f"horizon must lie in [1, {RESONANCE_CAP}], got {horizon}")

    ks = np.arange(0, horizon + 1, dtype=float)
    plus = torus_norm(2.0 * theta - ks * freq.value)
    minus = torus_norm(2.0 * theta + ks * freq.value)
    # running min over |k| <= m
    running = np.minimum.accumulate(np.minimum(plus, minus))
    bound = np.exp(-epsilon0 * ks)

    resonances: List[int] = []
    norms: List[float] = []
    for m in range(1, horizon + 1):
        for n, norm in ((m, plus[m]), (-m, minus[m])):
            if norm <= running[m] and norm <= bound[m]:
                resonances.append(n)
                norms.append(float(norm))
    return ResonanceSet(theta=theta, epsilon0=epsilon0, horizon=horizon,
                        resonances=resonances, norms=norms)


def small_divisor_profile(freq: Frequency, horizon: int) -> Tuple[List[Tuple[int, float, float]], float]:
    """Rows (k, ‖kα‖, ‖kα‖·e^{1.5·beta_hat·k}) and the empirical constant Ĉ(α)."""
    if not 1 <= horizon <= RESONANCE_CAP:
        raise ConfigError(f"horizon must lie in [1, {RESONANCE_CAP}], got {horizon}")
    ks = np.arange(1, horizon + 1, dtype=float)
    norms = torus_norm(ks * freq.value)
    if np.any(norms < 1e-15):
        k0 = int(ks[np.argmax(norms < 1e-15)])
        raise ConfigError(f"alpha = {freq.value} behaves as rational: ‖{k0}·alpha‖ = 0")
    scaled = norms * np.exp(1.5 * freq.beta_hat * ks)
    rows = [(int(k), float(a), float(b)) for k, a, b in zip(ks, norms, scaled)]
    return rows, float(np.min(scaled))


def resolve_frequency(spec: dict, depth: int = 30) -> Frequency:
    """Build a Frequency from a config-style spec (value, cf, liouville or golden)."""
    kind = spec.get("kind")
    if kind == "golden":
        return golden_mean(depth)
    if kind == "value":
        return continued_fraction(float(spec["value"]), int(spec.get("depth", depth)))
    if kind == "cf":
        return frequency_from_cf(list(spec["coeffs"]))
    if kind == "liouville":
        return liouville_frequency(float(spec["target_beta"]), int(spec["depth"]))
    raise ConfigError(f"frequency.kind: unknown kind {kind!r}")

