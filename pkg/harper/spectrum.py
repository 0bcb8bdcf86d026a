import math
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.stats import linregress
from tenacity import retry, retry_if_exception_type, stop_after_attempt
from tqdm import tqdm

from harper.arithmetic import Frequency, torus_norm
from harper.cocycle import lyapunov_closed_form
from harper.config import ConfigError, NumericGuardError
from harper.operator import (
    Coupling,
    RegionTag,
    build_truncation,
    classify_region,
    dual_coupling,
    eigenvalues,
    mean_log_c,
)

logger = logging.getLogger(__name__)

# --- CONFIG ---
MAX_SITES = 10**8
MAX_LABEL = 50
THOULESS_WINDOW = 1e-4
ATOM_TOL = 1e-6
MIN_WIDTH_FACTOR = 2.0
HOLDER_BINS = 24
HOLDER_FLOOR_FACTOR = 10.0
TOP_KEY = 10**9  # homogeneity overlap key for (E_max, ∞)


class SpectrumCloud(BaseModel):
    """Eigenvalues of all phase truncations, sorted, with their phase indices."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    coupling: Coupling
    frequency: Frequency
    n: int
    phase_count: int
    samples: np.ndarray
    phase_index: np.ndarray

    @property
    def total(self) -> int:
        return len(self.samples)

    @property
    def e_min(self) -> float:
        return float(self.samples[0])

    @property
    def e_max(self) -> float:
        return float(self.samples[-1])

    @property
    def support(self) -> Tuple[float, float]:
        return self.e_min, self.e_max

    @property
    def resolution(self) -> float:
        """Mean single-phase level spacing (E_max − E_min)/n."""
        return (self.e_max - self.e_min) / self.n

    def ids(self, energy):
        return ids(self, energy)


class GapRecord(BaseModel):
    label: int
    lower: float
    upper: float
    ids_value: float
    label_residual: float

    @property
    def length(self) -> float:
        return self.upper - self.lower


class Plateau(BaseModel):
    lower: float
    upper: float
    ids_value: float
    best_label: int
    label_residual: float


class GapScan(BaseModel):
    gaps: List[GapRecord]
    unlabeled: List[Plateau]
    plateau_tol: float
    min_width: float


# --- CLOUD AND IDS ---
def _phase_eigenvalues(lam: Coupling, freq: Frequency, n: int, x: float) -> np.ndarray:
    return eigenvalues(build_truncation(lam, freq, x, n))


def build_cloud(lam: Coupling, freq: Frequency, n: int, phase_count: int, workers: int = 1,
                progress: bool = False) -> SpectrumCloud:
    if n < 1 or phase_count < 1:
        raise ConfigError(f"n and phase_count must be positive, got n={n}, phase_count={phase_count}")
    if n * phase_count > MAX_SITES:
        raise ConfigError(f"n·phase_count = {n * phase_count} exceeds the desk-scale guard {MAX_SITES}")
    phases = [j / phase_count for j in range(phase_count)]
    logger.info(f"Building cloud for {lam.as_tuple()} at alpha={freq.value:.12g}, n={n}, phases={phase_count}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(lambda x: _phase_eigenvalues(lam, freq, n, x), phases)
        blocks = list(tqdm(results, total=phase_count, desc="Phases", disable=not progress))
    values = np.concatenate(blocks)
    index = np.repeat(np.arange(phase_count), n)
    order = np.argsort(values, kind="stable")
    return SpectrumCloud(coupling=lam, frequency=freq, n=n, phase_count=phase_count,
                         samples=values[order], phase_index=index[order])


def ids(cloud: SpectrumCloud, energy, interpolate: bool = False):
    """N̂(E) = #{samples ≤ E}/total; linear between samples when interpolate=True."""
    energy = np.asarray(energy, dtype=float)
    if interpolate:
        heights = np.arange(1, cloud.total + 1) / cloud.total
        out = np.interp(energy, cloud.samples, heights, left=0.0, right=1.0)
    else:
        out = np.searchsorted(cloud.samples, energy, side="right") / cloud.total
    return float(out) if out.ndim == 0 else out


# --- THOULESS ---
def _log_potential(cloud: SpectrumCloud, energy: float, window: float) -> float:
    dist = np.abs(cloud.samples - energy)
    inside = dist < window
    outside = np.log(dist[~inside]).sum()
    # ∫_{-δ}^{δ} ln|t| dt / (2δ) = ln δ − 1 under a locally flat density
    local = inside.sum() * (math.log(window) - 1.0)
    return float((outside + local) / cloud.total)


class ThoulessResidual(BaseModel):
    energy: float
    value: float
    perturbed: bool = False


def thouless_residual(cloud: SpectrumCloud, lam: Coupling, energy: float, lyap: float,
                      window: float = THOULESS_WINDOW) -> ThoulessResidual:
    """lyap − (−∫ln|c| + ∫ln|E′−E| dN̂(E′)); an exact sample atom is moved by 1e−9 and flagged."""
    nearest = np.min(np.abs(cloud.samples - energy))
    perturbed = nearest == 0.0
    if perturbed:
        logger.warning(f"thouless_residual: E = {energy} is a sample atom, perturbing by 1e-9")
        energy += 1e-9
    elif nearest < ATOM_TOL:
        logger.info(f"thouless_residual: E = {energy} within {nearest:.1e} of a sample, local window applies")
    value = lyap - (-mean_log_c(lam).quadrature + _log_potential(cloud, energy, window))
    return ThoulessResidual(energy=energy, value=value, perturbed=bool(perturbed))


def imaginary_thouless_bound(cloud: SpectrumCloud, energy: float, eps: float) -> Tuple[float, float]:
    """(½∫ln(1+ε²/(E−E′)²)dN̂, ½ln2·(N̂(E+ε)−N̂(E−ε))); the first always dominates."""
    diff = cloud.samples - energy
    with np.errstate(divide="ignore"):
        increase = 0.5 * float(np.mean(np.log1p(eps * eps / np.maximum(diff * diff, 1e-300))))
    lower = 0.5 * math.log(2.0) * (ids(cloud, energy + eps) - ids(cloud, energy - eps))
    return increase, lower


# --- GAPS ---
def _best_label(height: float, freq: Frequency, max_label: int) -> Tuple[int, float]:
    ms = np.concatenate([np.arange(1, max_label + 1), -np.arange(1, max_label + 1)])
    resid = torus_norm(height - ms * freq.value)
    k = int(np.argmin(resid))
    return int(ms[k]), float(resid[k])


def detect_gaps(cloud: SpectrumCloud, max_label: int = MAX_LABEL, plateau_tol: Optional[float] = None,
                min_width: Optional[float] = None) -> GapScan:
    """IDS plateaus (N̂ rises by < plateau_tol over ≥ min_width) labelled by frac(mα)."""
    tol = plateau_tol if plateau_tol is not None else 1.0 / (2.0 * cloud.n)
    width = min_width if min_width is not None else MIN_WIDTH_FACTOR * cloud.resolution
    s = cloud.samples
    total = cloud.total
    m = max(1, math.ceil(tol * total))
    if total <= m:
        return GapScan(gaps=[], unlabeled=[], plateau_tol=tol, min_width=width)

    spans = s[m:] - s[:-m]
    wide = spans >= width
    spacing = np.diff(s)
    big_step = 10.0 * float(np.median(spacing)) if len(spacing) else 0.0

    plateaus: List[Plateau] = []
    consumed = 0  # first spacing index not yet inside a recorded plateau
    i = 0
    while i < len(wide):
        if not wide[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(wide) and wide[j + 1]:
            j += 1
        # run of wide windows [i, j]; the gap lives inside samples i..j+m
        lo, hi = i, j + m
        steps = np.nonzero(spacing[lo:hi] >= big_step)[0] + lo
        steps = steps[steps >= consumed]
        if len(steps):
            first, last = int(steps[0]), int(steps[-1])
            widest = int(steps[np.argmax(spacing[steps])])
            lower, upper = float(s[first]), float(s[last + 1])
            height = (widest + 1) / total
            if upper - lower >= width and tol < height < 1.0 - tol:
                label, resid = _best_label(height, cloud.frequency, max_label)
                plateaus.append(Plateau(lower=lower, upper=upper, ids_value=height,
                                        best_label=label, label_residual=resid))
                consumed = last + 1
        i = j + 1

    gaps: Dict[int, GapRecord] = {}
    unlabeled: List[Plateau] = []
    for p in plateaus:
        if p.label_residual > 3.0 * tol:
            unlabeled.append(p)
            continue
        record = GapRecord(label=p.best_label, lower=p.lower, upper=p.upper,
                           ids_value=p.ids_value, label_residual=p.label_residual)
        clash = gaps.get(p.best_label)
        if clash is None or record.label_residual < clash.label_residual:
            if clash is not None:
                unlabeled.append(Plateau(lower=clash.lower, upper=clash.upper, ids_value=clash.ids_value,
                                         best_label=clash.label, label_residual=clash.label_residual))
            gaps[p.best_label] = record
        else:
            unlabeled.append(p)
    ordered = sorted(gaps.values(), key=lambda g: g.lower)
    logger.info(f"detect_gaps: {len(ordered)} labelled, {len(unlabeled)} unlabelled plateaus")
    return GapScan(gaps=ordered, unlabeled=unlabeled, plateau_tol=tol, min_width=width)


class GapDecay(BaseModel):
    slope: float
    intercept: float
    r2: float
    closed_form_lyapunov: Optional[float] = None
    lyapunov_ratio: Optional[float] = None


def gap_decay_report(gaps: Sequence[GapRecord], lam: Optional[Coupling] = None) -> GapDecay:
    """Least-squares fit of ln(length) against |m|."""
    if len(gaps) < 5:
        raise NumericGuardError(f"gap_decay_report needs at least 5 labelled gaps, got {len(gaps)}")
    labels = np.array([abs(g.label) for g in gaps], dtype=float)
    logs = np.log(np.array([g.length for g in gaps]))
    fit = linregress(labels, logs)
    report = GapDecay(slope=float(fit.slope), intercept=float(fit.intercept), r2=float(fit.rvalue ** 2))
    if fit.slope >= 0.0:
        logger.warning(f"gap lengths do not decay with |m| (slope {fit.slope:.3g})")
    if lam is not None and classify_region(lam) == RegionTag.II:
        lyap = lyapunov_closed_form(lam)
        report = report.model_copy(update={"closed_form_lyapunov": lyap, "lyapunov_ratio": -fit.slope / lyap})
    return report


class GapDistance(BaseModel):
    m: int
    m_prime: int
    distance: float
    reference: float
    ratio: float


def gap_distance_check(gaps: Sequence[GapRecord], beta_hat: float, e_min: float) -> List[GapDistance]:
    """dist(G_m, G_m′) against e^{−6β|m′|} for |m′| ≥ |m|; m = 0 stands for G₀ = (−∞, E_min)."""
    rows: List[GapDistance] = []
    for a in gaps:
        for b in gaps:
            if a.label == b.label or abs(b.label) < abs(a.label):
                continue
            if abs(b.label) == abs(a.label) and b.label < a.label:
                continue
            dist = max(0.0, max(a.lower, b.lower) - min(a.upper, b.upper))
            ref = math.exp(-6.0 * beta_hat * abs(b.label))
            rows.append(GapDistance(m=a.label, m_prime=b.label, distance=dist, reference=ref, ratio=dist / ref))
        dist0 = max(0.0, a.lower - e_min)
        ref0 = math.exp(-6.0 * beta_hat * abs(a.label))
        rows.append(GapDistance(m=0, m_prime=a.label, distance=dist0, reference=ref0, ratio=dist0 / ref0))
    return rows


# --- HÖLDER MODULUS ---
class HolderFit(BaseModel):
    exponent: float
    constant: float
    r2: float
    bins_used: int
    pairs: int
    envelope: List[Tuple[float, float]]


class _DegenerateSampling(Exception):
    pass


def holder_floor(cloud: SpectrumCloud) -> float:
    """Smallest usable |ΔE|: HOLDER_FLOOR_FACTOR × (E_max − E_min)/(n·phase_count)."""
    return HOLDER_FLOOR_FACTOR * (cloud.e_max - cloud.e_min) / cloud.total


def holder_modulus(source, pair_count: int, scale_range: Tuple[float, float], seed: int = 0,
                   bins: int = HOLDER_BINS, knots: Optional[np.ndarray] = None) -> HolderFit:
    """Upper-envelope fit of ln|ΔN| against ln|ΔE|.

    ``source`` needs a vectorised ``ids(E)`` and a ``support`` pair. Half of the
    pairs are anchored at knots (cloud samples, or the support ends) so the
    envelope sees the worst points; the rest are uniform in the hull."""
    dmin, dmax = scale_range
    if not 0.0 < dmin < dmax:
        raise ConfigError(f"scale_range must satisfy 0 < min < max, got {scale_range}")
    lo, hi = source.support
    if dmax >= hi - lo:
        raise ConfigError(f"scale_range max {dmax} exceeds the support width {hi - lo}")
    if isinstance(source, SpectrumCloud):
        if dmin < holder_floor(source):
            raise ConfigError(f"scale_range min {dmin} is below the cloud floor {holder_floor(source):.3g}")
        pool = source.samples if knots is None else knots
    else:
        pool = np.array([lo, hi]) if knots is None else knots

    @retry(retry=retry_if_exception_type(_DegenerateSampling), stop=stop_after_attempt(5), reraise=True)
    def attempt(state: List[int]) -> HolderFit:
        rng = np.random.default_rng(seed + state[0])
        state[0] += 1
        deltas = np.exp(rng.uniform(math.log(dmin), math.log(dmax), pair_count))
        anchored = rng.random(pair_count) < 0.5
        direction = np.where(rng.random(pair_count) < 0.5, 1.0, -1.0)
        e1 = np.where(anchored, rng.choice(pool, pair_count), rng.uniform(lo, hi, pair_count))
        # flip pairs that leave the hull; drop those that leave it both ways
        out = (e1 + direction * deltas < lo) | (e1 + direction * deltas > hi)
        direction = np.where(out, -direction, direction)
        e2 = e1 + direction * deltas
        inside = (e2 >= lo) & (e2 <= hi)
        d_n = np.abs(np.asarray(source.ids(e2)) - np.asarray(source.ids(e1)))[inside]
        d_e = deltas[inside]

        edges = np.exp(np.linspace(math.log(dmin), math.log(dmax), bins + 1))
        which = np.clip(np.searchsorted(edges, d_e, side="right") - 1, 0, bins - 1)
        envelope = []
        for b in range(bins):
            sel = which == b
            if not np.any(sel) or np.max(d_n[sel]) <= 0.0:
                continue
            k = int(np.argmax(np.where(sel, d_n, -1.0)))
            envelope.append((float(d_e[k]), float(d_n[k])))
        if len(envelope) < 3:
            raise _DegenerateSampling()
        x = np.log([e for e, _ in envelope])
        y = np.log([v for _, v in envelope])
        fit = linregress(x, y)
        return HolderFit(exponent=float(fit.slope), constant=float(math.exp(fit.intercept)),
                         r2=float(fit.rvalue ** 2), bins_used=len(envelope), pairs=int(inside.sum()),
                         envelope=envelope)

    try:
        return attempt([0])
    except _DegenerateSampling:
        raise NumericGuardError("holder_modulus: every resample landed in gaps; widen scale_range")


# --- HOMOGENEITY ---
class WindowMeasure(BaseModel):
    energy: float
    sigma: float
    measure: float
    overlaps: Dict[int, float]
    labels: List[int]


def _overlap(a: float, b: float, c: float, d: float) -> float:
    return max(0.0, min(b, d) - max(a, c))


def homogeneity(cloud: SpectrumCloud, gaps: Sequence[GapRecord], energy: float, sigma: float) -> WindowMeasure:
    """Lebesgue measure of (E−σ, E+σ) ∩ empirical spectrum.

    Overlap keys are gap labels, 0 for G₀ = (−∞, E_min) and ``TOP_KEY`` for
    the region above E_max."""
    diameter = cloud.e_max - cloud.e_min
    if sigma <= 0.0 or sigma > diameter:
        raise ConfigError(f"sigma must lie in (0, {diameter}], got {sigma}")
    if not cloud.e_min <= energy <= cloud.e_max:
        raise ConfigError(f"E = {energy} lies outside the empirical spectrum support")
    a, b = energy - sigma, energy + sigma
    overlaps: Dict[int, float] = {}
    for g in gaps:
        length = _overlap(a, b, g.lower, g.upper)
        if length > 0.0:
            overlaps[g.label] = length
    labels = sorted(overlaps, key=abs)
    below = _overlap(a, b, -math.inf, cloud.e_min)
    above = _overlap(a, b, cloud.e_max, math.inf)
    if below > 0.0:
        overlaps[0] = below
    if above > 0.0:
        overlaps[TOP_KEY] = above
    return WindowMeasure(energy=energy, sigma=sigma, measure=2.0 * sigma - sum(overlaps.values()),
                         overlaps=overlaps, labels=labels)


def empirical_spectrum(cloud: SpectrumCloud, gaps: Sequence[GapRecord]) -> List[Tuple[float, float]]:
    """[E_min, E_max] minus the detected gaps, as sorted closed intervals."""
    intervals = []
    start = cloud.e_min
    for g in sorted(gaps, key=lambda g: g.lower):
        if g.lower > start:
            intervals.append((start, g.lower))
        start = max(start, g.upper)
    if start < cloud.e_max:
        intervals.append((start, cloud.e_max))
    return intervals


def empirical_sigma_star(cloud: SpectrumCloud, gaps: Sequence[GapRecord], eps: float,
                         sigmas: Sequence[float], energies: Sequence[float]) -> Optional[float]:
    """Largest σ in ``sigmas`` for which measure ≥ (1−ε)σ held at every sampled E."""
    passing = [s for s in sorted(sigmas)
               if all(homogeneity(cloud, gaps, e, s).measure >= (1.0 - eps) * s for e in energies)]
    return passing[-1] if passing else None


# --- DUALITY ---
def _directed(a: List[Tuple[float, float]], b: List[Tuple[float, float]]) -> float:
    starts = np.array([lo for lo, _ in b])
    ends = np.array([hi for _, hi in b])

    def dist(x: float) -> float:
        return float(np.min(np.maximum(0.0, np.maximum(starts - x, x - ends))))

    candidates = [p for iv in a for p in iv]
    holes = [(-math.inf, b[0][0])] + [(b[k][1], b[k + 1][0]) for k in range(len(b) - 1)] + [(b[-1][1], math.inf)]
    for lo, hi in holes:
        mid = 0.5 * (lo + hi) if math.isfinite(lo) and math.isfinite(hi) else None
        for s_lo, s_hi in a:
            if mid is not None and s_lo <= mid <= s_hi:
                candidates.append(mid)
    return max(dist(x) for x in candidates)


def hausdorff_distance(a: List[Tuple[float, float]], b: List[Tuple[float, float]]) -> float:
    """Hausdorff distance between two finite unions of closed intervals."""
    return max(_directed(a, b), _directed(b, a))


class DualityResult(BaseModel):
    distance: float
    n: int
    phase_count: int
    region: RegionTag
    shared_labels: List[int]


def duality_check(lam: Coupling, freq: Frequency, n: int, phase_count: int, workers: int = 1) -> DualityResult:
    """Hausdorff distance between Σ_λ and λ₂·Σ_λ̄.

    Gaps are matched by label; each empirical spectrum removes only the
    labels detected in both clouds."""
    region = classify_region(lam)
    if region != RegionTag.II:
        logger.warning(f"duality_check: {lam.as_tuple()} is in region {region.value}, not II")
    dual = dual_coupling(lam)
    clouds = [build_cloud(c, freq, n, phase_count, workers) for c in (lam, dual)]
    scans = [detect_gaps(c).gaps for c in clouds]
    shared = sorted(set(g.label for g in scans[0]) & set(g.label for g in scans[1]), key=lambda m: (abs(m), m))
    spectra = []
    for cloud, gaps, scale in zip(clouds, scans, (1.0, lam.l2)):
        kept = [g for g in gaps if g.label in shared]
        spectra.append([(scale * lo, scale * hi) for lo, hi in empirical_spectrum(cloud, kept)])
    distance = hausdorff_distance(spectra[0], spectra[1])
    logger.info(f"duality_check {lam.as_tuple()} n={n}: Hausdorff distance {distance:.3e} over {len(shared)} shared gaps")
    return DualityResult(distance=distance, n=n, phase_count=phase_count, region=region, shared_labels=shared)
