import os
import functools
import logging
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np
from tqdm import tqdm

from app.models import RunConfig, load_run_config, parse_frequency_flag
from app.store import load_or_build_cloud, make_envelope, write_csv, write_json
from harper.arithmetic import continued_fraction
from harper.cocycle import harper_cocycle, lyapunov_closed_form, lyapunov_numeric
from harper.config import ConfigError, NumericGuardError, setup_logging
from harper.operator import RegionTag, build_truncation, classify_region, eigenvalues
from harper.reducibility import EPSILONS, THETA_GRID, run_pipeline
from harper.spectrum import (
    detect_gaps,
    duality_check,
    empirical_sigma_star,
    empirical_spectrum,
    gap_decay_report,
    gap_distance_check,
    holder_floor,
    holder_modulus,
    homogeneity,
    ids as ids_at,
    thouless_residual,
)

logger = logging.getLogger(__name__)

# --- CONFIG ---
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def guarded(fn):
    """Map ConfigError to exit 2 and NumericGuardError to exit 3."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"{ctx.info_name}: config error: {e}")
            click.echo(f"config error: {e}", err=True)
            ctx.exit(EXIT_CONFIG)
        except NumericGuardError as e:
            logger.error(f"{ctx.info_name}: numeric guard tripped: {e}")
            click.echo(f"numeric guard: {e}", err=True)
            ctx.exit(EXIT_NUMERIC)
        except Exception:
            logger.exception(f"{ctx.info_name} failed")
            raise
    return wrapper


def _out(config: RunConfig, name: str) -> str:
    return os.path.join(config.output_dir, name)


def _energy_grid(e_min: float, e_max: float, points: int) -> np.ndarray:
    if points < 1 or e_max < e_min:
        raise ConfigError(f"energy grid needs points >= 1 and e_max >= e_min, got [{e_min}, {e_max}] x {points}")
    return np.linspace(e_min, e_max, points)


# --- GROUP ---
@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config.")
@click.option("--coupling", nargs=3, type=float, default=None, help="lambda1 lambda2 lambda3")
@click.option("--frequency", type=str, default=None, help="golden | <float> | cf:1,10 | liouville:BETA:DEPTH")
@click.option("--n", type=int, default=None, help="Truncation size.")
@click.option("--phase-count", type=int, default=None)
@click.option("--fourier-cutoff", type=int, default=None)
@click.option("--m", "M", type=int, default=None, help="Dual Bloch-wave half-width M.")
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(file_okay=False), default=None)
@click.option("--workers", type=int, default=None)
@click.option("--no-cache", is_flag=True, default=False)
@click.option("--verbose", is_flag=True, default=False)
@click.pass_context
def cli(ctx, config_path, coupling, frequency, n, phase_count, fourier_cutoff, M, seed, output_dir, workers,
        no_cache, verbose):
    """Desk-scale experiments for the extended Harper's model."""
    setup_logging(logging.DEBUG if verbose else logging.INFO)
    try:
        overrides = {
            "coupling": list(coupling) if coupling else None,
            "frequency": parse_frequency_flag(frequency) if frequency else None,
            "n": n, "phase_count": phase_count, "fourier_cutoff": fourier_cutoff, "M": M,
            "seed": seed, "output_dir": output_dir, "workers": workers,
            "cache": False if no_cache else None,
        }
        ctx.obj = load_run_config(config_path, overrides)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        ctx.exit(EXIT_CONFIG)


# --- SUBCOMMANDS ---
@cli.command()
@click.pass_obj
@guarded
def spectrum(config: RunConfig):
    """Eigenvalue cloud (CSV) and labelled gaps (JSON)."""
    cloud = load_or_build_cloud(config, progress=True)
    scan = detect_gaps(cloud)
    write_csv(_out(config, "cloud.csv"), ["phase_index", "eigenvalue"],
              zip(cloud.phase_index.tolist(), cloud.samples.tolist()))
    try:
        decay = gap_decay_report(scan.gaps, config.coupling_model()).model_dump(mode="json")
    except NumericGuardError as e:
        logger.warning(f"spectrum: no gap decay fit ({e})")
        decay = None
    distances = gap_distance_check(scan.gaps, cloud.frequency.beta_hat, cloud.e_min)
    result = {
        "e_min": cloud.e_min,
        "e_max": cloud.e_max,
        "samples": cloud.total,
        "gaps": [g.model_dump(mode="json") for g in scan.gaps],
        "unlabeled": [p.model_dump(mode="json") for p in scan.unlabeled],
        "plateau_tol": scan.plateau_tol,
        "min_width": scan.min_width,
        "decay": decay,
        "gap_distances": [d.model_dump(mode="json") for d in distances],
    }
    click.echo(write_json(_out(config, "gaps.json"), make_envelope("spectrum", config, result)))


@cli.command()
@click.option("--e-min", type=float, required=True)
@click.option("--e-max", type=float, required=True)
@click.option("--points", type=int, default=201, show_default=True)
@click.pass_obj
@guarded
def ids(config: RunConfig, e_min, e_max, points):
    """IDS on an energy grid (CSV)."""
    cloud = load_or_build_cloud(config, progress=True)
    grid = _energy_grid(e_min, e_max, points)
    values = ids_at(cloud, grid)
    click.echo(write_csv(_out(config, "ids.csv"), ["E", "ids"], zip(grid.tolist(), np.atleast_1d(values).tolist())))


@cli.command()
@click.option("--e-min", type=float, required=True)
@click.option("--e-max", type=float, required=True)
@click.option("--points", type=int, default=21, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.pass_obj
@guarded
def lyapunov(config: RunConfig, e_min, e_max, points, steps):
    """Numeric Lyapunov exponent, closed form and Thouless residual (CSV)."""
    lam, freq = config.coupling_model(), config.frequency_model()
    cloud = load_or_build_cloud(config, progress=True)
    grid = _energy_grid(e_min, e_max, points)
    closed = lyapunov_closed_form(lam) if classify_region(lam) == RegionTag.II else None
    phases = max(32, config.phase_count)

    def row(E: float):
        lyap = lyapunov_numeric(harper_cocycle(lam, freq, E), steps, phases).value
        thouless = thouless_residual(cloud, lam, E, lyap)
        return [E, lyap, "" if closed is None else closed, thouless.value, int(thouless.perturbed)]

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        rows = list(tqdm(pool.map(row, grid.tolist()), total=len(grid), desc="Energies"))
    click.echo(write_csv(_out(config, "lyapunov.csv"),
                         ["E", "lyapunov_numeric", "lyapunov_closed_form", "thouless_residual", "perturbed"], rows))


@cli.command()
@click.option("--pairs", type=int, default=20000, show_default=True)
@click.option("--scale-min", type=float, default=None, help="Smallest |ΔE| (default: the cloud floor, 10× resolution).")
@click.option("--scale-max", type=float, default=None, help="Largest |ΔE| (default: max(1e-2, 10·scale-min)).")
@click.pass_obj
@guarded
def holder(config: RunConfig, pairs, scale_min, scale_max):
    """Hölder envelope fit of the IDS (JSON)."""
    cloud = load_or_build_cloud(config, progress=True)
    scale_min = scale_min if scale_min is not None else holder_floor(cloud)
    scale_max = scale_max if scale_max is not None else max(1e-2, 10.0 * scale_min)
    fit = holder_modulus(cloud, pairs, (scale_min, scale_max), seed=config.seed)
    result = {"scale_range": [scale_min, scale_max], **fit.model_dump(mode="json")}
    click.echo(write_json(_out(config, "holder.json"), make_envelope("holder", config, result)))


@cli.command(name="homogeneity")
@click.option("--sigma", "sigmas", type=float, multiple=True, default=(1e-3,), show_default=True)
@click.option("--samples", type=int, default=50, show_default=True)
@click.option("--eps", type=float, default=0.5, show_default=True)
@click.pass_obj
@guarded
def homogeneity_cmd(config: RunConfig, sigmas, samples, eps):
    """Window measures |(E−σ, E+σ) ∩ Σ| at sampled spectrum energies (JSON)."""
    cloud = load_or_build_cloud(config, progress=True)
    gaps = detect_gaps(cloud).gaps
    intervals = empirical_spectrum(cloud, gaps)
    inside = np.zeros(cloud.total, dtype=bool)
    for lo, hi in intervals:
        inside |= (cloud.samples >= lo) & (cloud.samples <= hi)
    pool = cloud.samples[inside]
    if not 1 <= samples <= len(pool):
        raise ConfigError(f"samples must lie in [1, {len(pool)}] (in-spectrum eigenvalues), got {samples}")
    rng = np.random.default_rng(config.seed)
    energies = sorted(rng.choice(pool, size=samples, replace=False).tolist())
    rows = [homogeneity(cloud, gaps, E, s).model_dump(mode="json") for s in sigmas for E in energies]
    result = {
        "eps": eps,
        "measures": rows,
        "min_ratio": min(r["measure"] / r["sigma"] for r in rows),
        "sigma_star": empirical_sigma_star(cloud, gaps, eps, sigmas, energies),
    }
    click.echo(write_json(_out(config, "homogeneity.json"), make_envelope("homogeneity", config, result)))


@cli.command()
@click.option("--n-values", type=int, multiple=True, help="Truncation sizes (default: n and 2n).")
@click.pass_obj
@guarded
def duality(config: RunConfig, n_values):
    """Hausdorff distance between Σ_λ and λ₂Σ_λ̄ per truncation size (JSON)."""
    lam, freq = config.coupling_model(), config.frequency_model()
    sizes = list(n_values) or [config.n, 2 * config.n]
    trend = [duality_check(lam, freq, n, config.phase_count, config.workers).model_dump(mode="json") for n in sizes]
    distances = [t["distance"] for t in trend]
    result = {
        "distance": distances[-1],
        "trend": trend,
        "decreasing": all(b <= a for a, b in zip(distances, distances[1:])),
    }
    click.echo(write_json(_out(config, "duality.json"), make_envelope("duality", config, result)))


@cli.command(name="reduce")
@click.option("--energy", type=float, required=True)
@click.option("--theta-grid", type=int, default=THETA_GRID, show_default=True)
@click.option("--epsilon", "epsilons", type=float, multiple=True, help="Certificate ε values (default: decades 1e-6..1e-2).")
@click.option("--epsilon0", type=float, default=None, help="Resonance threshold (default max(10·beta_hat, 3)).")
@click.pass_obj
@guarded
def reduce_cmd(config: RunConfig, energy, theta_grid, epsilons, epsilon0):
    """Reducibility report chain at one energy (JSON)."""
    report = run_pipeline(config.coupling_model(), config.frequency_model(), energy, M=config.M,
                          theta_grid=theta_grid, fourier_cutoff=config.fourier_cutoff, epsilon0=epsilon0,
                          epsilons=epsilons or EPSILONS, workers=config.workers, progress=True)
    click.echo(write_json(_out(config, "reduce.json"),
                          make_envelope("reduce", config, report.model_dump(mode="json"))))


@cli.command()
@click.option("--alpha-min", type=float, default=0.01, show_default=True)
@click.option("--alpha-max", type=float, default=0.99, show_default=True)
@click.option("--alpha-points", type=int, default=99, show_default=True)
@click.option("--phases", type=int, default=1, show_default=True)
@click.pass_obj
@guarded
def butterfly(config: RunConfig, alpha_min, alpha_max, alpha_points, phases):
    """Long-form (alpha, phase_index, eigenvalue) table for plotting (CSV)."""
    if not 0.0 < alpha_min <= alpha_max < 1.0 or alpha_points < 1 or phases < 1:
        raise ConfigError("butterfly needs 0 < alpha_min <= alpha_max < 1, alpha_points >= 1 and phases >= 1")
    lam = config.coupling_model()
    alphas = np.linspace(alpha_min, alpha_max, alpha_points).tolist()

    def column(alpha: float):
        freq = continued_fraction(alpha, config.frequency.depth)
        return [(alpha, j, float(ev)) for j in range(phases)
                for ev in eigenvalues(build_truncation(lam, freq, j / phases, config.n))]

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        blocks = list(tqdm(pool.map(column, alphas), total=len(alphas), desc="Alpha sweep"))
    click.echo(write_csv(_out(config, "butterfly.csv"), ["alpha", "phase_index", "eigenvalue"],
                         (r for block in blocks for r in block)))


def main():
    cli(prog_name="harper")


if __name__ == "__main__":
    main()
