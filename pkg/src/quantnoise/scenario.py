from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from .cdf_estimator import (
    CdfEstimate,
    ErrorBounds,
    abscissa_bias,
    bound_curves,
    estimate_cdf,
    pdf_from_cdf,
    theoretical_variance,
    write_bounds_csv,
    write_estimate_csv,
)
from .distribution_fit import fit_gaussian_cdf
from .exceptions import CalibrationError, ConfigurationError, StageError
from .models import (
    NoiseModel,
    ScenarioConfig,
    ServoloopConfig,
    SineStimulus,
    StimulusPlan,
    SweptDcStimulus,
)
from .partition import PartitionTable, build_partition, write_partition_csv
from .quantizer import QuantizerModel, make_perturbed, make_uniform, write_transitions
from .servoloop import CalibrationResult, SimulatedDevice, calibrate_all, write_calibration_csv
from .signal_noise import acquire, derive_seed, render_sequence, write_stimulus_csv
from .sine_fit import SineFitResult, fit_records, write_theta_csv
from .utils import PathLike, configure_logger, write_frame, write_summary

logger = configure_logger(__name__)

# child seed streams of the master seed
QUANTIZER_STREAM = 0
NOISE_STREAM = 1
DEVICE_STREAM = 2


class ScenarioOutcome(BaseModel):
    """Everything one pipeline run produced, before anything is written."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: ScenarioConfig
    quantizer: QuantizerModel
    quantizer_used: QuantizerModel
    stimulus: np.ndarray
    stimulus_used: np.ndarray
    partition: PartitionTable
    estimate: CdfEstimate
    pdf: pd.DataFrame
    delta_eps: Optional[float] = None
    bounds: Optional[ErrorBounds] = None
    sine_fit: Optional[SineFitResult] = None
    calibration: Optional[CalibrationResult] = None

    @property
    def converged(self) -> bool:
        """False when the fit or any servoloop search stopped unconverged."""
        fit_ok = self.estimate.fit is not None and self.estimate.fit.converged
        calibration_ok = self.calibration is None or all(e.converged for e in self.calibration.entries)
        return fit_ok and calibration_ok

    def summary(self) -> dict[str, object]:
        """Ordered key=value entries of summary.txt."""
        cfg = self.config
        fit = self.estimate.fit
        lsb = cfg.lsb
        noise = build_plan(cfg).noise
        entries = {
            'scenario': cfg.scenario,
            'seed': cfg.seed,
            'replicate': cfg.replicate,
            'bits': cfg.bits,
            'lsb': lsb,
            'samples': self.stimulus.size,
            'records': self.estimate.records,
            'estimation': cfg.estimation,
            'transitions': cfg.transitions,
            'quantizer_id': self.quantizer.fingerprint,
            'tau': self.partition.tolerance,
            'k_first': self.partition.k_range[0],
            'k_last': self.partition.k_range[1],
            'points': len(self.estimate),
            'pairs': self.partition.total_pairs,
            'degenerate_points': int(self.estimate.degenerate.sum()),
            'noise_family': noise.family,
            'noise_mu': noise.location,
            'noise_scale': noise.scale,
            'noise_median': float(noise.distribution().median()),
            'mu_hat': fit.mu,
            'sigma_hat': fit.sigma,
            'mu_hat_lsb': fit.mu / lsb,
            'sigma_hat_lsb': fit.sigma / lsb,
            'max_residual': fit.max_residual,
            'rms_residual': fit.rms_residual,
            'fit_iterations': fit.iterations,
            'fit_converged': fit.converged,
            'fit_weights': fit.weights,
            'delta_eps': 'none' if self.delta_eps is None else self.delta_eps,
        }
        if self.sine_fit is not None:
            entries.update({
                'A_hat': self.sine_fit.amplitude,
                'phi0_hat': self.sine_fit.phase,
                'offset_hat': self.sine_fit.offset,
            })
        if self.calibration is not None:
            entries.update({
                'calibrated_codes': len(self.calibration.entries),
                'converged_codes': len(self.calibration.converged),
                'calibration_gain': self.calibration.gain,
                'calibration_offset': self.calibration.offset,
                'calibration_max_deviation': self.calibration.max_deviation,
            })
        entries['converged'] = self.converged
        return entries


class ReplicationStats(BaseModel):
    """Per-abscissa statistics of F-hat over repeated runs and the spread of the fits."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    count: int
    x: Optional[np.ndarray] = None
    sizes: Optional[np.ndarray] = None
    true_F: Optional[np.ndarray] = None
    mean_F: Optional[np.ndarray] = None
    var_F: Optional[np.ndarray] = None
    var_theory: Optional[np.ndarray] = None
    records: int
    mu: np.ndarray
    sigma: np.ndarray
    max_residual: np.ndarray
    converged: np.ndarray

    def frame(self) -> pd.DataFrame:
        """Columns x_j, L_j, F_true, mean_F, var_F, var_theory (empty if abscissas moved)."""
        if self.x is None:
            return pd.DataFrame(columns=['x_j', 'L_j', 'F_true', 'mean_F', 'var_F', 'var_theory'])
        return pd.DataFrame({
            'x_j': self.x,
            'L_j': self.sizes,
            'F_true': self.true_F,
            'mean_F': self.mean_F,
            'var_F': self.var_F,
            'var_theory': self.var_theory,
        })

    def fits_frame(self) -> pd.DataFrame:
        """Columns replicate, mu_hat, sigma_hat, max_residual, converged."""
        return pd.DataFrame({
            'replicate': np.arange(self.count),
            'mu_hat': self.mu,
            'sigma_hat': self.sigma,
            'max_residual': self.max_residual,
            'converged': self.converged,
        })


@contextmanager
def _stage(name: str):
    logger.debug("Stage '%s' started", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error("Stage '%s' failed: %s", name, e)
        raise StageError(name, e) from e


def build_quantizer(cfg: ScenarioConfig) -> QuantizerModel:
    """True quantizer of the scenario: uniform, optionally perturbed by a seeded INL."""
    base = make_uniform(cfg.bits, cfg.full_scale_low, cfg.full_scale_high)
    if cfg.inl_lsb == 0:
        return base
    return make_perturbed(base, cfg.inl_lsb * cfg.lsb, derive_seed(cfg.seed, QUANTIZER_STREAM))


def build_plan(cfg: ScenarioConfig) -> StimulusPlan:
    """Stimulus, noise and record count, in volts, for the configured replicate."""
    lsb = cfg.lsb
    if cfg.stimulus == 'sine':
        stimulus = SineStimulus(
            amplitude=cfg.amplitude_lsb * lsb,
            periods=cfg.periods,
            samples=cfg.samples,
            initial_phase=cfg.initial_phase,
            offset=cfg.offset_lsb * lsb,
        )
    else:
        stimulus = SweptDcStimulus.grid(cfg.sweep_low_lsb * lsb, cfg.sweep_high_lsb * lsb, cfg.sweep_step)
    noise = NoiseModel(
        family=cfg.noise_family,
        location=cfg.noise_mean_lsb * lsb,
        scale=cfg.noise_sigma_lsb * lsb,
        seed=derive_seed(cfg.seed, NOISE_STREAM, cfg.replicate),
    )
    return StimulusPlan(stimulus=stimulus, noise=noise, records=cfg.records)


def build_servo_config(cfg: ScenarioConfig) -> ServoloopConfig:
    lsb = cfg.lsb
    return ServoloopConfig(
        samples_per_step=cfg.servo_samples,
        initial_step=cfg.servo_initial_step_lsb * lsb,
        decay=cfg.servo_decay,
        max_iterations=cfg.servo_max_iterations,
        tolerance=cfg.servo_tolerance_lsb * lsb,
    )


def transition_window(cfg: ScenarioConfig, q: QuantizerModel, s: np.ndarray) -> Optional[tuple[int, int]]:
    """Transitions within k_window of the one nearest the stimulus centre, or None for all."""
    if cfg.k_window is None:
        return None
    centre = 0.5 * (float(s.min()) + float(s.max()))
    interior = q.transitions[1:-1]
    nearest = int(np.argmin(np.abs(interior - centre))) + 1
    return max(1, nearest - cfg.k_window), min(q.bins - 1, nearest + cfg.k_window)


def longest_converged_run(result: CalibrationResult) -> tuple[int, int]:
    """Longest run of consecutive codes whose servoloop converged."""
    best, current = None, None
    for entry in sorted(result.entries, key=lambda e: e.k):
        if not entry.converged:
            current = None
            continue
        if current is not None and entry.k == current[1] + 1:
            current = (current[0], entry.k)
        else:
            current = (entry.k, entry.k)
        if best is None or current[1] - current[0] > best[1] - best[0]:
            best = current
    if best is None:
        raise CalibrationError("no transition level converged")
    return best


def run_pipeline(cfg: ScenarioConfig, workers: int = 1) -> ScenarioOutcome:
    """
    Run every stage of a scenario in memory.

    acquire -> (servoloop) -> (sine fit) -> partition -> estimate -> (bounds)
    -> Gaussian fit -> PDF. Every stage failure is re-raised as a StageError
    naming the stage.

    Args:
        cfg (ScenarioConfig): Validated configuration.
        workers (int): Threads for record synthesis; results do not depend on it.

    Returns:
        ScenarioOutcome: All intermediate and final results.
    """
    logger.info("Running scenario '%s' (seed=%d, replicate=%d)", cfg.scenario, cfg.seed, cfg.replicate)
    with _stage('quantizer'):
        q_true = build_quantizer(cfg)
    with _stage('stimulus'):
        plan = build_plan(cfg)
        s_true = render_sequence(plan.stimulus)
    with _stage('acquire'):
        records = acquire(plan, q_true, workers=workers)

    window = transition_window(cfg, q_true, s_true)
    q_used, calibration = q_true, None
    if cfg.transitions == 'servoloop':
        with _stage('servoloop'):
            nominal = make_uniform(cfg.bits, cfg.full_scale_low, cfg.full_scale_high)
            device_noise = plan.noise.model_copy(
                update={'seed': derive_seed(cfg.seed, DEVICE_STREAM, cfg.replicate)}
            )
            device = SimulatedDevice(q_true, device_noise)
            lo, hi = window if window is not None else (1, q_true.bins - 1)
            calibration = calibrate_all(device, build_servo_config(cfg), range(lo, hi + 1), nominal=nominal)
            q_used = calibration.to_quantizer(nominal)
            window = longest_converged_run(calibration)

    s_used, sine = s_true, None
    if cfg.estimation == 'sinefit-s':
        with _stage('sinefit'):
            sine = fit_records(records, plan.stimulus.periods, quantizer=q_used)
            s_used = sine.sequence

    with _stage('partition'):
        if q_used is not q_true or s_used is not s_true:
            records = records.rebind(q_used, s_used)
        part = build_partition(q_used, s_used, cfg.tolerance, window)
    with _stage('estimate'):
        est = estimate_cdf(records, part)

    delta_eps, bounds = None, None
    with _stage('bounds'):
        if cfg.bound_mode == 'truth':
            delta_eps = abscissa_bias(part, q_true, s_true)
        elif cfg.bound_mode == 'user':
            delta_eps = cfg.delta_eps
        if delta_eps is not None:
            bounds = bound_curves(est, delta_eps, monotone=True)

    with _stage('fit'):
        est = est.with_fit(fit_gaussian_cdf(est, cfg.weights))
    with _stage('pdf'):
        window_points = min(cfg.pdf_window, (len(est) - 1) // 2)
        if window_points < cfg.pdf_window:
            logger.warning("PDF window reduced from %d to %d points", cfg.pdf_window, window_points)
        numeric = pdf_from_cdf(est, 'central-difference', max(window_points, 1), monotone=cfg.monotone)
        pdf = pd.DataFrame({
            'x': numeric['x'],
            'density_numeric': numeric['density'],
            'density_fit': est.fit.density(numeric['x'].to_numpy()),
        })

    return ScenarioOutcome(
        config=cfg,
        quantizer=q_true,
        quantizer_used=q_used,
        stimulus=s_true,
        stimulus_used=s_used,
        partition=part,
        estimate=est,
        pdf=pdf,
        delta_eps=delta_eps,
        bounds=bounds,
        sine_fit=sine,
        calibration=calibration,
    )


def write_outcome(outcome: ScenarioOutcome, out_dir: PathLike) -> dict[str, Path]:
    """
    Write the artifact bundle; on failure every file already written is removed.

    Returns:
        dict[str, Path]: Artifact name -> path.
    """
    out_dir = Path(out_dir)
    written: dict[str, Path] = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written['estimate'] = write_estimate_csv(outcome.estimate, out_dir / 'estimate.csv')
        written['partition'] = write_partition_csv(outcome.partition, out_dir / 'partition.csv')
        written['pdf'] = write_frame(outcome.pdf, out_dir / 'pdf.csv')
        written['stimulus'] = write_stimulus_csv(outcome.stimulus_used, out_dir / 'stimulus.csv')
        written['transitions'] = write_transitions(outcome.quantizer_used, out_dir / 'transitions.txt')
        if outcome.bounds is not None:
            written['bounds'] = write_bounds_csv(outcome.bounds, out_dir / 'bounds.csv')
        if outcome.sine_fit is not None:
            written['theta'] = write_theta_csv(outcome.sine_fit, out_dir / 'theta.csv')
        if outcome.calibration is not None:
            written['calibration'] = write_calibration_csv(outcome.calibration, out_dir / 'calibration.csv')
        written['summary'] = write_summary(out_dir / 'summary.txt', outcome.summary())
    except Exception as e:
        for path in written.values():
            path.unlink(missing_ok=True)
        logger.error("Writing artifacts to %s failed: %s", out_dir, e)
        raise StageError('write', e) from e
    logger.info("Wrote %d artifacts to %s", len(written), out_dir)
    return written


def run_scenario(cfg: ScenarioConfig, workers: int = 1) -> tuple[ScenarioOutcome, dict[str, Path]]:
    """
    Run a scenario and write estimate.csv, partition.csv, pdf.csv, bounds.csv
    (when a bound is requested), calibration.csv (servoloop transitions),
    theta.csv (sine fit) and summary.txt into cfg.out_dir.

    Artifacts are written even when the fit did not converge; the summary
    then says converged=false.

    Args:
        cfg (ScenarioConfig): Validated configuration.
        workers (int): Threads for record synthesis.

    Returns:
        tuple[ScenarioOutcome, dict[str, Path]]: The results and the written artifacts.
    """
    outcome = run_pipeline(cfg, workers=workers)
    return outcome, write_outcome(outcome, cfg.out_dir)


def _replicate(cfg: ScenarioConfig, replicate: int) -> dict:
    outcome = run_pipeline(cfg.model_copy(update={'replicate': replicate}))
    est = outcome.estimate
    return {
        'x': est.x,
        'F': est.F,
        'sizes': est.sizes,
        'mu': est.fit.mu,
        'sigma': est.fit.sigma,
        'max_residual': est.fit.max_residual,
        'converged': est.fit.converged,
    }


def run_replications(cfg: ScenarioConfig, count: int, workers: int = 1) -> ReplicationStats:
    """
    Run a scenario count times with replicates cfg.replicate .. cfg.replicate + count - 1.

    Each replicate draws fresh noise from its own derived seed while the
    quantizer stays fixed. Per-abscissa statistics are only formed when every
    run produced the same abscissas (known stimulus and transitions).

    Args:
        cfg (ScenarioConfig): Base configuration.
        count (int): Number of replications, at least 2.
        workers (int): Worker processes; results are identical for any value.

    Returns:
        ReplicationStats: Mean/variance of F-hat per abscissa and the fit spread.
    """
    if count < 2:
        raise ConfigurationError(f"replications need count >= 2, got {count}")
    indices = [cfg.replicate + i for i in range(count)]
    logger.info("Running %d replications of '%s' with %d workers", count, cfg.scenario, workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_replicate, [cfg] * count, indices))
    else:
        runs = [_replicate(cfg, index) for index in indices]

    fits = {
        'mu': np.array([run['mu'] for run in runs]),
        'sigma': np.array([run['sigma'] for run in runs]),
        'max_residual': np.array([run['max_residual'] for run in runs]),
        'converged': np.array([run['converged'] for run in runs]),
    }
    first = runs[0]
    same_abscissas = all(
        run['x'].shape == first['x'].shape and np.array_equal(run['x'], first['x']) for run in runs
    )
    if not same_abscissas:
        logger.warning("Abscissas differ between replications; per-point statistics skipped")
        return ReplicationStats(count=count, records=cfg.records, **fits)

    F = np.vstack([run['F'] for run in runs])
    true_F = build_plan(cfg).noise.distribution().cdf(first['x'])
    return ReplicationStats(
        count=count,
        x=first['x'],
        sizes=first['sizes'],
        true_F=true_F,
        mean_F=F.mean(axis=0),
        var_F=F.var(axis=0, ddof=1),
        var_theory=theoretical_variance(true_F, cfg.records, first['sizes']),
        records=cfg.records,
        **fits,
    )


def write_replications(stats: ReplicationStats, out_dir: PathLike) -> dict[str, Path]:
    """replications.csv (per abscissa) and fits.csv (per replicate)."""
    out_dir = Path(out_dir)
    comments = {
        'count': stats.count,
        'R': stats.records,
        'mu_mean': float(stats.mu.mean()),
        'mu_std': float(stats.mu.std(ddof=1)),
        'sigma_mean': float(stats.sigma.mean()),
        'sigma_std': float(stats.sigma.std(ddof=1)),
    }
    return {
        'replications': write_frame(stats.frame(), out_dir / 'replications.csv', comments),
        'fits': write_frame(stats.fits_frame(), out_dir / 'fits.csv'),
    }
