"""Command line interface: one subcommand per pipeline step plus whole scenarios.

Every subcommand writes CSV/text artifacts into --out-dir. Exit codes:
0 success, 2 configuration error, 3 pipeline stage error, 4 non-convergence
(artifacts are kept and flagged).
"""

import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import (
    BaseSettings,
    CliApp,
    CliSubCommand,
    SettingsConfigDict,
    SettingsError,
    get_subcommand,
)

from .cdf_estimator import (
    bound_curves,
    estimate_cdf,
    pdf_from_cdf,
    read_codes_csv,
    read_estimate_csv,
    write_bounds_csv,
    write_codes_csv,
    write_estimate_csv,
)
from .distribution_fit import fit_gaussian_cdf
from .exceptions import ConfigurationError, NonConvergenceError, QuantNoiseError, StageError
from .models import NAMED_SCENARIOS, NoiseModel, ScenarioConfig, ServoloopConfig
from .partition import build_partition, write_partition_csv
from .quantizer import QuantizerModel, make_perturbed, make_uniform, read_transitions, write_transitions
from .scenario import build_plan, build_quantizer, run_replications, run_scenario, write_replications
from .servoloop import SimulatedDevice, calibrate_all, write_calibration_csv
from .signal_noise import acquire, read_stimulus_csv, render_sequence, synthesize, write_samples_csv, write_stimulus_csv
from .sine_fit import fit_records, write_theta_csv
from .utils import configure_logger, set_log_level, write_frame

logger = configure_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_NONCONVERGENCE = 4


class ScenarioArgs(BaseModel):
    """Scenario selection shared by simulate, mc and replicate; unset values keep the scenario's."""

    scenario: Optional[Literal['fig2a', 'fig2b', 'fig2c', 'experiment', 'custom']] = Field(
        default=None, description="named scenario (ignored fields come from --config)"
    )
    records: Optional[int] = Field(default=None, description="R, records per stimulus sample")
    noise_sigma_lsb: Optional[float] = Field(default=None, description="noise scale in LSB")
    noise_mean_lsb: Optional[float] = Field(default=None, description="noise location in LSB")
    estimation: Optional[Literal['known-s', 'sinefit-s']] = None
    bound_mode: Optional[Literal['none', 'truth', 'user']] = None
    delta_eps: Optional[float] = Field(default=None, description="user abscissa bound, volts")
    transitions: Optional[Literal['truth', 'servoloop']] = None
    weights: Optional[Literal['none', 'inverse-variance']] = None
    tolerance: Optional[float] = Field(default=None, description="grouping tolerance, volts")

    def scenario_config(self, root: 'QuantNoiseCLI') -> ScenarioConfig:
        overrides = {
            name: value
            for name, value in self.model_dump(include=set(ScenarioArgs.model_fields)).items()
            if value is not None
        }
        if root.seed is not None:
            overrides['seed'] = root.seed
        if root.out_dir is not None:
            overrides['out_dir'] = root.out_dir
        if root.config is not None:
            return ScenarioConfig.from_file(root.config, **overrides)
        if 'scenario' not in overrides:
            raise ConfigurationError(
                f"pass --scenario ({', '.join(NAMED_SCENARIOS)} or custom) or --config <file>"
            )
        return ScenarioConfig(**overrides)


def _out_dir(root: 'QuantNoiseCLI') -> Path:
    out = root.out_dir if root.out_dir is not None else Path('out')
    out.mkdir(parents=True, exist_ok=True)
    return out


class GenQuantizer(BaseModel):
    """Write a uniform (optionally INL-perturbed) quantizer transitions file."""

    bits: int = Field(description="resolution")
    low: float = Field(description="T_0, volts")
    high: float = Field(description="T_K, volts")
    inl_lsb: float = Field(default=0.0, description="INL bound in LSB, 0 for ideal")
    output: str = Field(default='transitions.txt', description="file name inside --out-dir")

    def run(self, root: 'QuantNoiseCLI') -> None:
        q = make_uniform(self.bits, self.low, self.high)
        if self.inl_lsb > 0:
            q = make_perturbed(q, self.inl_lsb * q.step, root.seed or 0)
        path = write_transitions(q, _out_dir(root) / self.output)
        print(f"transitions={path} K={q.bins} step={q.step!r}")


class Simulate(ScenarioArgs):
    """Simulate a scenario's acquisition: codes.csv, stimulus.csv and transitions.txt."""

    samples_csv: bool = Field(default=False, description="also write the noisy inputs as samples.csv")

    def run(self, root: 'QuantNoiseCLI') -> None:
        cfg = self.scenario_config(root)
        q = build_quantizer(cfg)
        plan = build_plan(cfg)
        s = render_sequence(plan.stimulus)
        out = Path(cfg.out_dir)
        records = acquire(plan, q, workers=root.workers)
        write_codes_csv(records, out / 'codes.csv')
        write_stimulus_csv(s, out / 'stimulus.csv')
        write_transitions(q, out / 'transitions.txt')
        if self.samples_csv:
            write_samples_csv(synthesize(plan, workers=root.workers), out / 'samples.csv')
        print(f"codes={out / 'codes.csv'} N={records.samples} R={records.records} K={records.bins}")


class Estimate(BaseModel):
    """Partition the (n, k) pairs and estimate the noise CDF from a codes file."""

    codes: Path = Field(description="codes.csv (n, r, code)")
    transitions: Path = Field(description="transitions file used for the partition")
    stimulus: Path = Field(description="stimulus.csv (n, s) used for the partition")
    tolerance: Optional[float] = Field(default=None, description="grouping tolerance, volts")
    k_first: Optional[int] = Field(default=None, ge=1, description="first code k of the transition window")
    k_last: Optional[int] = Field(default=None, ge=1, description="last code k of the transition window")
    rebind: bool = Field(default=False, description="accept estimated transitions/stimulus")
    members: bool = Field(default=False, description="dump the (n, k) members in partition.csv")
    delta_eps: Optional[float] = Field(default=None, description="also write bounds.csv")

    def run(self, root: 'QuantNoiseCLI') -> None:
        records = read_codes_csv(self.codes)
        q = read_transitions(self.transitions)
        s = read_stimulus_csv(self.stimulus)
        if self.rebind:
            records = records.rebind(q, s)
        k_range = None
        if self.k_first is not None or self.k_last is not None:
            k_range = (
                1 if self.k_first is None else self.k_first,
                q.bins - 1 if self.k_last is None else self.k_last,
            )
        part = build_partition(q, s, self.tolerance, k_range)
        est = estimate_cdf(records, part)
        out = _out_dir(root)
        write_partition_csv(part, out / 'partition.csv', members=self.members)
        write_estimate_csv(est, out / 'estimate.csv')
        if self.delta_eps is not None:
            write_bounds_csv(bound_curves(est, self.delta_eps, monotone=True), out / 'bounds.csv')
        print(f"estimate={out / 'estimate.csv'} points={len(est)}")


class SineFit(BaseModel):
    """Fit a sine of known frequency to every record; write the estimated stimulus."""

    codes: Path = Field(description="codes.csv (n, r, code)")
    transitions: Path = Field(description="transitions file mapping codes to bin midpoints")
    periods: int = Field(description="lambda, periods per record")
    theta: bool = Field(default=False, description="also write theta.csv per record")

    def run(self, root: 'QuantNoiseCLI') -> None:
        records = read_codes_csv(self.codes)
        q = read_transitions(self.transitions)
        result = fit_records(records, self.periods, quantizer=q)
        out = _out_dir(root)
        write_stimulus_csv(result.sequence, out / 'stimulus_fit.csv', {'periods': self.periods})
        if self.theta:
            write_theta_csv(result, out / 'theta.csv')
        print(result.summary_line())


class FitGaussian(BaseModel):
    """Fit a Gaussian CDF to an estimate file; rewrite it with the fit header and a pdf.csv."""

    estimate: Path = Field(description="estimate.csv to fit")
    weights: Literal['none', 'inverse-variance'] = 'none'
    pdf_window: int = Field(default=8, description="half-width of the numeric derivative, points")

    def run(self, root: 'QuantNoiseCLI') -> None:
        est = read_estimate_csv(self.estimate)
        fit = fit_gaussian_cdf(est, self.weights)
        est = est.with_fit(fit)
        out = _out_dir(root)
        write_estimate_csv(est, out / 'estimate.csv')
        numeric = pdf_from_cdf(est, 'central-difference', min(self.pdf_window, max((len(est) - 1) // 2, 1)))
        numeric['density_fit'] = fit.density(numeric['x'].to_numpy())
        write_frame(numeric.rename(columns={'density': 'density_numeric'}), out / 'pdf.csv')
        print(fit.summary_line())
        if not fit.converged:
            raise NonConvergenceError(f"Gaussian fit did not converge; artifacts kept in {out}")


class Servoloop(BaseModel):
    """Locate transition levels of a simulated device with the servoloop."""

    transitions: Path = Field(description="true transitions of the simulated device")
    k_first: int = Field(ge=1, description="first lower code k (threshold T_k)")
    k_last: int = Field(ge=1, description="last lower code k")
    noise_family: Literal['gaussian', 'uniform', 'laplace'] = 'gaussian'
    noise_mean: float = Field(default=0.0, description="noise location, volts")
    noise_scale: Optional[float] = Field(default=None, description="noise scale, volts; omit for a noiseless device")
    samples: int = Field(default=10_000, description="M, samples per DC level")
    initial_step_lsb: float = 0.5
    decay: float = 0.5
    max_iterations: int = 200
    tolerance_lsb: float = 1e-3
    to_quantizer: bool = Field(default=False, description="also write calibrated transitions")

    def run(self, root: 'QuantNoiseCLI') -> None:
        device_q = read_transitions(self.transitions)
        t = device_q.transitions
        nominal = QuantizerModel(np.linspace(t[0], t[-1], device_q.bins + 1))
        noise = None
        if self.noise_scale is not None:
            noise = NoiseModel(
                family=self.noise_family, location=self.noise_mean, scale=self.noise_scale, seed=root.seed or 0
            )
        cfg = ServoloopConfig(
            samples_per_step=self.samples,
            initial_step=self.initial_step_lsb * nominal.step,
            decay=self.decay,
            max_iterations=self.max_iterations,
            tolerance=self.tolerance_lsb * nominal.step,
        )
        result = calibrate_all(
            SimulatedDevice(device_q, noise), cfg, range(self.k_first, self.k_last + 1), nominal=nominal
        )
        out = _out_dir(root)
        write_calibration_csv(result, out / 'calibration.csv')
        if self.to_quantizer:
            write_transitions(result.to_quantizer(nominal), out / 'transitions_calibrated.txt')
        print(f"gain={result.gain!r} offset={result.offset!r} max_deviation={result.max_deviation!r}")
        failed = [entry for entry in result.entries if not entry.converged]
        if failed:
            raise NonConvergenceError(f"{len(failed)} codes did not converge; see {out / 'calibration.csv'}")


class MonteCarlo(ScenarioArgs):
    """Run a whole scenario (named or from --config) and write its artifact bundle."""

    def run(self, root: 'QuantNoiseCLI') -> None:
        cfg = self.scenario_config(root)
        outcome, artifacts = run_scenario(cfg, workers=root.workers)
        print(artifacts['summary'].read_text(), end='')
        if not outcome.converged:
            raise NonConvergenceError(f"scenario '{cfg.scenario}' did not converge; artifacts kept in {cfg.out_dir}")


class Replicate(ScenarioArgs):
    """Repeat a scenario with derived seeds and write replication statistics."""

    count: int = Field(default=200, description="number of replications")

    def run(self, root: 'QuantNoiseCLI') -> None:
        cfg = self.scenario_config(root)
        stats = run_replications(cfg, self.count, workers=root.workers)
        paths = write_replications(stats, cfg.out_dir)
        print(
            f"replications={paths['replications']} mu_mean={float(stats.mu.mean())!r} "
            f"sigma_mean={float(stats.sigma.mean())!r}"
        )


class QuantNoiseCLI(BaseSettings):
    """Estimate the CDF and PDF of the noise at a quantizer input from quantized records."""

    model_config = SettingsConfigDict(
        env_prefix='QUANTNOISE_',
        env_file='.env',
        extra='ignore',
        cli_prog_name='quantnoise',
        cli_kebab_case=True,
        cli_implicit_flags=True,
    )

    seed: Optional[int] = Field(default=None, description="master seed")
    out_dir: Optional[Path] = Field(default=None, description="artifact directory (default: out)")
    config: Optional[Path] = Field(default=None, description="key=value scenario config file")
    workers: int = Field(default=1, ge=1, description="worker threads/processes")
    log_level: str = Field(default='INFO', description="DEBUG, INFO, WARNING or ERROR")

    gen_quantizer: CliSubCommand[GenQuantizer] = Field(alias='gen-quantizer')
    simulate: CliSubCommand[Simulate]
    estimate: CliSubCommand[Estimate]
    sinefit: CliSubCommand[SineFit]
    fit_gaussian: CliSubCommand[FitGaussian] = Field(alias='fit-gaussian')
    servoloop: CliSubCommand[Servoloop]
    mc: CliSubCommand[MonteCarlo]
    replicate: CliSubCommand[Replicate]

    def cli_cmd(self) -> None:
        set_log_level(self.log_level)
        command = get_subcommand(self, is_required=False)
        if command is None:
            raise ConfigurationError("no subcommand given; run quantnoise --help")
        command.run(self)


def main(argv: Optional[list[str]] = None) -> int:
    """
    Run the CLI and translate failures into exit codes.

    Args:
        argv (list[str], optional): Arguments without the program name; defaults to sys.argv[1:].

    Returns:
        int: 0, 2 (configuration), 3 (pipeline stage) or 4 (non-convergence).
    """
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        CliApp.run(QuantNoiseCLI, cli_args=args)
    except SystemExit as e:
        if e.code is None:
            return EXIT_OK
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    except (ConfigurationError, ValidationError, SettingsError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        logger.error("Input file not found: %s", e.filename)
        return EXIT_CONFIG
    except NonConvergenceError as e:
        logger.error("%s", e)
        return EXIT_NONCONVERGENCE
    except StageError as e:
        logger.error("%s", e)
        return EXIT_CONFIG if isinstance(e.cause, ConfigurationError) else EXIT_STAGE
    except QuantNoiseError as e:
        logger.error("%s", e)
        return EXIT_STAGE
    return EXIT_OK


def run() -> None:
    """Console script entry point."""
    sys.exit(main())
