import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import stats
from scipy.special import ndtr

from .exceptions import ConfigurationError
from .utils import PathLike, configure_logger

logger = configure_logger(__name__)


class SineStimulus(BaseModel):
    """Coherently sampled sine s_n = A sin(2 pi lambda n / N + phi0) + C."""

    model_config = ConfigDict(frozen=True)

    kind: Literal['sine'] = 'sine'
    amplitude: float = Field(ge=0, description="A, volts")
    periods: int = Field(gt=0, description="lambda, observed periods")
    samples: int = Field(ge=3, description="N, samples per record")
    initial_phase: float = Field(default=0.0, description="phi0, radians")
    offset: float = Field(default=0.0, description="C, volts")

    @model_validator(mode='after')
    def _warn_incoherent(self) -> 'SineStimulus':
        if math.gcd(self.periods, self.samples) != 1:
            logger.warning(
                "gcd(periods=%d, samples=%d) != 1: the record holds fewer than N distinct phases",
                self.periods, self.samples,
            )
        return self


class SweptDcStimulus(BaseModel):
    """A list of DC levels applied one after the other."""

    model_config = ConfigDict(frozen=True)

    kind: Literal['swept_dc'] = 'swept_dc'
    levels: tuple[float, ...] = Field(min_length=1)

    @field_validator('levels')
    @classmethod
    def _finite(cls, levels: tuple[float, ...]) -> tuple[float, ...]:
        if not all(math.isfinite(level) for level in levels):
            raise ValueError("DC levels must be finite")
        return levels

    @classmethod
    def grid(cls, low: float, high: float, step: float) -> 'SweptDcStimulus':
        """
        Uniform sweep from low up to high (inclusive when it lands on the grid).

        Args:
            low (float): First level, volts.
            high (float): Upper end of the sweep, volts.
            step (float): Increment, volts.

        Returns:
            SweptDcStimulus: The sweep.
        """
        if step <= 0 or high < low:
            raise ConfigurationError(f"invalid sweep [{low}, {high}] with step {step}")
        count = int(math.floor((high - low) / step + 1e-9)) + 1
        return cls(levels=tuple(float(v) for v in low + step * np.arange(count)))


Stimulus = Annotated[Union[SineStimulus, SweptDcStimulus], Field(discriminator='kind')]


class NoiseModel(BaseModel):
    """Additive input noise: family, location, scale and the master seed of its streams.

    The scale is the standard deviation for 'gaussian', the half-width for
    'uniform' and the diversity b for 'laplace'.
    """

    model_config = ConfigDict(frozen=True)

    family: Literal['gaussian', 'uniform', 'laplace'] = 'gaussian'
    location: float = 0.0
    scale: float = Field(gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    def distribution(self):
        """Frozen scipy.stats distribution with the analytic CDF, PDF and median."""
        if self.family == 'gaussian':
            return stats.norm(loc=self.location, scale=self.scale)
        if self.family == 'uniform':
            return stats.uniform(loc=self.location - self.scale, scale=2 * self.scale)
        return stats.laplace(loc=self.location, scale=self.scale)

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        """
        Draw noise values from a generator.

        Args:
            rng (np.random.Generator): Source of randomness.
            size (int or tuple): Output shape.

        Returns:
            np.ndarray: Noise values, volts.
        """
        if self.family == 'gaussian':
            return self.location + self.scale * rng.standard_normal(size)
        if self.family == 'uniform':
            return rng.uniform(self.location - self.scale, self.location + self.scale, size)
        return rng.laplace(self.location, self.scale, size)


class StimulusPlan(BaseModel):
    """Stimulus, noise model and number of records R: x(n, r) = s_n + eta(n, r)."""

    model_config = ConfigDict(frozen=True)

    stimulus: Stimulus
    noise: NoiseModel
    records: int = Field(ge=1)


class ServoloopConfig(BaseModel):
    """Procedural parameters of the servoloop transition-level search."""

    model_config = ConfigDict(frozen=True)

    samples_per_step: int = Field(default=10_000, ge=1, description="M, samples drawn at each DC level")
    initial_step: float = Field(gt=0, description="first DC increment, volts")
    decay: float = Field(default=0.5, gt=0, lt=1, description="step factor applied on each reversal")
    max_iterations: int = Field(default=200, ge=1)
    tolerance: float = Field(gt=0, description="stop once the step falls below this, volts")
    fraction_band: float = Field(default=0.1, gt=0, le=0.5)


class GaussianCdfFit(BaseModel):
    """Gaussian CDF fitted to a sampled CDF estimate."""

    model_config = ConfigDict(frozen=True)

    mu: float
    sigma: float = Field(gt=0)
    max_residual: float
    rms_residual: float
    iterations: int
    converged: bool
    weights: Literal['none', 'inverse-variance'] = 'none'
    objective_history: tuple[float, ...] = ()

    def cdf(self, x) -> np.ndarray:
        """Fitted CDF at x."""
        return ndtr((np.asarray(x, dtype=float) - self.mu) / self.sigma)

    def density(self, x) -> np.ndarray:
        """Fitted Gaussian PDF at x."""
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))

    def summary_line(self) -> str:
        """'mu=... sigma=... maxres=... converged=...' as written into estimate headers."""
        return (
            f"mu={self.mu!r} sigma={self.sigma!r} maxres={self.max_residual!r} "
            f"converged={str(self.converged).lower()}"
        )


ScenarioName = Literal['fig2a', 'fig2b', 'fig2c', 'experiment', 'custom']

_FIG2A = {
    'bits': 8,
    'full_scale_low': -1.0,
    'full_scale_high': 1.0,
    'inl_lsb': 0.0,
    'stimulus': 'sine',
    'amplitude_lsb': 5.37,
    'periods': 35,
    'samples': 151,
    'initial_phase': 11 * math.pi / 2,
    'offset_lsb': 0.0,
    'noise_family': 'gaussian',
    'noise_mean_lsb': 0.0,
    'noise_sigma_lsb': 0.25,
    'records': 1000,
    'estimation': 'known-s',
    'bound_mode': 'none',
    'transitions': 'truth',
}

NAMED_SCENARIOS: dict[str, dict[str, object]] = {
    'fig2a': _FIG2A,
    'fig2b': {**_FIG2A, 'estimation': 'sinefit-s', 'bound_mode': 'truth'},
    'fig2c': {**_FIG2A, 'estimation': 'sinefit-s', 'bound_mode': 'truth', 'noise_sigma_lsb': 0.18},
    'experiment': {
        'bits': 12,
        'full_scale_low': -10.0,
        'full_scale_high': 10.0,
        'inl_lsb': 0.25,
        'stimulus': 'swept_dc',
        'sweep_low_lsb': -4.0,
        'sweep_high_lsb': 4.0,
        'sweep_step': 2.45e-4,
        'noise_family': 'gaussian',
        'noise_mean_lsb': -0.0214,
        'noise_sigma_lsb': 0.1867,
        'records': 250_000,
        'estimation': 'known-s',
        'bound_mode': 'none',
        'transitions': 'servoloop',
        'k_window': 8,
        'servo_samples': 100_000,
    },
}

_REQUIRED = ('bits', 'full_scale_low', 'full_scale_high', 'stimulus', 'noise_sigma_lsb', 'records')
_REQUIRED_SINE = ('amplitude_lsb', 'periods', 'samples')
_REQUIRED_SWEEP = ('sweep_low_lsb', 'sweep_high_lsb', 'sweep_step')


class ScenarioConfig(BaseModel):
    """Everything one end-to-end run needs.

    Amplitudes, noise location/scale, INL bound and sweep ends are given in units
    of the nominal quantization step (suffix '_lsb'); sweep_step, tolerance and
    delta_eps are volts. Named scenarios fill every field they define that the
    caller left unset; 'custom' needs the quantizer, stimulus, noise scale and
    record count spelled out.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    scenario: ScenarioName = 'custom'

    bits: Optional[int] = Field(default=None, ge=1, le=24)
    full_scale_low: Optional[float] = None
    full_scale_high: Optional[float] = None
    inl_lsb: float = Field(default=0.0, ge=0)

    stimulus: Optional[Literal['sine', 'swept_dc']] = None
    amplitude_lsb: Optional[float] = Field(default=None, ge=0)
    periods: Optional[int] = Field(default=None, gt=0)
    samples: Optional[int] = Field(default=None, ge=3)
    initial_phase: float = 0.0
    offset_lsb: float = 0.0
    sweep_low_lsb: Optional[float] = None
    sweep_high_lsb: Optional[float] = None
    sweep_step: Optional[float] = Field(default=None, gt=0)

    noise_family: Literal['gaussian', 'uniform', 'laplace'] = 'gaussian'
    noise_mean_lsb: float = 0.0
    noise_sigma_lsb: Optional[float] = Field(default=None, gt=0)
    records: Optional[int] = Field(default=None, ge=1)

    tolerance: Optional[float] = Field(default=None, ge=0)
    k_window: Optional[int] = Field(default=None, ge=0)
    estimation: Literal['known-s', 'sinefit-s'] = 'known-s'
    bound_mode: Literal['none', 'truth', 'user'] = 'none'
    delta_eps: Optional[float] = Field(default=None, ge=0)
    transitions: Literal['truth', 'servoloop'] = 'truth'

    servo_samples: int = Field(default=10_000, ge=1)
    servo_initial_step_lsb: float = Field(default=0.5, gt=0)
    servo_decay: float = Field(default=0.5, gt=0, lt=1)
    servo_max_iterations: int = Field(default=200, ge=1)
    servo_tolerance_lsb: float = Field(default=1e-3, gt=0)

    monotone: bool = False
    weights: Literal['none', 'inverse-variance'] = 'none'
    pdf_window: int = Field(default=8, ge=1)

    seed: int = Field(default=0, ge=0)
    replicate: int = Field(default=0, ge=0)
    out_dir: Path = Path('out')

    @model_validator(mode='before')
    @classmethod
    def _expand_named(cls, data):
        if not isinstance(data, dict):
            return data
        name = data.get('scenario', 'custom')
        preset = NAMED_SCENARIOS.get(name)
        if preset is None:
            return data
        merged = dict(preset)
        merged.update({key: value for key, value in data.items() if value is not None})
        return merged

    @model_validator(mode='after')
    def _check_complete(self) -> 'ScenarioConfig':
        missing = [name for name in _REQUIRED if getattr(self, name) is None]
        if self.stimulus == 'sine':
            missing += [name for name in _REQUIRED_SINE if getattr(self, name) is None]
        elif self.stimulus == 'swept_dc':
            missing += [name for name in _REQUIRED_SWEEP if getattr(self, name) is None]
        if missing:
            raise ValueError(f"scenario '{self.scenario}' is missing: {', '.join(missing)}")
        if self.full_scale_low >= self.full_scale_high:
            raise ValueError("full_scale_low must be below full_scale_high")
        if self.estimation == 'sinefit-s' and self.stimulus != 'sine':
            raise ValueError("sinefit-s estimation needs a sine stimulus")
        if self.bound_mode == 'user' and self.delta_eps is None:
            raise ValueError("bound_mode=user needs delta_eps")
        return self

    @property
    def lsb(self) -> float:
        """Nominal quantization step of the configured quantizer, volts."""
        return (self.full_scale_high - self.full_scale_low) / 2 ** self.bits

    @classmethod
    def named(cls, name: str, **overrides) -> 'ScenarioConfig':
        """
        Expand a named scenario.

        Args:
            name (str): One of fig2a, fig2b, fig2c, experiment.
            **overrides: Fields to set explicitly (seed, out_dir, records...).

        Returns:
            ScenarioConfig: The validated configuration.
        """
        if name not in NAMED_SCENARIOS:
            raise ConfigurationError(f"unknown scenario '{name}', expected one of {sorted(NAMED_SCENARIOS)}")
        return cls(scenario=name, **overrides)

    @classmethod
    def from_file(cls, path: PathLike, **overrides) -> 'ScenarioConfig':
        """
        Load a key=value configuration file.

        Blank values are ignored; explicit overrides (from the command line) win.

        Args:
            path (PathLike): Config file.
            **overrides: Fields that take precedence over the file.

        Returns:
            ScenarioConfig: The validated configuration.
        """
        if not Path(path).is_file():
            raise ConfigurationError(f"config file not found: {path}")
        values = {key: value for key, value in dotenv_values(path).items() if value not in (None, '')}
        values.update({key: value for key, value in overrides.items() if value is not None})
        logger.info("Loaded %d settings from %s", len(values), path)
        return cls(**values)
