"""
quantnoise - Estimate the CDF and PDF of the noise at the input of a quantizer from quantized records.
"""

from .cdf_estimator import (
    CdfEstimate,
    CodeRecords,
    ErrorBounds,
    bound_curves,
    estimate_cdf,
    interpolate_cdf,
    pdf_from_cdf,
    theoretical_variance,
)
from .distribution_fit import fit_gaussian_cdf
from .exceptions import (
    CalibrationError,
    ConfigurationError,
    EstimationError,
    FitError,
    NonConvergenceError,
    PartitionError,
    QuantNoiseError,
    StageError,
)
from .models import (
    GaussianCdfFit,
    NoiseModel,
    ScenarioConfig,
    ServoloopConfig,
    SineStimulus,
    StimulusPlan,
    SweptDcStimulus,
)
from .partition import PartitionTable, build_partition
from .quantizer import QuantizerModel, make_perturbed, make_uniform, quantize
from .scenario import run_replications, run_scenario
from .servoloop import CalibrationResult, Device, SimulatedDevice, calibrate_all, servoloop
from .signal_noise import acquire, render_sequence, synthesize
from .sine_fit import SineFitResult, design_matrix, fit_records

__version__ = "0.1.0"
__all__ = [
    "QuantizerModel",
    "make_uniform",
    "make_perturbed",
    "quantize",
    "SineStimulus",
    "SweptDcStimulus",
    "NoiseModel",
    "StimulusPlan",
    "render_sequence",
    "synthesize",
    "acquire",
    "PartitionTable",
    "build_partition",
    "CodeRecords",
    "CdfEstimate",
    "ErrorBounds",
    "estimate_cdf",
    "theoretical_variance",
    "interpolate_cdf",
    "pdf_from_cdf",
    "bound_curves",
    "SineFitResult",
    "design_matrix",
    "fit_records",
    "GaussianCdfFit",
    "fit_gaussian_cdf",
    "ServoloopConfig",
    "CalibrationResult",
    "Device",
    "SimulatedDevice",
    "servoloop",
    "calibrate_all",
    "ScenarioConfig",
    "run_scenario",
    "run_replications",
    "QuantNoiseError",
    "ConfigurationError",
    "PartitionError",
    "EstimationError",
    "FitError",
    "CalibrationError",
    "StageError",
    "NonConvergenceError",
]
