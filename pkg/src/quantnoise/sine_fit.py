from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy.linalg import solve_triangular

from .cdf_estimator import CodeRecords
from .exceptions import FitError
from .quantizer import QuantizerModel
from .signal_noise import phase_angles
from .utils import PathLike, configure_logger, write_frame

logger = configure_logger(__name__)

RANK_TOLERANCE = 1e-10


class SineFitResult(BaseModel):
    """Three-parameter sine fit of R records at a known frequency.

    theta holds one column (theta_1, theta_2, theta_3) per record, the
    coefficients of sin, cos and the constant. amplitude and phase come from
    the record-averaged coefficients.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    theta: np.ndarray
    theta_bar: np.ndarray
    amplitude: float
    phase: float
    offset: float
    periods: int
    sequence: np.ndarray

    def summary_line(self) -> str:
        return f"A_hat={self.amplitude!r} phi0_hat={self.phase!r} offset_hat={self.offset!r}"


def design_matrix(periods: int, samples: int) -> np.ndarray:
    """
    Rows [sin(2 pi lambda n / N), cos(2 pi lambda n / N), 1] for n = 0..N-1.

    Args:
        periods (int): lambda.
        samples (int): N, at least 3.

    Returns:
        np.ndarray: N x 3 matrix.
    """
    if samples < 3:
        raise FitError(f"a three-parameter sine fit needs N >= 3, got {samples}")
    angles = phase_angles(periods, samples)
    return np.column_stack((np.sin(angles), np.cos(angles), np.ones(samples)))


def reconstruct(amplitude: float, phase: float, offset: float, periods: int, samples: int) -> np.ndarray:
    """s_n = A sin(2 pi lambda n / N + phi0) + C."""
    return amplitude * np.sin(phase_angles(periods, samples) + phase) + offset


def codes_to_voltages(records: CodeRecords, quantizer: QuantizerModel) -> np.ndarray:
    """
    Map codes to bin midpoints; saturated codes take their inner transition level.

    Args:
        records (CodeRecords): Codes to convert.
        quantizer (QuantizerModel): Quantizer with the same K.

    Returns:
        np.ndarray: N x R voltages.
    """
    if quantizer.bins != records.bins:
        raise FitError(f"records have K={records.bins}, quantizer has K={quantizer.bins}")
    return quantizer.bin_midpoints()[records.codes - 1]


def fit_records(
    data: Union[np.ndarray, CodeRecords],
    periods: int,
    quantizer: Optional[QuantizerModel] = None,
) -> SineFitResult:
    """
    Least-squares sine fit of every record, then amplitude and phase of the average.

    Each record Y_r is solved against the design matrix through its QR
    factorization. The phase is the four-quadrant angle atan2(theta_2, theta_1),
    consistent with s_n = A sin(. + phi0) = A cos(phi0) sin(.) + A sin(phi0) cos(.).

    Args:
        data (np.ndarray | CodeRecords): N x R voltages, or codes to map through quantizer.
        periods (int): Known number of periods lambda in a record.
        quantizer (QuantizerModel, optional): Required when data are codes.

    Returns:
        SineFitResult: Per-record and averaged parameters plus the reconstructed s-hat.

    Raises:
        FitError: N < 3, lambda a multiple of N, or codes without a quantizer.
    """
    if isinstance(data, CodeRecords):
        if quantizer is None:
            raise FitError("codes need a quantizer to be mapped to voltages")
        Y = codes_to_voltages(data, quantizer)
    else:
        Y = np.asarray(data, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
    samples = Y.shape[0]
    if periods % samples == 0:
        logger.error("periods=%d is a multiple of N=%d; the sine columns vanish", periods, samples)
        raise FitError(f"design matrix is rank deficient for periods={periods}, N={samples}")

    H = design_matrix(periods, samples)
    Q, R = np.linalg.qr(H)
    diagonal = np.abs(np.diag(R))
    if diagonal.min() <= RANK_TOLERANCE * diagonal.max():
        raise FitError(f"design matrix is rank deficient for periods={periods}, N={samples}")
    theta = solve_triangular(R, Q.T @ Y)

    theta_bar = theta.sum(axis=1) / theta.shape[1]
    amplitude = float(np.hypot(theta_bar[0], theta_bar[1]))
    phase = float(np.arctan2(theta_bar[1], theta_bar[0]))
    if phase == -np.pi:
        phase = float(np.pi)
    offset = float(theta_bar[2])
    logger.info("Sine fit over %d records: A=%g phi0=%g C=%g", theta.shape[1], amplitude, phase, offset)
    return SineFitResult(
        theta=theta,
        theta_bar=theta_bar,
        amplitude=amplitude,
        phase=phase,
        offset=offset,
        periods=periods,
        sequence=reconstruct(amplitude, phase, offset, periods, samples),
    )


def write_theta_csv(result: SineFitResult, path: PathLike) -> Path:
    """Per-record coefficients, columns r, th1, th2, th3, with the summary in the header."""
    df = pd.DataFrame({
        'r': np.arange(result.theta.shape[1]),
        'th1': result.theta[0],
        'th2': result.theta[1],
        'th3': result.theta[2],
    })
    return write_frame(df, path, sections={'sinefit': result.summary_line()})
