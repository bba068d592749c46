import math
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from .exceptions import CalibrationError
from .models import NoiseModel, ServoloopConfig
from .quantizer import QuantizerModel
from .utils import PathLike, configure_logger, write_frame

logger = configure_logger(__name__)

NOISELESS_MESSAGE = "noise required to dither the threshold"


class Device(ABC):
    """A black box that turns a DC level into a histogram of output codes.

    The servoloop only ever calls sample(); it never reads device internals.
    Back-ends that keep state between calls (real instruments) must leave
    concurrent_safe False so callers drive them one request at a time.
    """

    concurrent_safe: bool = False

    @property
    @abstractmethod
    def bins(self) -> int:
        """Number of output codes K."""

    @abstractmethod
    def sample(self, level: float, count: int) -> np.ndarray:
        """
        Apply a DC level and collect count output codes.

        Args:
            level (float): DC input, volts.
            count (int): Number of conversions.

        Returns:
            np.ndarray: Histogram of length K; index 0 counts code 1.
        """


class SimulatedDevice(Device):
    """
    Simulated converter: a quantizer behind additive noise.

    Args:
        quantizer (QuantizerModel): The device's true transition levels.
        noise (NoiseModel, optional): Input noise; None makes the device noiseless.
    """

    def __init__(self, quantizer: QuantizerModel, noise: Optional[NoiseModel] = None):
        self.__logger = configure_logger(__name__)
        self.__quantizer = quantizer
        self.__noise = noise
        self.__rng = np.random.default_rng(noise.seed if noise is not None else 0)
        self.__logger.info(
            "SimulatedDevice initialized with: K=%d, noise=%s",
            quantizer.bins, 'none' if noise is None else f"{noise.family}(scale={noise.scale:g})",
        )

    @property
    def bins(self) -> int:
        return self.__quantizer.bins

    def sample(self, level: float, count: int) -> np.ndarray:
        if count < 1:
            raise CalibrationError(f"sample count must be positive, got {count}")
        x = np.full(count, float(level))
        if self.__noise is not None:
            x += self.__noise.draw(self.__rng, count)
        codes = self.__quantizer.quantize(x)
        return np.bincount(codes, minlength=self.bins + 1)[1:]


class ServoloopEntry(BaseModel):
    """Outcome of one servoloop search for the transition between codes k and k+1."""

    model_config = ConfigDict(frozen=True)

    k: int
    level: float
    iterations: int
    final_fraction: float
    converged: bool
    error: Optional[str] = None


class CalibrationResult(BaseModel):
    """Servoloop estimates for a set of codes plus the straight-line check."""

    model_config = ConfigDict(frozen=True)

    entries: tuple[ServoloopEntry, ...]
    gain: float
    offset: float
    max_deviation: float

    @property
    def converged(self) -> list[ServoloopEntry]:
        return [entry for entry in self.entries if entry.converged]

    def levels(self) -> dict[int, float]:
        """Converged estimates as k -> T-hat_k."""
        return {entry.k: entry.level for entry in self.converged}

    def to_quantizer(self, nominal: QuantizerModel) -> QuantizerModel:
        """
        Substitute the converged estimates into a nominal quantizer.

        Args:
            nominal (QuantizerModel): Levels used where no estimate exists.

        Returns:
            QuantizerModel: Validated monotone model.
        """
        levels = self.levels()
        if not levels:
            raise CalibrationError("no converged transition to substitute")
        return nominal.with_levels(levels)


def servoloop(device: Device, cfg: ServoloopConfig, k: int, start_level: float) -> ServoloopEntry:
    """
    Locate the DC level where half of the outputs are at or below code k.

    At every level v the device returns M codes; p is the fraction <= k. The
    level moves up by the current step when p > 1/2 and down otherwise, and
    the step is multiplied by cfg.decay at every reversal. The search stops
    when the step falls below cfg.tolerance. The fixed point is the level at
    which P(code <= k) = 1/2, i.e. T_k minus the median of the noise.

    Args:
        device (Device): DC -> code sampler.
        cfg (ServoloopConfig): Schedule and stopping rule.
        k (int): Lower code of the transition, 1..K-1 (threshold T_k).
        start_level (float): First DC level tried, volts.

    Returns:
        ServoloopEntry: Estimate, iteration count, last fraction and convergence flag.

    Raises:
        CalibrationError: k out of range, or a device that never dithers.
    """
    if not 1 <= k <= device.bins - 1:
        raise CalibrationError(f"code {k} has no upper transition; expected 1..{device.bins - 1}")
    level = float(start_level)
    step = cfg.initial_step
    previous = 0
    fraction = math.nan
    seen_zero = seen_one = seen_between = False
    stopped = False
    iterations = 0

    while iterations < cfg.max_iterations:
        iterations += 1
        histogram = device.sample(level, cfg.samples_per_step)
        fraction = float(histogram[:k].sum()) / cfg.samples_per_step
        if fraction == 0.0:
            seen_zero = True
        elif fraction == 1.0:
            seen_one = True
        else:
            seen_between = True
        direction = 1 if fraction > 0.5 else -1
        if previous and direction != previous:
            step *= cfg.decay
            if step < cfg.tolerance:
                stopped = True
                break
        previous = direction
        level += direction * step
        logger.debug("servoloop k=%d it=%d level=%.9g p=%.4f step=%.3g", k, iterations, level, fraction, step)

    if seen_zero and seen_one and not seen_between:
        logger.error("Code %d: outputs never straddled the threshold", k)
        raise CalibrationError(f"code {k}: {NOISELESS_MESSAGE}")
    converged = stopped and abs(fraction - 0.5) <= cfg.fraction_band
    if not converged:
        logger.warning("Code %d: servoloop unconverged after %d iterations (p=%.3f)", k, iterations, fraction)
    return ServoloopEntry(k=k, level=level, iterations=iterations, final_fraction=fraction, converged=converged)


def _line_fit(entries: Sequence[ServoloopEntry]) -> tuple[float, float, float]:
    good = [entry for entry in entries if entry.converged]
    if len(good) < 2:
        return math.nan, math.nan, math.nan
    k = np.array([entry.k for entry in good], dtype=float)
    level = np.array([entry.level for entry in good])
    A = np.column_stack((k, np.ones_like(k)))
    (gain, offset), *_ = np.linalg.lstsq(A, level, rcond=None)
    deviation = np.abs(level - (gain * k + offset))
    return float(gain), float(offset), float(deviation.max())


def calibrate_all(
    device: Device,
    cfg: ServoloopConfig,
    codes: Iterable[int],
    nominal: Optional[QuantizerModel] = None,
    start_levels: Optional[dict[int, float]] = None,
) -> CalibrationResult:
    """
    Run the servoloop for every code, then fit T-hat_k = gain * k + offset.

    Codes are calibrated one after the other. A failing code is recorded as
    unconverged with its error message; it never aborts the others.

    Args:
        device (Device): DC -> code sampler.
        cfg (ServoloopConfig): Servoloop schedule.
        codes (Iterable[int]): Lower codes k of the transitions to locate.
        nominal (QuantizerModel, optional): Start each search at the nominal T_k.
        start_levels (dict[int, float], optional): Explicit start levels, take precedence.

    Returns:
        CalibrationResult: Per-code entries and the straight-line summary
            (NaN when fewer than two codes converged).
    """
    entries = []
    for k in codes:
        if start_levels and k in start_levels:
            start = start_levels[k]
        elif nominal is not None:
            start = float(nominal.transitions[k])
        else:
            raise CalibrationError(f"no start level for code {k}; pass nominal or start_levels")
        try:
            entries.append(servoloop(device, cfg, k, start))
        except CalibrationError as e:
            logger.warning("Calibration of code %d failed: %s", k, e)
            entries.append(ServoloopEntry(
                k=k, level=math.nan, iterations=0, final_fraction=math.nan, converged=False, error=str(e),
            ))

    gain, offset, max_deviation = _line_fit(entries)
    result = CalibrationResult(entries=tuple(entries), gain=gain, offset=offset, max_deviation=max_deviation)
    levels = [entry.level for entry in result.converged]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        logger.warning("Calibrated transition levels are not strictly increasing")
    logger.info(
        "Calibrated %d/%d codes: gain=%g offset=%g max deviation=%g",
        len(result.converged), len(entries), gain, offset, max_deviation,
    )
    return result


def write_calibration_csv(result: CalibrationResult, path: PathLike) -> Path:
    """Columns k, T_hat, iterations, converged; the line fit goes in the header."""
    df = pd.DataFrame({
        'k': [entry.k for entry in result.entries],
        'T_hat': [entry.level for entry in result.entries],
        'iterations': [entry.iterations for entry in result.entries],
        'converged': [entry.converged for entry in result.entries],
    })
    comments = {'gain': result.gain, 'offset': result.offset, 'max_deviation': result.max_deviation}
    return write_frame(df, path, comments)
