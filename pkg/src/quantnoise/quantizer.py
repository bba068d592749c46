from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import ConfigurationError
from .utils import PathLike, array_fingerprint, configure_logger

logger = configure_logger(__name__)

FILE_MAGIC = 'quantnoise-transitions v1'
MAX_RESAMPLE_ROUNDS = 100


class QuantizerModel:
    """A memoryless quantizer defined by its ordered transition levels.

    Code k (1..K) is output when the input lies in [T_{k-1}, T_k). Inputs below
    T_0 saturate to code 1 and inputs at or above T_K saturate to code K, so the
    model is a total function of the real input. Codes are bare ordinals and
    never carry a voltage.

    Instances are immutable; the transitions array is read-only.

    Args:
        transitions (array-like): Strictly increasing levels T_0 < ... < T_K, volts.

    Raises:
        ConfigurationError: Fewer than three levels, non-finite or non-increasing values.

    Example:
        >>> q = QuantizerModel([0.0, 1.0, 2.0])
        >>> q.quantize(0.5), q.quantize(2.7)
        (1, 2)
    """

    def __init__(self, transitions):
        levels = np.array(transitions, dtype=float)
        if levels.ndim != 1 or levels.size < 3:
            logger.error("Quantizer needs at least 3 transition levels, got shape %s", levels.shape)
            raise ConfigurationError("a quantizer needs at least two bins (three transition levels)")
        if not np.all(np.isfinite(levels)):
            raise ConfigurationError("transition levels must be finite")
        if not np.all(np.diff(levels) > 0):
            bad = int(np.argmin(np.diff(levels))) + 1
            logger.error("Transition levels not strictly increasing at index %d", bad)
            raise ConfigurationError(f"transition levels must be strictly increasing (index {bad})")
        levels.setflags(write=False)
        self.__transitions = levels
        self.__fingerprint = array_fingerprint(levels)

    @property
    def transitions(self) -> np.ndarray:
        """Read-only array T_0..T_K."""
        return self.__transitions

    @property
    def bins(self) -> int:
        """Number of codes K."""
        return self.__transitions.size - 1

    @property
    def step(self) -> float:
        """Mean quantization step (T_K - T_0) / K; the exact step of a uniform quantizer."""
        return float((self.__transitions[-1] - self.__transitions[0]) / self.bins)

    @property
    def fingerprint(self) -> str:
        """Hash of the transition levels."""
        return self.__fingerprint

    @property
    def code_dtype(self) -> np.dtype:
        """Smallest unsigned integer type able to hold every code."""
        return np.dtype(np.uint16) if self.bins <= np.iinfo(np.uint16).max else np.dtype(np.uint32)

    def quantize(self, x):
        """
        Map inputs to code indices.

        Args:
            x (float or array-like): Input voltages.

        Returns:
            int or np.ndarray: Codes in 1..K, same shape as x.
        """
        codes = np.searchsorted(self.__transitions, x, side='right')
        codes = np.clip(codes, 1, self.bins)
        if np.ndim(codes) == 0:
            return int(codes)
        return codes

    def bin_midpoints(self) -> np.ndarray:
        """
        Representative voltage for every code, index 0 holding code 1.

        Interior codes map to (T_{k-1} + T_k) / 2. The saturated codes 1 and K
        have unbounded bins and map to their finite inner edge, T_1 and T_{K-1}.

        Returns:
            np.ndarray: K voltages.
        """
        t = self.__transitions
        mids = (t[:-1] + t[1:]) / 2.0
        mids[0] = t[1]
        mids[-1] = t[-2]
        return mids

    def with_levels(self, updates: Mapping[int, float]) -> 'QuantizerModel':
        """
        Return a copy with some transition levels replaced.

        Args:
            updates (Mapping[int, float]): Transition index k -> new level T_k.

        Returns:
            QuantizerModel: The updated model (validated again).
        """
        levels = self.__transitions.copy()
        for k, value in updates.items():
            if not 0 <= k <= self.bins:
                raise ConfigurationError(f"transition index {k} outside 0..{self.bins}")
            levels[k] = value
        return QuantizerModel(levels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizerModel):
            return NotImplemented
        return np.array_equal(self.__transitions, other.transitions)

    def __hash__(self) -> int:
        return hash(self.__fingerprint)

    def __repr__(self) -> str:
        t = self.__transitions
        return f"QuantizerModel(K={self.bins}, T_0={t[0]!r}, T_K={t[-1]!r})"


def make_uniform(bits: int, full_scale_low: float, full_scale_high: float) -> QuantizerModel:
    """
    Build an ideal uniform quantizer with 2**bits codes.

    Args:
        bits (int): Resolution, at least 1.
        full_scale_low (float): T_0, volts.
        full_scale_high (float): T_K, volts.

    Returns:
        QuantizerModel: Transitions equally spaced by (high - low) / 2**bits.

    Raises:
        ConfigurationError: bits < 1 or an empty range.
    """
    if int(bits) != bits or bits < 1:
        raise ConfigurationError(f"bits must be a positive integer, got {bits}")
    if not full_scale_low < full_scale_high:
        raise ConfigurationError(
            f"full scale low ({full_scale_low}) must be below high ({full_scale_high})"
        )
    bins = 2 ** int(bits)
    levels = np.linspace(full_scale_low, full_scale_high, bins + 1)
    logger.debug("Uniform %d-bit quantizer over [%g, %g]", bits, full_scale_low, full_scale_high)
    return QuantizerModel(levels)


def make_perturbed(base: QuantizerModel, inl_bound: float, seed: int) -> QuantizerModel:
    """
    Displace every interior transition by a seeded offset uniform in [-inl_bound, inl_bound].

    Offsets that would break monotonicity are redrawn, a bounded number of times.

    Args:
        base (QuantizerModel): Nominal quantizer.
        inl_bound (float): Maximum displacement, volts.
        seed (int): Seed of the offsets.

    Returns:
        QuantizerModel: The perturbed quantizer; equal to base when inl_bound is 0.

    Raises:
        ConfigurationError: Negative bound, or a bound of half the narrowest step or more.
    """
    if inl_bound < 0:
        raise ConfigurationError(f"inl_bound must be non-negative, got {inl_bound}")
    nominal = base.transitions
    narrowest = float(np.min(np.diff(nominal)))
    if inl_bound >= narrowest / 2:
        logger.error("INL bound %g is not below half the narrowest step %g", inl_bound, narrowest)
        raise ConfigurationError(
            f"inl_bound {inl_bound} must be below half the narrowest step ({narrowest / 2})"
        )
    if inl_bound == 0:
        return QuantizerModel(nominal)

    rng = np.random.default_rng(seed)
    interior = slice(1, base.bins)
    offsets = np.zeros_like(nominal)
    offsets[interior] = rng.uniform(-inl_bound, inl_bound, base.bins - 1)
    levels = nominal + offsets

    for _ in range(MAX_RESAMPLE_ROUNDS):
        steps = np.diff(levels)
        if np.all(steps > 0):
            return QuantizerModel(levels)
        # redraw both ends of every collapsed step, endpoints stay fixed
        bad = np.zeros(nominal.size, dtype=bool)
        bad[:-1] |= steps <= 0
        bad[1:] |= steps <= 0
        bad[0] = bad[-1] = False
        levels[bad] = nominal[bad] + rng.uniform(-inl_bound, inl_bound, int(bad.sum()))

    raise ConfigurationError("could not draw a monotone perturbation; reduce inl_bound")


def quantize(q: QuantizerModel, x):
    """
    Map inputs to code indices with saturation; see QuantizerModel.quantize.

    Args:
        q (QuantizerModel): The quantizer.
        x (float or array-like): Input voltages.

    Returns:
        int or np.ndarray: Codes in 1..K.
    """
    return q.quantize(x)


def write_transitions(q: QuantizerModel, path: PathLike) -> Path:
    """
    Write the transitions file: a header line then one level per line.

    Args:
        q (QuantizerModel): Quantizer to save.
        path (PathLike): Destination.

    Returns:
        Path: The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {FILE_MAGIC} K={q.bins}"]
    lines.extend(repr(float(level)) for level in q.transitions)
    path.write_text('\n'.join(lines) + '\n')
    logger.info("Wrote %d transition levels to %s", q.bins + 1, path)
    return path


def read_transitions(path: PathLike) -> QuantizerModel:
    """
    Read a transitions file written by write_transitions.

    Args:
        path (PathLike): Source file.

    Returns:
        QuantizerModel: The quantizer.

    Raises:
        ConfigurationError: Missing header or a level count that disagrees with K.
    """
    lines = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or not lines[0].startswith(f"# {FILE_MAGIC}"):
        raise ConfigurationError(f"{path} is not a '{FILE_MAGIC}' file")
    try:
        bins = int(lines[0].rsplit('K=', 1)[1])
        levels = [float(line) for line in lines[1:] if not line.startswith('#')]
    except (IndexError, ValueError) as e:
        raise ConfigurationError(f"malformed transitions file {path}: {e}") from e
    if len(levels) != bins + 1:
        raise ConfigurationError(f"{path} declares K={bins} but holds {len(levels)} levels")
    return QuantizerModel(levels)


