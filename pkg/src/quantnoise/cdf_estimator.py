from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import isotonic_regression

from .exceptions import EstimationError
from .models import GaussianCdfFit
from .partition import PartitionTable
from .quantizer import QuantizerModel
from .utils import PathLike, array_fingerprint, configure_logger, read_frame, write_frame

logger = configure_logger(__name__)


class CodeRecords:
    """N x R matrix of output codes y(n, r) with the identity of what produced them.

    The fingerprints tie the records to one quantizer description and one
    stimulus sequence; estimate_cdf refuses a partition built from anything
    else. The codes array is exposed read-only.

    Args:
        codes (array-like): Integer codes, shape (N, R), values in 1..bins.
        bins (int): Number of codes K of the quantizer.
        quantizer_id (str): Fingerprint of the quantizer description.
        stimulus_id (str): Fingerprint of the stimulus sequence.

    Raises:
        EstimationError: Wrong shape, non-integer dtype or codes outside 1..K.
    """

    def __init__(self, codes, bins: int, quantizer_id: str, stimulus_id: str):
        self.__logger = configure_logger(__name__)
        codes = np.asarray(codes)
        if codes.ndim != 2 or 0 in codes.shape:
            self.__logger.error("Code matrix has shape %s", codes.shape)
            raise EstimationError(f"codes must be a non-empty N x R matrix, got shape {codes.shape}")
        if not np.issubdtype(codes.dtype, np.integer):
            raise EstimationError(f"codes must be integers, got {codes.dtype}")
        low, high = int(codes.min()), int(codes.max())
        if low < 1 or high > bins:
            self.__logger.error("Codes span %d..%d, quantizer has %d codes", low, high, bins)
            raise EstimationError(f"codes must lie within 1..{bins}, found {low}..{high}")
        view = codes.view()
        view.setflags(write=False)
        self.__codes = view
        self.bins = int(bins)
        self.quantizer_id = quantizer_id
        self.stimulus_id = stimulus_id

    @classmethod
    def from_quantized(cls, codes, quantizer: QuantizerModel, s) -> 'CodeRecords':
        """Wrap codes produced by quantizer from inputs around stimulus s."""
        return cls(codes, quantizer.bins, quantizer.fingerprint, array_fingerprint(np.asarray(s, dtype=float)))

    @property
    def codes(self) -> np.ndarray:
        return self.__codes

    @property
    def samples(self) -> int:
        """N."""
        return self.__codes.shape[0]

    @property
    def records(self) -> int:
        """R."""
        return self.__codes.shape[1]

    def rebind(self, quantizer: QuantizerModel, s) -> 'CodeRecords':
        """
        Re-tag the same codes with estimated transition levels and stimulus.

        This is the explicit errors-in-variables step: the estimate will be
        computed against T-hat and s-hat instead of the values that generated
        the data.

        Args:
            quantizer (QuantizerModel): Estimated quantizer, same K.
            s (array-like): Estimated stimulus, same N.

        Returns:
            CodeRecords: Shares the codes array.
        """
        s = np.asarray(s, dtype=float)
        if quantizer.bins != self.bins:
            raise EstimationError(f"cannot rebind {self.bins}-code records to a {quantizer.bins}-code quantizer")
        if s.size != self.samples:
            raise EstimationError(f"cannot rebind {self.samples} samples to a stimulus of length {s.size}")
        self.__logger.info("Rebinding records to estimated transitions/stimulus")
        return CodeRecords(self.__codes, self.bins, quantizer.fingerprint, array_fingerprint(s))

    def cumulative_counts(self) -> np.ndarray:
        """
        Count, for every n and k, how many records gave y(n, r) <= k.

        Returns:
            np.ndarray: int64 array of shape (N, K); column k-1 holds code k.
        """
        counts = np.empty((self.samples, self.bins), dtype=np.int64)
        for n in range(self.samples):
            counts[n] = np.bincount(self.__codes[n], minlength=self.bins + 1)[1:].cumsum()
        return counts

    def __repr__(self) -> str:
        return f"CodeRecords(N={self.samples}, R={self.records}, K={self.bins})"


class CdfEstimate(BaseModel):
    """Sampled CDF estimate: one point (x_j, F_j, var_j) per partition group.

    F_j equals counts_j / (records * L_j) exactly, with counts_j the number of
    indicator hits summed over the group and the records.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x: np.ndarray
    F: np.ndarray
    var: np.ndarray
    sizes: np.ndarray
    counts: np.ndarray
    records: int = Field(ge=1)
    tolerance: float = Field(ge=0)
    k_range: tuple[int, int]
    fit: Optional[GaussianCdfFit] = None

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def degenerate(self) -> np.ndarray:
        """Points whose plug-in variance is zero (F-hat at 0 or 1)."""
        return (self.F == 0) | (self.F == 1)

    def with_fit(self, fit: GaussianCdfFit) -> 'CdfEstimate':
        """Copy with a parametric fit attached."""
        return self.model_copy(update={'fit': fit})

    def frame(self) -> pd.DataFrame:
        """Columns j, x_j, L_j, F_hat, var_hat."""
        return pd.DataFrame({
            'j': np.arange(len(self)),
            'x_j': self.x,
            'L_j': self.sizes,
            'F_hat': self.F,
            'var_hat': self.var,
        })


class ErrorBounds(BaseModel):
    """Curves F-hat(x - delta_eps) and F-hat(x + delta_eps) bracketing the estimate."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    delta_eps: float = Field(ge=0)
    x: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def frame(self) -> pd.DataFrame:
        """Columns x, lower, upper."""
        return pd.DataFrame({'x': self.x, 'lower': self.lower, 'upper': self.upper})


def theoretical_variance(F, records: int, sizes):
    """
    Variance of the estimator at one point, F(1 - F) / (R * L_j).

    Args:
        F (float or array-like): True (or plug-in) CDF value(s).
        records (int): R.
        sizes (int or array-like): L_j.

    Returns:
        float or np.ndarray: Variance, same shape as the broadcast inputs.
    """
    F = np.asarray(F, dtype=float)
    result = F * (1.0 - F) / (records * np.asarray(sizes, dtype=float))
    return float(result) if result.ndim == 0 else result


def estimate_cdf(records: CodeRecords, part: PartitionTable) -> CdfEstimate:
    """
    Estimate the noise CDF at every partition abscissa.

    F_j = (1 / (R L_j)) * sum over (n, k) in S_j and over r of [y(n, r) <= k].
    Only the code ordering enters: codes are compared as integers.

    Args:
        records (CodeRecords): Quantized records.
        part (PartitionTable): Partition built from the same quantizer and stimulus.

    Returns:
        CdfEstimate: One point per group, with the plug-in variance.

    Raises:
        EstimationError: Mismatched dimensions or fingerprints.
    """
    if records.bins != part.bins:
        raise EstimationError(f"records have K={records.bins}, partition has K={part.bins}")
    if records.samples != part.samples:
        raise EstimationError(f"records have N={records.samples}, partition has N={part.samples}")
    if records.quantizer_id != part.quantizer_id:
        logger.error("Quantizer fingerprint %s != %s", records.quantizer_id, part.quantizer_id)
        raise EstimationError(
            "records and partition come from different quantizer descriptions; "
            "rebind the records to use estimated transition levels"
        )
    if records.stimulus_id != part.stimulus_id:
        logger.error("Stimulus fingerprint %s != %s", records.stimulus_id, part.stimulus_id)
        raise EstimationError(
            "records and partition come from different stimulus sequences; "
            "rebind the records to use an estimated stimulus"
        )

    cumulative = records.cumulative_counts()
    hits = cumulative[part.member_n, part.member_k - 1]
    counts = np.add.reduceat(hits, part.starts)
    sizes = part.sizes
    F = counts / (records.records * sizes)
    var = theoretical_variance(F, records.records, sizes)

    est = CdfEstimate(
        x=part.x,
        F=F,
        var=np.atleast_1d(var),
        sizes=sizes,
        counts=counts,
        records=records.records,
        tolerance=part.tolerance,
        k_range=part.k_range,
    )
    degenerate = int(est.degenerate.sum())
    if degenerate:
        logger.warning("%d of %d points have a degenerate (zero) plug-in variance", degenerate, len(est))
    logger.info("Estimated CDF at %d points from %d records", len(est), records.records)
    return est


def isotonic(values, weights=None) -> np.ndarray:
    """
    Closest non-decreasing sequence in weighted least squares (pool adjacent violators).

    Args:
        values (array-like): Sequence to correct.
        weights (array-like, optional): Positive weights, e.g. the group sizes L_j.

    Returns:
        np.ndarray: Non-decreasing sequence.
    """
    values = np.asarray(values, dtype=float)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
    return isotonic_regression(values, weights=weights, increasing=True).x


def interpolate_cdf(est: CdfEstimate, x, monotone: bool = False):
    """
    Evaluate the estimate between its points by linear interpolation.

    Outside [x_1, x_L] the first and last values are extended as constants.

    Args:
        est (CdfEstimate): Sampled estimate.
        x (float or array-like): Abscissas, volts.
        monotone (bool): Apply the isotonic correction (weights L_j) first.

    Returns:
        float or np.ndarray: Interpolated CDF values.

    Raises:
        EstimationError: Fewer than two points.
    """
    if len(est) < 2:
        raise EstimationError("interpolation needs at least 2 points")
    F = isotonic(est.F, est.sizes) if monotone else est.F
    values = np.interp(x, est.x, F)
    return float(values) if np.ndim(values) == 0 else values


def pdf_from_cdf(
    est: CdfEstimate,
    method: Literal['central-difference', 'analytic'] = 'central-difference',
    window: int = 1,
    x=None,
    monotone: bool = False,
) -> pd.DataFrame:
    """
    Differentiate the estimated CDF.

    'central-difference' returns (F_{j+w} - F_{j-w}) / (x_{j+w} - x_{j-w}) at
    the interior points w..L-w-1. 'analytic' evaluates the density of the
    attached Gaussian fit at x (default: the estimate's abscissas).

    Args:
        est (CdfEstimate): Sampled estimate.
        method (str): 'central-difference' or 'analytic'.
        window (int): Half-width w of the difference stencil, in points.
        x (array-like, optional): Abscissas for the analytic density.
        monotone (bool): Apply the isotonic correction before differencing.

    Returns:
        pd.DataFrame: Columns x, density.

    Raises:
        EstimationError: Missing fit, too few points or a window too large.
    """
    if method == 'analytic':
        if est.fit is None:
            raise EstimationError("analytic density needs a fitted model; run fit_gaussian_cdf first")
        where = est.x if x is None else np.asarray(x, dtype=float)
        return pd.DataFrame({'x': where, 'density': est.fit.density(where)})
    if method != 'central-difference':
        raise EstimationError(f"unknown differentiation method '{method}'")

    points = len(est)
    if points < 3:
        raise EstimationError("numeric differentiation needs at least 3 points")
    if window < 1 or 2 * window >= points:
        raise EstimationError(f"window {window} too large for {points} points")
    F = isotonic(est.F, est.sizes) if monotone else est.F
    centre = slice(window, points - window)
    rise = F[2 * window:] - F[:points - 2 * window]
    run = est.x[2 * window:] - est.x[:points - 2 * window]
    return pd.DataFrame({'x': est.x[centre], 'density': rise / run})


def bound_curves(est: CdfEstimate, delta_eps: float, monotone: bool = False) -> ErrorBounds:
    """
    Shift the interpolated estimate by -/+ delta_eps at every abscissa.

    Args:
        est (CdfEstimate): Sampled estimate.
        delta_eps (float): Bound on the abscissa error, volts.
        monotone (bool): Interpolate the isotonic estimate instead, which keeps lower <= upper.

    Returns:
        ErrorBounds: lower = F(x_j - delta_eps), upper = F(x_j + delta_eps).
    """
    if delta_eps < 0:
        raise EstimationError(f"delta_eps must be non-negative, got {delta_eps}")
    lower = interpolate_cdf(est, est.x - delta_eps, monotone)
    upper = interpolate_cdf(est, est.x + delta_eps, monotone)
    return ErrorBounds(delta_eps=float(delta_eps), x=est.x, lower=lower, upper=upper)


def abscissa_bias(part: PartitionTable, q_true: QuantizerModel, s_true) -> float:
    """
    Largest abscissa error of a partition built from estimated T or s.

    Args:
        part (PartitionTable): Partition from estimated values.
        q_true (QuantizerModel): True transition levels.
        s_true (array-like): True stimulus.

    Returns:
        float: max over members of |x_j - (T_k - s_n)|, volts.
    """
    s_true = np.asarray(s_true, dtype=float)
    if s_true.size != part.samples or q_true.bins != part.bins:
        raise EstimationError("true quantizer/stimulus do not match the partition dimensions")
    group = np.repeat(np.arange(len(part)), part.sizes)
    truth = q_true.transitions[part.member_k] - s_true[part.member_n]
    return float(np.max(np.abs(part.x[group] - truth)))


def write_estimate_csv(est: CdfEstimate, path: PathLike) -> Path:
    """
    Write the estimate, columns j, x_j, L_j, F_hat, var_hat.

    The header carries R, tau, the transition window, the number of
    degenerate points and, when a fit is attached, a '# fit:' summary line.
    """
    comments = {
        'R': est.records,
        'tau': est.tolerance,
        'k_first': est.k_range[0],
        'k_last': est.k_range[1],
        'degenerate': int(est.degenerate.sum()),
    }
    sections = {'fit': est.fit.summary_line()} if est.fit is not None else None
    return write_frame(est.frame(), path, comments, sections)


def read_estimate_csv(path: PathLike) -> CdfEstimate:
    """
    Read an estimate written by write_estimate_csv; the fit summary is not restored.

    Raises:
        EstimationError: Missing columns or header entries.
    """
    df, comments = read_frame(path)
    missing = {'x_j', 'L_j', 'F_hat', 'var_hat'} - set(df.columns)
    if missing:
        raise EstimationError(f"{path} lacks columns {sorted(missing)}")
    try:
        records = int(comments['R'])
        tolerance = float(comments.get('tau', 0.0))
        k_range = (int(comments['k_first']), int(comments['k_last']))
    except (KeyError, ValueError) as e:
        raise EstimationError(f"{path} has an incomplete header: {e}") from e
    sizes = df['L_j'].to_numpy(dtype=np.int64)
    F = df['F_hat'].to_numpy(dtype=float)
    return CdfEstimate(
        x=df['x_j'].to_numpy(dtype=float),
        F=F,
        var=df['var_hat'].to_numpy(dtype=float),
        sizes=sizes,
        counts=np.rint(F * records * sizes).astype(np.int64),
        records=records,
        tolerance=tolerance,
        k_range=k_range,
    )


def write_bounds_csv(bounds: ErrorBounds, path: PathLike) -> Path:
    """Write bound curves, columns x, lower, upper."""
    return write_frame(bounds.frame(), path, {'delta_eps': bounds.delta_eps})


def write_codes_csv(records: CodeRecords, path: PathLike) -> Path:
    """
    Write records in long form, columns n, r, code, with the fingerprints in the header.
    """
    n, r = np.meshgrid(np.arange(records.samples), np.arange(records.records), indexing='ij')
    df = pd.DataFrame({'n': n.ravel(), 'r': r.ravel(), 'code': records.codes.ravel()})
    comments = {'K': records.bins, 'quantizer_id': records.quantizer_id, 'stimulus_id': records.stimulus_id}
    return write_frame(df, path, comments)


def read_codes_csv(path: PathLike) -> CodeRecords:
    """
    Read records written by write_codes_csv.

    Raises:
        EstimationError: Missing header entries or an incomplete (n, r) grid.
    """
    df, comments = read_frame(path)
    if not {'n', 'r', 'code'} <= set(df.columns) or 'K' not in comments:
        raise EstimationError(f"{path} is not a codes file (columns n, r, code and a K header)")
    n = df['n'].to_numpy(dtype=np.int64)
    r = df['r'].to_numpy(dtype=np.int64)
    samples, count = int(n.max()) + 1, int(r.max()) + 1
    if len(df) != samples * count:
        raise EstimationError(f"{path} holds {len(df)} rows, expected {samples} x {count}")
    codes = np.zeros((samples, count), dtype=np.int64)
    codes[n, r] = df['code'].to_numpy(dtype=np.int64)
    return CodeRecords(
        codes,
        int(comments['K']),
        comments.get('quantizer_id', ''),
        comments.get('stimulus_id', ''),
    )
