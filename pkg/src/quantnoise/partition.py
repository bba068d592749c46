from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .exceptions import PartitionError
from .quantizer import QuantizerModel
from .utils import PathLike, array_fingerprint, configure_logger, write_frame

logger = configure_logger(__name__)

DEFAULT_RELATIVE_TOLERANCE = 1e-9


class PartitionTable:
    """Groups S_j of (n, k) pairs sharing one difference x_j = T_k - s_n.

    Built with build_partition. Groups are ordered by increasing abscissa;
    the member arrays are sorted by group, so group j occupies
    member_n[starts[j]:starts[j] + sizes[j]].

    Only k in k_range (a sub-range of 1..K-1) is used: the indicator
    [y <= K] is always true under saturation, so T_K never carries
    information about the noise.
    """

    def __init__(
        self,
        abscissas: np.ndarray,
        sizes: np.ndarray,
        member_n: np.ndarray,
        member_k: np.ndarray,
        tolerance: float,
        k_range: tuple[int, int],
        samples: int,
        bins: int,
        quantizer_id: str,
        stimulus_id: str,
    ):
        self.__x = abscissas
        self.__sizes = sizes
        self.__member_n = member_n
        self.__member_k = member_k
        self.__starts = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
        for array in (self.__x, self.__sizes, self.__member_n, self.__member_k, self.__starts):
            array.setflags(write=False)
        self.tolerance = tolerance
        self.k_range = k_range
        self.samples = samples
        self.bins = bins
        self.quantizer_id = quantizer_id
        self.stimulus_id = stimulus_id

    @property
    def x(self) -> np.ndarray:
        """Representative abscissas x_j, strictly increasing."""
        return self.__x

    @property
    def sizes(self) -> np.ndarray:
        """Cardinalities L_j."""
        return self.__sizes

    @property
    def member_n(self) -> np.ndarray:
        return self.__member_n

    @property
    def member_k(self) -> np.ndarray:
        return self.__member_k

    @property
    def starts(self) -> np.ndarray:
        """Offset of each group in the member arrays."""
        return self.__starts

    def __len__(self) -> int:
        return self.__x.size

    @property
    def total_pairs(self) -> int:
        """Number of (n, k) pairs covered, N times the number of usable transitions."""
        return int(self.__member_n.size)

    def members(self, j: int) -> list[tuple[int, int]]:
        """(n, k) pairs of group j."""
        lo = int(self.__starts[j])
        hi = lo + int(self.__sizes[j])
        return list(zip(self.__member_n[lo:hi].tolist(), self.__member_k[lo:hi].tolist()))

    def __repr__(self) -> str:
        return (
            f"PartitionTable(L={len(self)}, pairs={self.total_pairs}, "
            f"k_range={self.k_range}, tolerance={self.tolerance!r})"
        )


def default_tolerance(q: QuantizerModel) -> float:
    """Grouping tolerance for exactly known inputs: the step times 1e-9."""
    return q.step * DEFAULT_RELATIVE_TOLERANCE


def usable_k_range(q: QuantizerModel, k_range: Optional[tuple[int, int]] = None) -> tuple[int, int]:
    """Validate a transition window, defaulting to 1..K-1."""
    if k_range is None:
        return 1, q.bins - 1
    lo, hi = int(k_range[0]), int(k_range[1])
    if not 1 <= lo <= hi <= q.bins - 1:
        raise PartitionError(f"k_range {k_range} must lie within 1..{q.bins - 1}")
    return lo, hi


def build_partition(
    q: QuantizerModel,
    s,
    tolerance: Optional[float] = None,
    k_range: Optional[tuple[int, int]] = None,
) -> PartitionTable:
    """
    Group the differences T_k - s_n by single linkage within a tolerance.

    Sorted differences closer than the tolerance to their neighbour join its
    group; the representative is the mean of the group's differences. Every
    member must stay within the tolerance of its representative, so a long
    chain of near-equal values is rejected instead of silently merged.

    Args:
        q (QuantizerModel): Transition levels (true or estimated).
        s (array-like): Stimulus sequence s_n (true or estimated).
        tolerance (float, optional): Grouping tolerance, volts. Defaults to step * 1e-9.
        k_range (tuple[int, int], optional): Inclusive transition window within 1..K-1.

    Returns:
        PartitionTable: The groups, sorted by abscissa.

    Raises:
        PartitionError: Empty stimulus, negative tolerance, bad window or a chained group.

    Example:
        >>> part = build_partition(QuantizerModel([-1, 0, 0.5, 1, 2]), [0.0, 0.5], 0.0)
        >>> part.x.tolist(), part.sizes.tolist()
        ([-0.5, 0.0, 0.5, 1.0], [1, 2, 2, 1])
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise PartitionError("stimulus sequence must be a non-empty 1-D array")
    if not np.all(np.isfinite(s)):
        raise PartitionError("stimulus sequence must be finite")
    if tolerance is None:
        tolerance = default_tolerance(q)
    if tolerance < 0:
        raise PartitionError(f"tolerance must be non-negative, got {tolerance}")
    lo, hi = usable_k_range(q, k_range)

    ks = np.arange(lo, hi + 1)
    diffs = (q.transitions[ks][None, :] - s[:, None]).ravel()
    pair_n = np.repeat(np.arange(s.size), ks.size)
    pair_k = np.tile(ks, s.size)

    order = np.argsort(diffs, kind='stable')
    ordered = diffs[order]
    breaks = np.diff(ordered) > tolerance
    starts = np.flatnonzero(np.concatenate(([True], breaks)))
    sizes = np.diff(np.append(starts, ordered.size))
    group = np.repeat(np.arange(starts.size), sizes)

    # mean computed relative to the group minimum so identical values stay exact
    floor = ordered[starts]
    offsets = ordered - floor[group]
    abscissas = floor + np.add.reduceat(offsets, starts) / sizes

    deviation = np.abs(ordered - abscissas[group])
    worst = int(np.argmax(deviation))
    if deviation[worst] > tolerance:
        j = int(group[worst])
        logger.error(
            "Group %d spans %g volts with tolerance %g (%d members)",
            j, ordered[starts[j] + sizes[j] - 1] - floor[j], tolerance, sizes[j],
        )
        raise PartitionError(
            f"single-linkage chain in group {j} strays {deviation[worst]:g} from its mean, "
            f"more than the tolerance {tolerance:g}; reduce the tolerance"
        )

    part = PartitionTable(
        abscissas=abscissas,
        sizes=sizes.astype(np.int64),
        member_n=pair_n[order],
        member_k=pair_k[order],
        tolerance=float(tolerance),
        k_range=(lo, hi),
        samples=s.size,
        bins=q.bins,
        quantizer_id=q.fingerprint,
        stimulus_id=array_fingerprint(s),
    )
    logger.info(
        "Partition: %d groups from %d pairs (k=%d..%d, tolerance=%g)",
        len(part), part.total_pairs, lo, hi, tolerance,
    )
    return part


def write_partition_csv(part: PartitionTable, path: PathLike, members: bool = False) -> Path:
    """
    Export the partition, columns j, x_j, L_j.

    With members=True the table is in long form with one row per (n, k)
    pair, adding columns n and k.

    Args:
        part (PartitionTable): Partition to export.
        path (PathLike): Destination file.
        members (bool): Include the member pairs.

    Returns:
        Path: The written path.
    """
    comments = {'tau': part.tolerance, 'k_first': part.k_range[0], 'k_last': part.k_range[1]}
    if members:
        group = np.repeat(np.arange(len(part)), part.sizes)
        df = pd.DataFrame({
            'j': group,
            'x_j': part.x[group],
            'L_j': part.sizes[group],
            'n': part.member_n,
            'k': part.member_k,
        })
    else:
        df = pd.DataFrame({'j': np.arange(len(part)), 'x_j': part.x, 'L_j': part.sizes})
    return write_frame(df, path, comments)

