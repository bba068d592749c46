from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from .cdf_estimator import CodeRecords
from .exceptions import ConfigurationError
from .models import SineStimulus, StimulusPlan, SweptDcStimulus
from .quantizer import QuantizerModel
from .utils import PathLike, array_fingerprint, configure_logger, read_frame, write_frame

logger = configure_logger(__name__)

DEFAULT_CHUNK_RECORDS = 4096


def phase_angles(periods: int, samples: int) -> np.ndarray:
    """Angles 2*pi*lambda*n/N for n = 0..N-1."""
    n = np.arange(samples, dtype=float)
    return 2.0 * np.pi * periods * n / samples


def render_sequence(stimulus: Union[SineStimulus, SweptDcStimulus]) -> np.ndarray:
    """
    Render the deterministic stimulus s_n.

    Args:
        stimulus (SineStimulus | SweptDcStimulus): Stimulus description.

    Returns:
        np.ndarray: N voltages. A sweep is returned verbatim.
    """
    if isinstance(stimulus, SweptDcStimulus):
        return np.array(stimulus.levels, dtype=float)
    angles = phase_angles(stimulus.periods, stimulus.samples)
    return stimulus.amplitude * np.sin(angles + stimulus.initial_phase) + stimulus.offset


def record_generator(seed: int, record: int) -> np.random.Generator:
    """
    Independent generator for one record.

    Every record owns a Philox counter block keyed by the master seed, so a
    record's noise depends only on (seed, record) and never on which other
    records were generated, or in which order.
    """
    return np.random.Generator(np.random.Philox(key=seed, counter=record << 128))


def derive_seed(master: int, *keys: int) -> int:
    """
    Derive a child 64-bit seed from a master seed and a path of integer keys.

    Args:
        master (int): Master seed.
        *keys (int): Stage/replicate identifiers.

    Returns:
        int: Seed in [0, 2**64).
    """
    state = np.random.SeedSequence([master, *keys]).generate_state(1, np.uint64)
    return int(state[0])


def _chunks(records: int, size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + size, records)) for lo in range(0, records, size)]


def _run_chunks(work, chunks, workers: int) -> None:
    if workers <= 1 or len(chunks) == 1:
        for lo, hi in chunks:
            work(lo, hi)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # list() re-raises the first worker exception
        list(pool.map(lambda bounds: work(*bounds), chunks))


def _noisy_rows(plan: StimulusPlan, s: np.ndarray, lo: int, hi: int) -> np.ndarray:
    noise = plan.noise
    rows = np.empty((hi - lo, s.size))
    for i, r in enumerate(range(lo, hi)):
        rows[i] = s + noise.draw(record_generator(noise.seed, r), s.size)
    return rows


def synthesize(plan: StimulusPlan, workers: int = 1, chunk_records: int = DEFAULT_CHUNK_RECORDS) -> np.ndarray:
    """
    Draw the noisy input matrix x(n, r) = s_n + eta(n, r).

    Args:
        plan (StimulusPlan): Stimulus, noise and record count.
        workers (int): Threads used over record chunks; the result does not depend on it.
        chunk_records (int): Records per work unit.

    Returns:
        np.ndarray: N x R voltages.
    """
    s = render_sequence(plan.stimulus)
    by_record = np.empty((plan.records, s.size))

    def work(lo: int, hi: int) -> None:
        by_record[lo:hi] = _noisy_rows(plan, s, lo, hi)

    _run_chunks(work, _chunks(plan.records, chunk_records), workers)
    logger.debug("Synthesized %d x %d samples", s.size, plan.records)
    return by_record.T


def acquire(
    plan: StimulusPlan,
    quantizer: QuantizerModel,
    workers: int = 1,
    chunk_records: int = DEFAULT_CHUNK_RECORDS,
) -> CodeRecords:
    """
    Synthesize and quantize chunk by chunk, keeping only the codes.

    The codes equal quantize(synthesize(plan)) exactly, without holding the
    full voltage matrix in memory.

    Args:
        plan (StimulusPlan): Stimulus, noise and record count.
        quantizer (QuantizerModel): Quantizer applied to every sample.
        workers (int): Threads used over record chunks.
        chunk_records (int): Records per work unit.

    Returns:
        CodeRecords: N x R codes tagged with the quantizer and stimulus fingerprints.
    """
    if chunk_records < 1:
        raise ConfigurationError("chunk_records must be positive")
    s = render_sequence(plan.stimulus)
    by_record = np.empty((plan.records, s.size), dtype=quantizer.code_dtype)

    def work(lo: int, hi: int) -> None:
        by_record[lo:hi] = quantizer.quantize(_noisy_rows(plan, s, lo, hi))

    chunks = _chunks(plan.records, chunk_records)
    logger.info(
        "Acquiring %d records of %d samples (%d chunks, %d workers)",
        plan.records, s.size, len(chunks), workers,
    )
    _run_chunks(work, chunks, workers)
    return CodeRecords(by_record.T, quantizer.bins, quantizer.fingerprint, array_fingerprint(s))


def write_samples_csv(x: np.ndarray, path: PathLike) -> Path:
    """
    Export a sample matrix in long form, columns n, r, x.

    Args:
        x (np.ndarray): N x R voltages.
        path (PathLike): Destination file.

    Returns:
        Path: The written path.
    """
    samples, records = x.shape
    n, r = np.meshgrid(np.arange(samples), np.arange(records), indexing='ij')
    df = pd.DataFrame({'n': n.ravel(), 'r': r.ravel(), 'x': np.asarray(x).ravel()})
    return write_frame(df, path)


def write_stimulus_csv(s: np.ndarray, path: PathLike, comments: dict = None) -> Path:
    """Write a stimulus sequence, columns n, s."""
    s = np.asarray(s, dtype=float)
    df = pd.DataFrame({'n': np.arange(s.size), 's': s})
    return write_frame(df, path, comments)


def read_stimulus_csv(path: PathLike) -> np.ndarray:
    """
    Read a stimulus sequence written by write_stimulus_csv.

    Raises:
        ConfigurationError: Missing columns or rows out of order.
    """
    df, _ = read_frame(path)
    if not {'n', 's'} <= set(df.columns):
        raise ConfigurationError(f"{path} needs columns n, s")
    if not np.array_equal(df['n'].to_numpy(), np.arange(len(df))):
        raise ConfigurationError(f"{path}: n must run 0..N-1 in order")
    return df['s'].to_numpy(dtype=float)
