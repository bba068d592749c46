import hashlib
import logging
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values

PathLike = Union[str, Path]

FLOAT_FORMAT = '%.17g'


def configure_logger(name: str) -> logging.Logger:
    """
    Configure a logger with consistent formatting across all environments.

    Args:
        name (str): Name for the logger, typically __name__

    Returns:
        logging.Logger: Configured logger instance
    """
    logger = logging.getLogger(name)
    if logger.level == logging.NOTSET:
        logger.setLevel(logging.INFO)

    # Notebooks and pytest configure the root logger; let records propagate there
    if logging.getLogger().handlers:
        logger.propagate = True
        return logger

    if not logger.handlers:
        formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
        handler = logging.StreamHandler()
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def set_log_level(level: str) -> None:
    """
    Set the level of every logger under the quantnoise package.

    Args:
        level (str): Level name, e.g. 'INFO' or 'DEBUG'.
    """
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ValueError(f"Unknown log level: {level}")
    for name, candidate in logging.Logger.manager.loggerDict.items():
        if name.startswith('quantnoise') or name.startswith('src.quantnoise'):
            if isinstance(candidate, logging.Logger):
                candidate.setLevel(numeric)


def array_fingerprint(values: np.ndarray) -> str:
    """
    Stable short hash of a float array, used to tie records to the quantizer
    and stimulus they were produced with.

    Args:
        values (np.ndarray): Array to hash (converted to little-endian float64).

    Returns:
        str: 16 hex characters.
    """
    data = np.ascontiguousarray(values, dtype='<f8').tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


def write_frame(
    df: pd.DataFrame,
    path: PathLike,
    comments: Mapping[str, object] = None,
    sections: Mapping[str, str] = None,
) -> Path:
    """
    Write a DataFrame as CSV preceded by '#' comment lines.

    Plain comments become '# key=value'; each section becomes one
    '# name: k1=v1 k2=v2' line. Floats are written with 17 significant
    digits so they read back bit-exactly.

    Args:
        df (pd.DataFrame): Table to write.
        path (PathLike): Destination file.
        comments (Mapping[str, object], optional): Header comment entries.
        sections (Mapping[str, str], optional): Named one-line summaries.

    Returns:
        Path: The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as handle:
        for key, value in (comments or {}).items():
            handle.write(f"# {key}={format_value(value)}\n")
        for name, line in (sections or {}).items():
            handle.write(f"# {name}: {line}\n")
        df.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    return path


def read_frame(path: PathLike) -> tuple[pd.DataFrame, dict[str, str]]:
    """
    Read a CSV written by write_frame.

    Section entries come back under dotted keys, e.g. '# fit: mu=0.1' as 'fit.mu'.

    Args:
        path (PathLike): File to read.

    Returns:
        tuple[pd.DataFrame, dict[str, str]]: The table and the header comments.
    """
    comments = {}
    with open(path) as handle:
        for line in handle:
            if not line.startswith('#'):
                break
            body = line[1:].strip()
            head, colon, rest = body.partition(':')
            if colon and '=' not in head:
                for token in rest.split():
                    key, _, value = token.partition('=')
                    comments[f"{head.strip()}.{key}"] = value
            elif '=' in body:
                key, value = body.split('=', 1)
                comments[key.strip()] = value.strip()
    df = pd.read_csv(path, comment='#', float_precision='round_trip')
    return df, comments


def format_value(value: object) -> str:
    """Render a value for key=value files: floats with full precision, bools lowercase."""
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_summary(path: PathLike, entries: Mapping[str, object]) -> Path:
    """
    Write a machine-readable summary, one 'key=value' per line.

    Args:
        path (PathLike): Destination file.
        entries (Mapping[str, object]): Ordered summary entries.

    Returns:
        Path: The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(f"{key}={format_value(value)}\n" for key, value in entries.items()))
    return path


def read_summary(path: PathLike) -> dict[str, str]:
    """
    Read a key=value summary file.

    Args:
        path (PathLike): Summary file written by write_summary.

    Returns:
        dict[str, str]: Entries in file order.
    """
    return {key: value for key, value in dotenv_values(path).items() if value is not None}
