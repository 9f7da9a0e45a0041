"""
helpers.py – Shared utility functions for DotControl

This module provides reusable helpers including:
- Timing blocks of work into the log
- Hashing configs and files for provenance
- Writing DataFrames as CSV with '#'-prefixed provenance headers
- Writing JSON summaries that may contain numpy values
"""

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


@contextmanager
def log_timing(label: str):
    """Context manager to time a block of code and log the duration with the given label."""
    start = time.perf_counter()
    try:
        yield
    finally:
        elapsed = time.perf_counter() - start
        logger.info(f"[PROFILE] {label} took {elapsed:.3f} seconds.")


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path: str) -> str:
    """sha256 of a file's bytes, or an empty string when the file does not exist."""
    if not path or not os.path.exists(path):
        return ""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_csv(df: pd.DataFrame, path: str, provenance: dict | None = None) -> str:
    """
    Write df to path as CSV, preceded by one '# key: value' line per provenance entry.
    Returns the path written.
    """
    _ensure_parent(path)
    try:
        with open(path, "w", newline="") as f:
            for key, value in (provenance or {}).items():
                f.write(f"# {key}: {value}\n")
            df.to_csv(f, index=False)
    except OSError as e:
        logger.error(f"Could not write CSV '{path}': {e}")
        raise RuntimeError(f"Could not write {path}") from e
    logger.info(f"Wrote {len(df)} rows to '{path}'")
    return path


def read_csv(path: str) -> pd.DataFrame:
    """Read a CSV written by write_csv, skipping the provenance header."""
    return pd.read_csv(path, comment="#")


def read_provenance(path: str) -> dict:
    header = {}
    with open(path, "r") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(":")
            header[key.strip()] = value.strip()
    return header


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, complex):
        return {"re": value.real, "im": value.imag}
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(data: dict, path: str) -> str:
    _ensure_parent(path)
    try:
        with open(path, "w") as f:
            json.dump(data, f, indent=2, default=_to_builtin)
    except OSError as e:
        logger.error(f"Could not write JSON '{path}': {e}")
        raise RuntimeError(f"Could not write {path}") from e
    logger.info(f"Wrote summary to '{path}'")
    return path
