"""
bank_store.py – Basis bank persistence layer for DotControl

Provides:
- Saving a BasisBank to a single binary file (JSON header + raw little-endian blocks)
- Loading it back with version, header and per-block checksum verification

A file either loads completely or raises; there are no partial loads.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict

import numpy as np

from config import BANK_FILE_VERSION
from services.basis_bank import BasisBank
from services.errors import BankChecksumError, BankError, BankFormatError
from services.hamiltonian import GridSpec, PhysicalParams

logger = logging.getLogger(__name__)

MAGIC = b"DQDBANK\0"

_ARRAY_FIELDS = {
    "F_grid": "<f8",
    "energies": "<f8",
    "singlet_char": "<f8",
    "occ_left": "<f8",
    "spin_x": "<f8",
    "load_rate": "<f8",
    "unload_rate": "<f8",
    "overlaps": "<c16",
    "dipole": "<c16",
    "dissipator_load": "<c16",
    "dissipator_unload": "<c16",
}


def _header_digest(header: dict) -> str:
    """sha256 of the canonical JSON header (sorted keys, without its own digest)."""
    body = {key: value for key, value in header.items() if key != "header_sha256"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()


def save_bank(bank: BasisBank, path: str, include_states: bool = True) -> str:
    """
    Write bank to path. Eigenstate grids are included only when the bank
    carries them and include_states is set.
    """
    arrays = {name: np.ascontiguousarray(getattr(bank, name), dtype=dtype) for name, dtype in _ARRAY_FIELDS.items()}
    if include_states and bank.states is not None:
        arrays["states"] = np.ascontiguousarray(bank.states, dtype="<c16")

    blocks, payload, offset = [], [], 0
    for name, arr in arrays.items():
        raw = arr.tobytes()
        blocks.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        payload.append(raw)
        offset += len(raw)

    header = {
        "version": BANK_FILE_VERSION,
        "reference_index": bank.reference_index,
        "labels": list(bank.labels),
        "rate_normalization": bank.rate_normalization,
        "params": asdict(bank.params),
        "grid": asdict(bank.grid),
        "metadata": bank.metadata,
        "blocks": blocks,
    }
    header["header_sha256"] = _header_digest(header)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            for raw in payload:
                f.write(raw)
    except OSError as e:
        logger.error(f"Error saving bank to '{path}': {e}")
        raise BankError(f"Could not save bank to {path}") from e
    logger.info(f"Saved bank of {bank.n_points} points to '{path}' (states included: {'states' in arrays})")
    return path


def load_bank(path: str) -> BasisBank:
    """Read a bank written by save_bank; raises BankFormatError or BankChecksumError."""
    try:
        with open(path, "rb") as f:
            content = f.read()
    except OSError as e:
        logger.error(f"Could not read bank file '{path}': {e}")
        raise BankError(f"Could not read bank file {path}") from e

    if not content.startswith(MAGIC) or len(content) < len(MAGIC) + 4:
        raise BankFormatError(f"{path} is not a bank file")
    (header_len,) = struct.unpack("<I", content[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(content[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BankFormatError(f"{path} has an unreadable header") from e

    version = header.get("version")
    if version != BANK_FILE_VERSION:
        raise BankFormatError(f"bank file version {version} does not match supported version {BANK_FILE_VERSION}")

    stored = header.pop("header_sha256", None)
    if stored is None:
        raise BankFormatError(f"{path} has no header checksum")
    if _header_digest(header) != stored:
        logger.error(f"Checksum failure in the header of '{path}'")
        raise BankChecksumError(f"header of {path} failed its checksum")

    data = content[start + header_len:]
    arrays = {}
    for block in header["blocks"]:
        raw = data[block["offset"]:block["offset"] + block["nbytes"]]
        if len(raw) != block["nbytes"] or hashlib.sha256(raw).hexdigest() != block["sha256"]:
            logger.error(f"Checksum failure in block '{block['name']}' of '{path}'")
            raise BankChecksumError(f"block {block['name']} of {path} failed its checksum")
        arrays[block["name"]] = np.frombuffer(raw, dtype=block["dtype"]).reshape(block["shape"]).copy()

    missing = [name for name in _ARRAY_FIELDS if name not in arrays]
    if missing:
        raise BankFormatError(f"{path} is missing blocks {missing}")

    try:
        bank = BasisBank(
            **{name: arrays[name] for name in _ARRAY_FIELDS},
            reference_index=int(header["reference_index"]),
            labels=tuple(header["labels"]),
            params=PhysicalParams(**header["params"]),
            grid=GridSpec(**header["grid"]),
            rate_normalization=header["rate_normalization"],
            states=arrays.get("states"),
            metadata=header.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise BankFormatError(f"{path} has an invalid header: {e}") from e
    logger.info(f"Loaded bank of {bank.n_points} points from '{path}'")
    return bank
