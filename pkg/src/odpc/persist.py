"""Binary and JSON persistence with fixed layouts.

Feature bank file layout (all integers little-endian):

    bytes 0..7    magic ``ODPCFB01``
    u32           format version (currently 1)
    u32           n_rows
    u32           dim
    u8            normalized flag (0 or 1)
    payload       n_rows * dim float32, row-major
    u32           CRC32 over the payload

Files are byte-identical across platforms for identical inputs. Writers go
through a temp-file-then-rename so partially written outputs never replace
good ones.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError, InvalidArgumentError

BANK_MAGIC = b"ODPCFB01"
BANK_VERSION = 1

_HEADER = struct.Struct("<III B")


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write bytes to path atomically (temp file in the same dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, obj: object) -> None:
    """Serialize obj as UTF-8 JSON with stable key ordering."""
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path: str | Path) -> object:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_bank(matrix: np.ndarray, path: str | Path, normalized: bool = False) -> None:
    """Persist a 2-D float matrix in the feature bank format.

    Values are stored as float32; pass data that is already float32 for a
    lossless roundtrip.
    """
    arr = np.ascontiguousarray(matrix, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"bank matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("bank matrix contains non-finite values")
    n_rows, dim = arr.shape
    payload = arr.tobytes()
    blob = (
        BANK_MAGIC
        + _HEADER.pack(BANK_VERSION, n_rows, dim, 1 if normalized else 0)
        + payload
        + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    )
    atomic_write_bytes(path, blob)


def read_bank(path: str | Path) -> tuple[np.ndarray, bool]:
    """Read a feature bank file; returns (float32 matrix, normalized flag).

    Raises FormatError on a bad magic/version/size, CorruptFileError on a
    CRC mismatch.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(BANK_MAGIC) + _HEADER.size + 4:
        raise FormatError(f"{path}: file too short for a feature bank")
    if blob[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}")
    off = len(BANK_MAGIC)
    version, n_rows, dim, norm_flag = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version}")
    expected = n_rows * dim * 4
    payload = blob[off : off + expected]
    if len(payload) != expected or len(blob) != off + expected + 4:
        raise FormatError(
            f"{path}: payload size mismatch (declared {expected} bytes, "
            f"file holds {len(blob) - off - 4})"
        )
    (crc_stored,) = struct.unpack_from("<I", blob, off + expected)
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise CorruptFileError(f"{path}: payload CRC mismatch")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n_rows, dim).copy()
    return matrix, bool(norm_flag)
