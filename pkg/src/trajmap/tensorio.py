"""MMPT binary tensor files and manifest-indexed checkpoint directories.

Layout of one file (little-endian, no padding)::

    b"MMPT" | version u32 | dtype u32 (0=f32, 1=f64) | rank u32 | extents u64*rank | data
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError, DataIOError

MAGIC = b"MMPT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"MMPT supports float32/float64 only, got {arr.dtype}")
    header = MAGIC + struct.pack("<III", VERSION, _DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise DataIOError(f"{source}: not an MMPT tensor file")
    version, code, rank = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise DataIOError(f"{source}: unsupported MMPT version {version}")
    if code not in _CODE_DTYPES:
        raise DataIOError(f"{source}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 16)
    offset = 16 + 8 * rank
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + count * dt.itemsize:
        raise DataIOError(f"{source}: payload size does not match shape {shape}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape).copy()


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_tensor(arr))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    return decode_tensor(buf, str(path))


def save_checkpoint(directory: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write one MMPT file per tensor plus ``manifest.txt`` (``name = relpath``)."""
    root = Path(directory)
    try:
        (root / "tensors").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {root}: {exc}") from exc
    lines = []
    for name in sorted(tensors):
        rel = f"tensors/{name}.mmpt"
        save_tensor(root / rel, tensors[name])
        lines.append(f"{name} = {rel}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    entries: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}:{lineno}: expected 'name = path'")
        name, rel = (s.strip() for s in line.split("=", 1))
        entries[name] = rel
    return entries


def load_checkpoint(directory: str | os.PathLike) -> dict[str, np.ndarray]:
    root = Path(directory)
    out = {}
    for name, rel in read_manifest(root / "manifest.txt").items():
        try:
            out[name] = load_tensor(root / rel)
        except DataIOError as exc:
            raise CheckpointError(str(exc)) from exc
    return out
