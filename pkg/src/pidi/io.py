"""Binary tensor records (``PIDT``) and network checkpoints (``PIDN``).

All integers are little-endian.  A tensor record is::

    b"PIDT" | version u32 | dtype u8 | rank u8 | dims u32 x 4 | payload

Unused trailing dims are written as 1.  Packed binary tensors store the
logical shape in ``dims`` and a payload of u64 words, one packed row per
leading index (bit 0 of word 0 is the first element of the row).
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"PIDT"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"PIDN"
CHECKPOINT_VERSION = 1

DTYPE_F32, DTYPE_F64, DTYPE_I64, DTYPE_BITS = 0, 1, 2, 3
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8"), DTYPE_I64: np.dtype("<i8")}
_HEADER = struct.Struct("<4sIBB4I")
TASKS = ("edge", "classify")


class FormatError(ValueError):
    """Malformed or unsupported file content."""


def _dtype_code(a: np.ndarray) -> int:
    for code, dt in _DTYPES.items():
        if a.dtype == dt.newbyteorder("="):
            return code
    raise FormatError(f"cannot serialize dtype {a.dtype}")


def write_tensor(f: BinaryIO, t) -> None:
    from .binary import BitTensor

    if isinstance(t, BitTensor):
        shape, code = t.shape, DTYPE_BITS
        payload = t.words.astype("<u8").tobytes()
    else:
        a = np.ascontiguousarray(t)
        shape, code = a.shape, _dtype_code(a)
        payload = a.astype(_DTYPES[code]).tobytes()
    if not 1 <= len(shape) <= 4:
        raise FormatError(f"rank {len(shape)} not supported")
    dims = tuple(shape) + (1,) * (4 - len(shape))
    f.write(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, code, len(shape), *dims))
    f.write(payload)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(b)}")
    return b


def read_tensor(f: BinaryIO):
    magic, version, code, rank, *dims = _HEADER.unpack(_read_exact(f, _HEADER.size))
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version > TENSOR_VERSION:
        raise FormatError(f"tensor record version {version} is newer than supported {TENSOR_VERSION}")
    if not 1 <= rank <= 4:
        raise FormatError(f"bad rank {rank}")
    shape = tuple(dims[:rank])
    if code == DTYPE_BITS:
        from .binary import BitTensor, words_per_row

        rows = shape[0]
        nwords = rows * words_per_row(int(np.prod(shape[1:], dtype=np.int64)))
        words = np.frombuffer(_read_exact(f, 8 * nwords), dtype="<u8").astype(np.uint64)
        return BitTensor(shape, words.reshape(rows, -1))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype tag {code}")
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, dt.itemsize * count), dtype=dt)
    return data.astype(dt.newbyteorder("=")).reshape(shape)


def save_tensor(path, t) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


def _write_str(f: BinaryIO, s: str, fmt: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack(fmt, len(b)))
    f.write(b)


def _read_str(f: BinaryIO, fmt: str) -> str:
    (n,) = struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))
    return _read_exact(f, n).decode("utf-8")


def save_checkpoint(path, task: str, spec: str, tensors: dict) -> None:
    """Write a checkpoint: header, then a table of named tensor records."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IB", CHECKPOINT_VERSION, TASKS.index(task)))
        _write_str(f, spec, "<I")
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            _write_str(f, name, "<H")
            write_tensor(f, t)


def load_checkpoint(path) -> tuple[str, str, dict]:
    """Return ``(task, spec_string, {name: tensor})``."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        version, task = struct.unpack("<IB", _read_exact(f, 5))
        if version > CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
        if task >= len(TASKS):
            raise FormatError(f"{path}: unknown task code {task}")
        spec = _read_str(f, "<I")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name = _read_str(f, "<H")
            tensors[name] = read_tensor(f)
        return TASKS[task], spec, tensors
