"""Minimal 8-bit PGM/PPM reader and writer (P2, P3, P5, P6)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}


class PnmError(ValueError):
    """Malformed or unsupported PNM data."""


@dataclass
class Image:
    data: np.ndarray  # (H, W, C) uint8

    def __post_init__(self):
        d = self.data
        if d.dtype != np.uint8 or d.ndim != 3 or d.shape[2] not in (1, 3):
            raise PnmError(f"image data must be uint8 (H, W, 1|3), got {d.dtype} {d.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_chw(self) -> np.ndarray:
        """Float32 ``(C, H, W)`` array scaled to [0, 1]."""
        return (self.data.transpose(2, 0, 1) / 255.0).astype(np.float32)

    @classmethod
    def from_float(cls, x: np.ndarray) -> "Image":
        """Build from an ``(H, W)`` or ``(C, H, W)`` array in [0, 1], rounding to 8 bits."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        q = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
        return cls(np.ascontiguousarray(q.transpose(1, 2, 0)))


def _tokens(buf: bytes, pos: int, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos: pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos: pos + 1] == b"#":
            while pos < n and buf[pos: pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos: pos + 1].isspace() and buf[pos: pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PnmError("truncated header")
        out.append(buf[start:pos])
    return out, pos


def decode(buf: bytes) -> Image:
    magic = buf[:2]
    if magic not in _CHANNELS:
        raise PnmError(f"unsupported magic {magic!r}")
    c = _CHANNELS[magic]
    try:
        (w, h, maxval), pos = _tokens(buf, 2, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise PnmError(f"bad header: {e}") from None
    if w < 1 or h < 1:
        raise PnmError(f"bad dimensions {w}x{h}")
    if not 1 <= maxval <= 255:
        raise PnmError(f"only 8-bit images are supported (maxval {maxval})")
    count = w * h * c
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace byte after maxval
        raw = buf[pos: pos + count]
        if len(raw) != count:
            raise PnmError(f"expected {count} samples, found {len(raw)}")
        vals = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    else:
        try:
            vals = np.array([int(t) for t in buf[pos:].split()], dtype=np.int64)
        except ValueError:
            raise PnmError("non-integer sample in ASCII body") from None
        if len(vals) != count:
            raise PnmError(f"expected {count} samples, found {len(vals)}")
    if vals.size and vals.max() > maxval:
        raise PnmError("sample exceeds maxval")
    if maxval != 255:
        vals = (vals * 255 + maxval // 2) // maxval
    return Image(vals.astype(np.uint8).reshape(h, w, c))


def encode(img: Image, binary: bool = True) -> bytes:
    c = img.channels
    magic = {(1, True): "P5", (3, True): "P6", (1, False): "P2", (3, False): "P3"}[(c, binary)]
    head = f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii")
    if binary:
        return head + img.data.tobytes()
    rows = (" ".join(str(v) for v in row) for row in img.data.reshape(img.height, -1))
    return head + ("\n".join(rows) + "\n").encode("ascii")


def read_image(path) -> Image:
    with open(path, "rb") as f:
        return decode(f.read())


def write_image(path, img: Image, binary: bool = True) -> None:
    with open(path, "wb") as f:
        f.write(encode(img, binary))
