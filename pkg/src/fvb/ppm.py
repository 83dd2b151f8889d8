"""Binary PPM (P6, 8-bit) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError
from .tensor import DTYPE

PIXEL_MEAN = 0.0
PIXEL_STD = 1.0


def _header_tokens(buf: bytes, source: str):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos, n = 0, len(buf)
    for _ in range(4):
        while pos < n:
            ch = buf[pos : pos + 1]
            if ch == b"#":
                nl = buf.find(b"\n", pos)
                pos = n if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated PPM header at byte offset {pos}")
        yield buf[start:pos], pos


def decode_ppm(buf: bytes, source: str = "<bytes>", mean: float = PIXEL_MEAN, std: float = PIXEL_STD) -> np.ndarray:
    """P6 bytes -> (1, 3, h, w) float32, scaled to [0, 1] then normalised."""
    if buf[:2] != b"P6":
        raise FormatError(f"{source}: bad magic {buf[:2]!r}, expected b'P6'")
    toks = list(_header_tokens(buf, source))
    try:
        width, height, maxval = (int(t) for t, _ in toks[1:])
    except ValueError:
        raise FormatError(f"{source}: non-numeric PPM header field") from None
    if width < 1 or height < 1:
        raise FormatError(f"{source}: invalid image size {width}x{height}")
    if not 0 < maxval < 256:
        raise FormatError(f"{source}: only 8-bit PPM is supported (maxval {maxval})")
    data_start = toks[-1][1] + 1  # exactly one whitespace byte after maxval
    need = width * height * 3
    have = max(0, len(buf) - data_start)
    if have < need:
        raise FormatError(
            f"{source}: truncated pixel data at byte offset {data_start + have}: "
            f"expected {need} bytes starting at offset {data_start}, found {have}"
        )
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=data_start)
    img = pixels.reshape(height, width, 3).transpose(2, 0, 1)[None].astype(DTYPE) / DTYPE(maxval)
    return ((img - DTYPE(mean)) / DTYPE(std)).astype(DTYPE)


def read_ppm(path, **kwargs) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    return decode_ppm(buf, str(path), **kwargs)


def encode_ppm(pixels: np.ndarray) -> bytes:
    """(h, w, 3) uint8 -> P6 bytes."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes()


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))
