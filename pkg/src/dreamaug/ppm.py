"""Binary PPM (P6, maxval 255) reading and writing.

Images are float arrays of shape [3, H, W] with values in [0, 1]; conversion
to bytes is ``round(v * 255)`` clamped to [0, 255].
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def to_bytes(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"expected image of shape [3, H, W], got {list(image.shape)}")
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    pix = to_bytes(image)
    _, h, w = pix.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.transpose(1, 2, 0).tobytes()


def write_ppm(image: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def _next_token(data: bytes, pos: int) -> tuple:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"PPM header truncated at byte {start}")
    return data[start:pos], start, pos


def decode_ppm(data: bytes) -> np.ndarray:
    magic, off, pos = _next_token(data, 0)
    if magic != b"P6":
        raise FormatError(f"unsupported PPM magic {magic!r} at byte {off}; only binary P6 is supported")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, off, pos = _next_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"PPM {name} is not a positive integer ({tok!r}) at byte {off}")
        fields.append((int(tok), off))
    (w, woff), (h, hoff), (maxval, moff) = fields
    if w <= 0 or h <= 0:
        raise FormatError(f"PPM dimensions must be positive at byte {woff if w <= 0 else hoff}")
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval} at byte {moff}; only 255 is supported")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"PPM header must end with a single whitespace byte at byte {pos}")
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise FormatError(f"PPM pixel data truncated: need {need} bytes from byte {pos}, have {len(data) - pos}")
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
