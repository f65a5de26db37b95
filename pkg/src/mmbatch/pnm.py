"""Binary PPM (P6) / PGM (P5) rasters, 8-bit.

Images are exchanged as ``C x H x W`` float32 arrays with values in [0, 1].
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ImageFormatError


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PNM header")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ImageFormatError(f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"bad PNM header: {exc}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"degenerate image size {width}x{height}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"only 8-bit rasters are supported (maxval {maxval})")
    expected = width * height * channels
    if len(data) - offset < expected:
        raise ImageFormatError(f"raster truncated: need {expected} bytes")
    raster = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset)
    img = raster.reshape(height, width, channels).transpose(2, 0, 1)
    return (img.astype(np.float32) / np.float32(maxval)).copy()


def encode_pnm(image: np.ndarray) -> bytes:
    """Encode a ``C x H x W`` (or ``H x W``) array in [0, 1] as PGM/PPM bytes."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected 1 or 3 channels, got shape {img.shape}")
    c, h, w = img.shape
    if h < 1 or w < 1:
        raise ImageFormatError(f"degenerate image size {w}x{h}")
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))
