"""Cover image decoding and resizing.

Binary/ASCII PNM (P6, P5, P3) is decoded natively; other formats go through
Pillow when it is installed.
"""

from __future__ import annotations

import io
import os

import numpy as np

from .errors import ImageDecodeError

_WHITESPACE = b" \t\r\n\v\f"


def _header_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens; return tokens and payload offset."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageDecodeError("PNM header truncated")
        tokens.append(bytes(data[start:pos]))
    # exactly one whitespace byte separates the header from a binary raster
    return tokens, pos + 1


def decode_pnm(data: bytes):
    """Return ``(pixels, maxval)`` with pixels as an integer H x W x 3 array."""
    magic = bytes(data[:2])
    if magic not in (b"P6", b"P5", b"P3"):
        raise ImageDecodeError(f"not a supported PNM file (magic {magic!r})")
    tokens, offset = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageDecodeError(f"bad PNM header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"bad PNM geometry {width}x{height} maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    if magic == b"P3":
        try:
            values = np.array(bytes(data[offset - 1 :]).split()[:count], dtype=np.int64)
        except ValueError:
            raise ImageDecodeError("bad ASCII PNM raster") from None
        if values.size != count:
            raise ImageDecodeError("ASCII PNM raster truncated")
    else:
        dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
        raw = data[offset : offset + count * dtype.itemsize]
        if len(raw) != count * dtype.itemsize:
            raise ImageDecodeError(f"PNM raster truncated ({len(raw)} of {count * dtype.itemsize} bytes)")
        values = np.frombuffer(raw, dtype=dtype)
    pixels = values.reshape(height, width, channels)
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return pixels, maxval


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Binary P6 encoding of an H x W x 3 uint8 array."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def read_image(path):
    """Decode a file into ``(pixels, maxval)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageDecodeError(f"cannot read {path}: {exc.strerror or exc}") from None
    if data[:1] == b"P" and data[1:2] in (b"3", b"5", b"6"):
        return decode_pnm(data)
    try:
        from PIL import Image
    except ImportError:
        raise ImageDecodeError(f"{path}: only PNM supported without Pillow") from None
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB")), 255
    except Exception as exc:  # Pillow raises a zoo of types
        raise ImageDecodeError(f"{path}: {exc}") from None


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Anisotropic bilinear resize with pixel-centre alignment and edge clamping."""
    in_h, in_w = img.shape[:2]
    img = np.asarray(img, dtype=np.float64)
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def load_image(path, target_h: int, target_w: int, dtype=np.float32) -> np.ndarray:
    """1 x H x W x 3 RGB tensor in [0, 1]."""
    pixels, maxval = read_image(os.fspath(path))
    resized = bilinear_resize(pixels, target_h, target_w)
    return np.clip(resized / maxval, 0.0, 1.0).astype(dtype)[None]
