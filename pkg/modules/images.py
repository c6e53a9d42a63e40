import logging
import os

import numpy as np

from .errors import ImageFormatError

logger = logging.getLogger(__name__)

try:
    from PIL import Image
except ImportError:
    Image = None


def to_uint8(rgb):
    """Float RGB in [0, 1] -> uint8, round-half-up."""
    return np.floor(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def to_float(pixels):
    return np.asarray(pixels, dtype=np.float64) / 255.0


def _header_tokens(data, count):
    tokens = []
    pos = 0
    size = len(data)
    while len(tokens) < count:
        while pos < size and chr(data[pos]).isspace():
            pos += 1
        if pos < size and data[pos:pos + 1] == b"#":
            while pos < size and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= size:
            raise ImageFormatError("malformed PPM header: unexpected end of file")
        start = pos
        while pos < size and not chr(data[pos]).isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= size or not chr(data[pos]).isspace():
        raise ImageFormatError("malformed PPM header: missing separator before pixel data")
    return tokens, pos + 1


def decode_ppm(data: bytes):
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError("malformed PPM header: expected P6 magic")
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed PPM header: non-numeric field") from exc
    if width <= 0 or height <= 0:
        raise ImageFormatError("malformed PPM header: non-positive size")
    if maxval != 255:
        raise ImageFormatError("unsupported maxval")
    expected = width * height * 3
    raster = data[offset:offset + expected]
    if len(raster) != expected:
        raise ImageFormatError(f"truncated PPM raster: expected {expected} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError("image buffer must be H x W x 3")
    height, width = pixels.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def read_image(path):
    """Read an 8-bit RGB image as a (H, W, 3) uint8 array."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        if Image is None:
            logger.warning("Pillow is not installed; PNG images cannot be read")
            raise ImageFormatError("PNG support requires Pillow")
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()
    with open(path, "rb") as handle:
        return decode_ppm(handle.read())


def write_image(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = to_uint8(pixels)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        if Image is None:
            logger.warning("Pillow is not installed; PNG images cannot be written")
            raise ImageFormatError("PNG support requires Pillow")
        Image.fromarray(np.ascontiguousarray(pixels)).save(path)
        return
    with open(path, "wb") as handle:
        handle.write(encode_ppm(pixels))
