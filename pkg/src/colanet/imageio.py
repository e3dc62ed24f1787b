"""Binary PGM (P5) and PPM (P6) image files, maxval 255.

Load maps pixels to float32 on the [0, 255] scale: (H, W) for grayscale and
(3, H, W) for color.  Save clamps to [0, 255] and rounds half away from
zero, so integer-valued tensors in range round-trip byte for byte.
"""

import numpy as np

from .errors import FormatError


class UnsupportedImageError(FormatError):
    """The file is a valid netpbm image this build does not accept."""


def _tokens(data):
    """Yield header tokens, honoring '#' comments, and the payload offset."""
    pos = 0
    found = []
    while len(found) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        found.append(data[start:pos])
    if pos >= len(data):
        raise FormatError("missing payload")
    return found, pos + 1  # single whitespace byte ends the header


def load_image(path):
    """Read a P5/P6 file into a float32 array on the [0, 255] scale."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM file: {path}")
    tokens, offset = _tokens(data)
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric netpbm header fields")
    if width < 1 or height < 1:
        raise FormatError("non-positive image dimensions")
    if maxval != 255:
        raise UnsupportedImageError(f"maxval {maxval} unsupported (need 255)")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) != need:
        raise FormatError(f"payload holds {len(payload)} bytes, need {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32)
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def save_image(image, path):
    """Write a (H, W) or (3, H, W) array as P5/P6 with maxval 255."""
    arr = np.asarray(image, dtype=np.float64)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        magic, payload_shape = b"P5", arr[None]
    elif arr.ndim == 3 and arr.shape[0] == 3:
        magic, payload_shape = b"P6", arr
    else:
        raise FormatError(f"cannot save shape {arr.shape} as PGM/PPM")
    clamped = np.clip(payload_shape, 0.0, 255.0)
    quantized = np.floor(clamped + 0.5).astype(np.uint8)
    _, h, w = quantized.shape
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    body = quantized.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)
