"""Seeded corruption generators: AWGN, signal-dependent Gaussian noise and a
blockwise-DCT quantizer emulating JPEG luminance compression.

Every generator is a pure function of (image, parameters, seed), so fixtures
are reproducible bit for bit across platforms.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D49BEDA9769E3B)
_TWO53 = float(1 << 53)


def _mix64(z):
    """SplitMix64 finalizer (wrapping 64-bit arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


class Rng:
    """Counter-based deterministic generator.

    The raw 64-bit word at draw index ``j`` of stream ``t`` under seed ``s``
    is ``mix64(mix64(s ^ mix64(t)) + (j + 1) * 0x9E3779B97F4A7C15)`` with all
    arithmetic modulo 2**64 (SplitMix64 constants).  Uniform doubles take the
    top 53 bits; Gaussian variates use the Box-Muller transform, consuming
    two raw words each: ``z = sqrt(-2 ln u1) * cos(2 pi u2)`` with
    ``u1 in (0, 1]``.  A variate therefore depends only on
    (seed, stream_id, draw index).
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self._base = _mix64(_U64(self.seed) ^ _mix64(_U64(self.stream_id)))
        self._pos = 0

    @property
    def position(self):
        """Number of raw 64-bit words consumed so far."""
        return self._pos

    def _raw(self, count):
        idx = np.arange(self._pos + 1, self._pos + count + 1, dtype=np.uint64)
        self._pos += count
        with np.errstate(over="ignore"):
            return _mix64(self._base + idx * _GOLDEN)

    def uniforms(self, count):
        """``count`` doubles uniform on [0, 1)."""
        return (self._raw(count) >> _U64(11)).astype(np.float64) / _TWO53

    def normals(self, count):
        """``count`` standard Gaussian doubles (Box-Muller)."""
        raw = self._raw(2 * count)
        u1 = ((raw[0::2] >> _U64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (raw[1::2] >> _U64(11)).astype(np.float64) / _TWO53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

    def integers(self, low, high, count=1):
        """``count`` ints uniform on [low, high)."""
        if high <= low:
            raise ConfigError("integers() needs high > low")
        u = self.uniforms(count)
        return low + np.minimum((u * (high - low)).astype(np.int64),
                                high - low - 1)


@dataclass
class DegradationSpec:
    """Which corruption to apply, with its seed.

    ``sigma`` is on the 0..255 intensity scale (AWGN); ``sigma_s``/``sigma_c``
    are on the 0..1 scale (signal-dependent model); ``quality`` is the JPEG
    quality factor 1..100.
    """

    kind: str = "awgn"
    sigma: float = 25.0
    sigma_s: float = 0.0
    sigma_c: float = 0.0
    quality: int = 10
    seed: int = 0
    clip: bool = False

    def validate(self):
        if self.kind not in ("awgn", "hetero", "jpeg"):
            raise ConfigError(f"unknown degradation kind {self.kind!r}")
        if self.kind == "awgn" and self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.kind == "hetero" and (self.sigma_s < 0 or self.sigma_c < 0):
            raise ConfigError("sigma_s/sigma_c must be non-negative")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ConfigError("quality must lie in 1..100")
        return self


def add_awgn(image, sigma, rng, clip=False):
    """Add i.i.d. Gaussian noise of standard deviation ``sigma`` (0..255 scale).

    No clipping unless requested; training pairs keep the raw values.
    """
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    img = np.asarray(image, dtype=np.float32)
    noise = (rng.normals(img.size).reshape(img.shape) * sigma).astype(np.float32)
    out = img + noise
    if clip:
        out = np.clip(out, 0.0, 255.0)
    return out


def add_hetero_gaussian(image, sigma_s, sigma_c, rng, clip=False):
    """Signal-dependent Gaussian noise on a [0, 1] image.

    Per pixel of irradiance L the noise variance is L * sigma_s**2 +
    sigma_c**2, the usual heteroscedastic approximation of real sensor noise.
    """
    if sigma_s < 0 or sigma_c < 0:
        raise ConfigError("sigma_s/sigma_c must be non-negative")
    img = np.asarray(image, dtype=np.float32)
    var = np.maximum(img, 0.0) * (sigma_s * sigma_s) + sigma_c * sigma_c
    z = rng.normals(img.size).reshape(img.shape)
    out = img + (np.sqrt(var, dtype=np.float64) * z).astype(np.float32)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


# Standard luminance quantization base table (8x8, zigzag-free layout).
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def quality_scaled_table(quality):
    """Luminance table scaled for a quality factor.

    scale = 5000 // q for q < 50 else 200 - 2q;
    entry = clamp(floor((base * scale + 50) / 100), 1, 255).
    """
    if not 1 <= quality <= 100:
        raise ConfigError("quality must lie in 1..100")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    table = (LUMINANCE_TABLE * scale + 50) // 100
    return np.clip(table, 1, 255).astype(np.float64)


def _dct_matrix():
    t = np.zeros((8, 8))
    for u in range(8):
        cu = math.sqrt(1.0 / 8.0) if u == 0 else math.sqrt(2.0 / 8.0)
        for x in range(8):
            t[u, x] = cu * math.cos((2 * x + 1) * u * math.pi / 16.0)
    return t


_DCT = _dct_matrix()


def jpeg_degrade(image, quality, unit_table=False):
    """Grayscale blockwise-DCT quantization at a JPEG quality factor.

    Per 8x8 block: level shift by -128, 2-D type-II DCT, divide by the
    quality-scaled luminance table with rounding, multiply back, inverse DCT,
    +128 and clamp to [0, 255].  Inputs whose sides are not multiples of 8
    are edge-replicated and cropped back.  ``unit_table`` forces an all-ones
    quantizer (round-trip within rounding, for debugging).
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze_to = img.shape
    img = img.reshape(img.shape[-2], img.shape[-1]) if img.ndim > 2 else img
    if img.ndim != 2:
        raise ShapeError("jpeg_degrade expects a single-channel image")
    h, w = img.shape
    table = np.ones((8, 8)) if unit_table else quality_scaled_table(quality)

    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    hp, wp = img.shape
    blocks = img.reshape(hp // 8, 8, wp // 8, 8).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(-1, 8, 8) - 128.0
    coef = _DCT @ blocks @ _DCT.T
    coef = np.round(coef / table) * table
    rec = _DCT.T @ coef @ _DCT + 128.0
    rec = rec.reshape(hp // 8, wp // 8, 8, 8).transpose(0, 2, 1, 3)
    rec = rec.reshape(hp, wp)[:h, :w]
    return np.clip(rec, 0.0, 255.0).astype(np.float32).reshape(squeeze_to)


def apply_degradation(image, spec, rng=None):
    """Apply a DegradationSpec to an image on the 0..255 scale.

    The signal-dependent model is defined on [0, 1]; for it the image is
    rescaled, corrupted and scaled back.
    """
    spec.validate()
    if rng is None:
        rng = Rng(spec.seed)
    if spec.kind == "awgn":
        return add_awgn(image, spec.sigma, rng, clip=spec.clip)
    if spec.kind == "hetero":
        out = add_hetero_gaussian(np.asarray(image, dtype=np.float32) / 255.0,
                                  spec.sigma_s, spec.sigma_c, rng,
                                  clip=spec.clip)
        return out * 255.0
    return jpeg_degrade(image, spec.quality)
