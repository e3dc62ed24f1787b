"""Sliding-patch extraction (unfold) and its averaging inverse (fold).

A patch grid is defined by a patch size and stride over a C x H x W map.
``unfold`` flattens every patch to a row vector (channel-major, then patch
row, then patch column); ``fold`` scatters rows back and averages wherever
patches overlap.  Both are linear maps and each other's adjoint up to the
per-pixel coverage count, which is what their backward passes implement.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _accum, _result


@dataclass(frozen=True)
class PatchGeometry:
    """Grid description: image extent, patch extent and stride."""

    channels: int
    height: int
    width: int
    patch_h: int
    patch_w: int
    stride: int

    def __post_init__(self):
        for field in ("channels", "height", "width", "patch_h", "patch_w",
                      "stride"):
            if getattr(self, field) < 1:
                raise ShapeError(f"{field} must be positive")
        if self.patch_h > self.height or self.patch_w > self.width:
            raise ShapeError("patch larger than image")

    @property
    def grid_h(self):
        return (self.height - self.patch_h) // self.stride + 1

    @property
    def grid_w(self):
        return (self.width - self.patch_w) // self.stride + 1

    @property
    def num_patches(self):
        return self.grid_h * self.grid_w

    @property
    def row_len(self):
        return self.channels * self.patch_h * self.patch_w


@dataclass
class PatchSet:
    """Unfolded patches plus the geometry needed to fold them back.

    ``patches`` has shape (num_patches, channels * patch_h * patch_w); row
    ``r * grid_w + c`` holds the patch whose top-left corner sits at
    (r * stride, c * stride).
    """

    geometry: PatchGeometry
    patches: Tensor

    def __post_init__(self):
        expect = (self.geometry.num_patches, self.geometry.row_len)
        if tuple(self.patches.shape) != expect:
            raise ShapeError(
                f"patch matrix {self.patches.shape} does not match geometry "
                f"(expected {expect})")


def _gather(data, geom):
    """Copy the patch grid of a (C, H, W) array into an (N, row_len) matrix."""
    gh, gw, s = geom.grid_h, geom.grid_w, geom.stride
    win = np.empty((geom.channels, geom.patch_h, geom.patch_w, gh, gw),
                   dtype=data.dtype)
    for i in range(geom.patch_h):
        for j in range(geom.patch_w):
            win[:, i, j] = data[:, i:i + gh * s:s, j:j + gw * s:s]
    return win.transpose(3, 4, 0, 1, 2).reshape(geom.num_patches, geom.row_len)


def _scatter_add(rows, geom, out):
    """Accumulate an (N, row_len) matrix back onto a (C, H, W) array."""
    gh, gw, s = geom.grid_h, geom.grid_w, geom.stride
    win = rows.reshape(gh, gw, geom.channels, geom.patch_h, geom.patch_w)
    win = win.transpose(2, 3, 4, 0, 1)
    for i in range(geom.patch_h):
        for j in range(geom.patch_w):
            out[:, i:i + gh * s:s, j:j + gw * s:s] += win[:, i, j]


_count_cache = {}


def coverage_counts(geom):
    """Number of patches covering each pixel, as a read-only (H, W) array.

    Zero entries mark pixels no patch reaches (possible when the stride does
    not tile the image); ``fold`` writes 0 there.
    """
    key = (geom.height, geom.width, geom.patch_h, geom.patch_w, geom.stride)
    counts = _count_cache.get(key)
    if counts is None:
        gh, gw, s = geom.grid_h, geom.grid_w, geom.stride
        counts = np.zeros((geom.height, geom.width), dtype=np.int64)
        for i in range(geom.patch_h):
            for j in range(geom.patch_w):
                counts[i:i + gh * s:s, j:j + gw * s:s] += 1
        counts.setflags(write=False)
        _count_cache[key] = counts
    return counts


def unfold(x, geometry):
    """Extract the sliding patches of a 1 x C x H x W tensor."""
    xd = x.data
    if xd.ndim != 4 or xd.shape[0] != 1:
        raise ShapeError("unfold expects a 1 x C x H x W tensor")
    if xd.shape[1:] != (geometry.channels, geometry.height, geometry.width):
        raise ShapeError(f"input {xd.shape} does not match geometry")
    rows = _gather(xd[0], geometry)

    def bwd(g):
        gx = np.zeros_like(xd)
        _scatter_add(g, geometry, gx[0])
        _accum(x, gx)

    return PatchSet(geometry, _result(rows, (x,), bwd))


def fold(patches):
    """Reassemble a PatchSet into a 1 x C x H x W tensor, averaging overlaps."""
    geom = patches.geometry
    pt = patches.patches
    counts = coverage_counts(geom)
    safe = np.where(counts == 0, 1, counts).astype(pt.data.dtype)
    acc = np.zeros((geom.channels, geom.height, geom.width),
                   dtype=pt.data.dtype)
    _scatter_add(pt.data, geom, acc)
    out = (acc / safe)[None]

    def bwd(g):
        _accum(pt, _gather((g[0] / safe).astype(pt.data.dtype), geom))

    return _result(out, (pt,), bwd)
