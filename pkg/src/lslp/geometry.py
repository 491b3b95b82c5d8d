"""Overlapping grid placement and per-pixel coverage queries.

Conventions: an image shape is ``(w, h)``, a pixel is ``(x, y)`` with
``0 <= x < w`` and ``0 <= y < h``. Grids are axis-aligned boxes anchored at
origin 0 and stepped by a fixed stride per axis: origins run over multiples
of the stride up to ``dim - grid``, and a final origin clamped to
``dim - grid`` is appended when the regular ones fall short, so the union
of grids always tiles the whole image. ``stride_fraction=1`` gives the
non-overlapping arrangement; ``alpha=1`` degenerates to a single full-image
grid (no position information).

GridSet objects are immutable after construction and safe to share.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class Grid:
    id: int
    origin: tuple  # (x0, y0)
    size: tuple    # (gw, gh)

    @property
    def center(self) -> tuple:
        return (self.origin[0] + self.size[0] / 2, self.origin[1] + self.size[1] / 2)

    def contains(self, x: int, y: int) -> bool:
        x0, y0 = self.origin
        gw, gh = self.size
        return x0 <= x < x0 + gw and y0 <= y < y0 + gh

    @property
    def box(self) -> tuple:
        """(x0, y0, gw, gh), the window layout used by the tensor primitives."""
        return (*self.origin, *self.size)


@dataclass(frozen=True, eq=False)
class GridSet:
    grids: tuple
    alpha: float
    stride_fraction: float
    image_shape: tuple  # (w, h)
    _offsets: np.ndarray = field(repr=False)
    _ids: np.ndarray = field(repr=False)

    @property
    def n_g(self) -> int:
        return len(self.grids)

    def coverage_of(self, x: int, y: int) -> np.ndarray:
        """Ids of all grids containing pixel (x, y), ascending."""
        w, h = self.image_shape
        if not (0 <= x < w and 0 <= y < h):
            raise GeometryError(f"pixel ({x}, {y}) outside {w}x{h} image")
        flat = y * w + x
        return self._ids[self._offsets[flat]:self._offsets[flat + 1]].copy()

    def coverage_counts(self) -> np.ndarray:
        """(h, w) array of |coverage| per pixel."""
        w, h = self.image_shape
        return np.diff(self._offsets).reshape(h, w)


def _axis_origins(dim: int, grid: int, stride_fraction: float) -> list:
    stride = max(1, _scaled(stride_fraction, grid))
    last = dim - grid
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def _scaled(fraction: float, length: int) -> int:
    # Guard against float dust like 0.3 * 10 = 2.9999999999999996.
    return int(math.floor(fraction * length + 1e-9))


def build_grid_set(image_shape, alpha: float, stride_fraction: float) -> GridSet:
    """Place grids of side ``alpha * dim`` across the image; build coverage."""
    w, h = int(image_shape[0]), int(image_shape[1])
    if w < 1 or h < 1:
        raise GeometryError(f"invalid image shape ({w}, {h})")
    if not 0 < alpha <= 1:
        raise GeometryError(f"alpha must be in (0, 1], got {alpha}")
    if not 0 < stride_fraction <= 1:
        raise GeometryError(f"stride_fraction must be in (0, 1], got {stride_fraction}")
    gw, gh = _scaled(alpha, w), _scaled(alpha, h)
    if gw < 1 or gh < 1:
        raise GeometryError(f"grid smaller than one pixel (alpha={alpha}, image {w}x{h})")
    grids = []
    for y0 in _axis_origins(h, gh, stride_fraction):
        for x0 in _axis_origins(w, gw, stride_fraction):
            grids.append(Grid(len(grids), (x0, y0), (gw, gh)))
    offsets, ids = _build_coverage(grids, w, h)
    return GridSet(tuple(grids), alpha, stride_fraction, (w, h), offsets, ids)


def _build_coverage(grids, w: int, h: int):
    counts = np.zeros((h, w), dtype=np.int64)
    for g in grids:
        x0, y0 = g.origin
        gw, gh = g.size
        counts[y0:y0 + gh, x0:x0 + gw] += 1
    if counts.min() < 1:
        raise GeometryError("internal: grid union does not cover the image")
    flat_counts = counts.ravel()
    offsets = np.zeros(w * h + 1, dtype=np.int64)
    np.cumsum(flat_counts, out=offsets[1:])
    ids = np.empty(int(offsets[-1]), dtype=np.int32)
    fill = offsets[:-1].copy()
    for g in grids:
        x0, y0 = g.origin
        gw, gh = g.size
        flat = (np.arange(y0, y0 + gh)[:, None] * w
                + np.arange(x0, x0 + gw)[None, :]).ravel()
        ids[fill[flat]] = g.id
        fill[flat] += 1
    return offsets, ids


def gridset_from_boxes(boxes, image_shape, alpha: float,
                       stride_fraction: float) -> GridSet:
    """Reconstruct a GridSet from explicit (x0, y0, gw, gh) boxes."""
    w, h = int(image_shape[0]), int(image_shape[1])
    grids = tuple(Grid(i, (int(b[0]), int(b[1])), (int(b[2]), int(b[3])))
                  for i, b in enumerate(boxes))
    for g in grids:
        x0, y0 = g.origin
        gw, gh = g.size
        if not (0 <= x0 and x0 + gw <= w and 0 <= y0 and y0 + gh <= h and
                gw >= 1 and gh >= 1):
            raise GeometryError(f"grid {g.id} box {g.box} outside {w}x{h} image")
    offsets, ids = _build_coverage(grids, w, h)
    return GridSet(grids, alpha, stride_fraction, (w, h), offsets, ids)


def project_to_feature_space(gridset: GridSet, feature_shape) -> GridSet:
    """Rescale grids from image resolution to an integer-factor feature map."""
    w, h = gridset.image_shape
    fw, fh = int(feature_shape[0]), int(feature_shape[1])
    if fw < 1 or fh < 1 or w % fw or h % fh:
        raise GeometryError(
            f"feature shape ({fw}, {fh}) is not an integral downsample of ({w}, {h})")
    fx, fy = w // fw, h // fh
    if fx == 1 and fy == 1:
        return gridset
    grids = tuple(
        Grid(g.id,
             (g.origin[0] // fx, g.origin[1] // fy),
             (max(1, g.size[0] // fx), max(1, g.size[1] // fy)))
        for g in gridset.grids)
    offsets, ids = _build_coverage(grids, fw, fh)
    return GridSet(grids, gridset.alpha, gridset.stride_fraction, (fw, fh),
                   offsets, ids)
