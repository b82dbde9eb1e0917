"""Voxel grids, masked bicubic resampling, histograms and mask geometry.

Arrays are indexed ``[x, y, z]``.  The world coordinate of voxel ``i`` along
an axis is ``origin + i * spacing``, i.e. the origin is the centre of the
first voxel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    BinsMismatch,
    EmptyMask,
    EmptyROI,
    GeometryMismatch,
    InsufficientData,
    InvalidArgument,
)

log = logging.getLogger(__name__)

OUTSIDE, TUMOR, NECROSIS, FAT = 0, 1, 2, 3
LABEL_NAMES = {OUTSIDE: "outside", TUMOR: "tumor", NECROSIS: "necrosis", FAT: "fat"}

D_VALUE = "d_value_mm2_per_s"
DENSITY_2D = "density_2d_cells_per_mm2"
DENSITY_3D = "density_3d_cells_per_mm3"
DIMENSIONLESS = "dimensionless"
UNITS = (D_VALUE, DENSITY_2D, DENSITY_3D, DIMENSIONLESS)

REF_SPACING_MM = (2.1, 2.1, 6.0)

# Inclusive tolerance (mm) for point-in-rectangle tests.
ROI_EPS = 1e-9


def _triple(values, name, positive=False):
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise InvalidArgument(f"{name} needs 3 components, got {len(out)}")
    if positive and not all(v > 0 for v in out):
        raise InvalidArgument(f"{name} components must be > 0: {out}")
    if not all(math.isfinite(v) for v in out):
        raise InvalidArgument(f"{name} must be finite: {out}")
    return out


@dataclass(frozen=True, eq=False)
class ScalarGrid3:
    values: np.ndarray
    spacing_mm: tuple = REF_SPACING_MM
    origin_mm: tuple = (0.0, 0.0, 0.0)
    unit: str = D_VALUE

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or min(values.shape) < 1:
            raise InvalidArgument(f"grid values must be a non-empty 3d array, got {values.shape}")
        if np.isinf(values).any():
            raise InvalidArgument("grid values must be finite or NaN")
        if self.unit not in UNITS:
            raise InvalidArgument(f"unknown unit tag {self.unit!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing_mm", _triple(self.spacing_mm, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _triple(self.origin_mm, "origin_mm"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def with_values(self, values, unit: str | None = None) -> "ScalarGrid3":
        return ScalarGrid3(values, self.spacing_mm, self.origin_mm, unit or self.unit)

    def slice2d(self, k: int) -> "Slice2D":
        return Slice2D(self.values[:, :, k], self.spacing_mm[:2], self.origin_mm[:2])

    def equals(self, other: "ScalarGrid3") -> bool:
        return (
            same_geometry(self, other)
            and self.unit == other.unit
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class LabelGrid3:
    labels: np.ndarray
    spacing_mm: tuple = REF_SPACING_MM
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim == 2:
            labels = labels[:, :, None]
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise InvalidArgument(f"label grid must be a non-empty 3d array, got {labels.shape}")
        bad = ~np.isin(labels, (OUTSIDE, TUMOR, NECROSIS, FAT))
        if bad.any():
            raise InvalidArgument(f"labels restricted to 0..3, found {np.unique(labels[bad])}")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing_mm", _triple(self.spacing_mm, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _triple(self.origin_mm, "origin_mm"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def region(self) -> np.ndarray:
        """Everything inside the tumour contour (tumour, necrosis, fat)."""
        return self.labels != OUTSIDE

    def vital(self) -> np.ndarray:
        return self.labels == TUMOR

    def slice2d(self, k: int) -> "Slice2D":
        return Slice2D(self.labels[:, :, k], self.spacing_mm[:2], self.origin_mm[:2])

    def equals(self, other: "LabelGrid3") -> bool:
        return same_geometry(self, other) and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class Slice2D:
    """One axial slice of a grid: ``values[x, y]`` plus in-plane geometry."""

    values: np.ndarray
    spacing_mm: tuple
    origin_mm: tuple = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def cell_area_mm2(self) -> float:
        return self.spacing_mm[0] * self.spacing_mm[1]

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of every cell centre, each with ``shape``."""
        nx, ny = self.shape
        x = self.origin_mm[0] + np.arange(nx) * self.spacing_mm[0]
        y = self.origin_mm[1] + np.arange(ny) * self.spacing_mm[1]
        return np.meshgrid(x, y, indexing="ij")

    def to_index(self, x: float, y: float) -> tuple[int, int]:
        """Nearest cell index of a world point (may lie outside the array)."""
        i = int(math.floor((x - self.origin_mm[0]) / self.spacing_mm[0] + 0.5))
        j = int(math.floor((y - self.origin_mm[1]) / self.spacing_mm[1] + 0.5))
        return i, j

    def lookup(self, x: float, y: float, fill=0):
        i, j = self.to_index(x, y)
        nx, ny = self.shape
        if 0 <= i < nx and 0 <= j < ny:
            return self.values[i, j]
        return fill


def same_geometry(a, b) -> bool:
    return (
        a.dims == b.dims
        and np.allclose(a.spacing_mm, b.spacing_mm, rtol=1e-12, atol=0)
        and np.allclose(a.origin_mm, b.origin_mm, rtol=0, atol=1e-9)
    )


def check_geometry(a, b) -> None:
    if not same_geometry(a, b):
        raise GeometryMismatch(
            f"grid geometry differs: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing_mm} vs {b.spacing_mm}, origin {a.origin_mm} vs {b.origin_mm}"
        )


# ---------------------------------------------------------------------------
# Resampling


def _factors(U, z_factor):
    if isinstance(U, bool) or int(U) != U or U < 1:
        raise InvalidArgument(f"scaling factor U must be a positive integer, got {U!r}")
    z = U if z_factor is None else z_factor
    if isinstance(z, bool) or int(z) != z or z < 1:
        raise InvalidArgument(f"z_factor must be a positive integer, got {z_factor!r}")
    return int(U), int(U), int(z)


def _catmull_rom(t: np.ndarray) -> tuple[np.ndarray, ...]:
    t2 = t * t
    t3 = t2 * t
    return (
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    )


def _upsample_axis(a: np.ndarray, axis: int, f: int) -> np.ndarray:
    if f == 1:
        return a
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    # two ghost cells per side, linear extrapolation so ramps survive the edge
    if n >= 2:
        d0 = a[1] - a[0]
        d1 = a[-1] - a[-2]
    else:
        d0 = d1 = np.zeros_like(a[0])
    padded = np.concatenate(
        [(a[0] - 2 * d0)[None], (a[0] - d0)[None], a, (a[-1] + d1)[None], (a[-1] + 2 * d1)[None]]
    )
    j = np.arange(n * f)
    num = 2 * j + 1 - f
    i0 = num // (2 * f)
    t = (num - 2 * f * i0) / (2.0 * f)
    w = _catmull_rom(t)
    shape = (-1,) + (1,) * (a.ndim - 1)
    out = np.zeros((n * f,) + a.shape[1:])
    for k in range(4):
        out += w[k].reshape(shape) * padded[i0 + 1 + k]
    return np.moveaxis(out, 0, axis)


def upsample_labels(mask: LabelGrid3, U: int, z_factor: int | None = None) -> LabelGrid3:
    """Nearest-neighbour label upsampling matching :func:`resample_bicubic`."""
    fx, fy, fz = _factors(U, z_factor)
    lab = mask.labels
    lab = np.repeat(np.repeat(np.repeat(lab, fx, axis=0), fy, axis=1), fz, axis=2)
    spacing, origin = _upsampled_geometry(mask.spacing_mm, mask.origin_mm, (fx, fy, fz))
    return LabelGrid3(lab, spacing, origin)


def _upsampled_geometry(spacing, origin, factors):
    new_spacing = tuple(s / f for s, f in zip(spacing, factors))
    new_origin = tuple(o + (0.5 / f - 0.5) * s for o, s, f in zip(origin, spacing, factors))
    return new_spacing, new_origin


def resample_bicubic(
    grid: ScalarGrid3,
    mask: LabelGrid3,
    U: int,
    *,
    z_factor: int | None = None,
    exclude_necrosis: bool = False,
) -> ScalarGrid3:
    """Upsample a masked grid by ``U`` with separable Catmull-Rom cubics.

    Output voxel ``j`` along an axis samples the input at index
    ``(j + 0.5) / U - 0.5`` so the field of view is preserved.  Only voxels
    inside the tumour region act as sources; every other voxel is first
    replaced by its nearest source value.  Output voxels whose upsampled
    label is outside the tumour are NaN.

    Parameters
    ----------
    grid, mask
        Input map and its label grid (same geometry).
    U
        In-plane scaling factor.
    z_factor
        Factor along z; defaults to ``U``.  Use 1 for per-slice work.
    exclude_necrosis
        Treat necrosis voxels as missing sources instead of using their
        stored value.
    """
    factors = _factors(U, z_factor)
    check_geometry(grid, mask)
    values = grid.values
    source = mask.region() & np.isfinite(values)
    if exclude_necrosis:
        source &= mask.labels != NECROSIS
    if not source.any():
        raise EmptyMask("no tumour voxel with a finite value to interpolate from")
    if not source.all():
        idx = ndimage.distance_transform_edt(
            ~source, sampling=grid.spacing_mm, return_distances=False, return_indices=True
        )
        values = values[tuple(idx)]
    out = values
    for axis, f in enumerate(factors):
        out = _upsample_axis(out, axis, f)
    fine = upsample_labels(mask, factors[0], factors[2])
    out = np.where(fine.region(), out, np.nan)
    return ScalarGrid3(out, fine.spacing_mm, fine.origin_mm, grid.unit)


# ---------------------------------------------------------------------------
# Histograms


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    n_total: float = field(default=None)

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if edges.ndim != 1 or len(edges) != len(counts) + 1:
            raise InvalidArgument("need len(bin_edges) == len(counts) + 1")
        if not np.all(np.diff(edges) > 0):
            raise InvalidArgument("bin edges must be strictly increasing")
        if (counts < 0).any():
            raise InvalidArgument("counts must be non-negative")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)
        n = float(counts.sum()) if self.n_total is None else float(self.n_total)
        object.__setattr__(self, "n_total", n)

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def degenerate(self) -> bool:
        return self.n_total <= 0

    def normalized(self) -> np.ndarray:
        if self.degenerate:
            raise InsufficientData("cannot normalise an empty histogram")
        return self.counts / self.n_total


def fd_bin_width(values: Sequence[float]) -> float:
    """Freedman-Diaconis width ``2 IQR n^(-1/3)`` with type-7 quartiles."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size < 4:
        raise InsufficientData(f"Freedman-Diaconis rule needs >= 4 values, got {v.size}")
    q1, q3 = np.percentile(v, [25.0, 75.0])
    return float(2.0 * (q3 - q1) * v.size ** (-1.0 / 3.0))


def histogram(values: Sequence[float], bin_width: float, range: tuple[float, float]) -> Histogram:
    """Fixed-width histogram; out-of-range values are clipped into the end bins."""
    if not bin_width > 0:
        raise InvalidArgument(f"bin_width must be > 0, got {bin_width}")
    lo, hi = float(range[0]), float(range[1])
    if not lo < hi:
        raise InvalidArgument(f"range must satisfy min < max, got {range}")
    n_bins = max(1, int(math.ceil((hi - lo) / bin_width)))
    edges = lo + bin_width * np.arange(n_bins + 1)
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    idx = np.clip(np.floor((v - lo) / bin_width).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    hist = Histogram(edges, counts, float(v.size))
    if hist.degenerate:
        log.warning("histogram built from zero values")
    return hist


def shared_histograms(original, interpolated, bin_width: float | None = None):
    """Histograms of original (Q) and interpolated (P) values on common bins.

    The range is the min/max of the original values and the default width
    is the Freedman-Diaconis width of the original values.
    """
    q = np.asarray(original, dtype=np.float64).ravel()
    q = q[np.isfinite(q)]
    if bin_width is None:
        bin_width = fd_bin_width(q)
    lo, hi = float(q.min()), float(q.max())
    if not bin_width > 0 or not lo < hi:
        raise InsufficientData("original values are degenerate; cannot build shared bins")
    return histogram(q, bin_width, (lo, hi)), histogram(interpolated, bin_width, (lo, hi))


def kl_divergence(P: Histogram, Q: Histogram) -> float:
    """Kullback-Leibler divergence ``sum P log2(P/Q)`` in bits.

    When some bin has ``P > 0`` but ``Q == 0`` both histograms get additive
    smoothing of ``1 / (10 n_total)`` per bin before renormalising.
    """
    if P.bin_edges.shape != Q.bin_edges.shape or not np.array_equal(P.bin_edges, Q.bin_edges):
        raise BinsMismatch("KL divergence needs identical bin edges")
    p = P.normalized()
    q = Q.normalized()
    if ((p > 0) & (q == 0)).any():
        p = _smooth(p, P.n_total)
        q = _smooth(q, Q.n_total)
    nz = p > 0
    kl = float(np.sum(p[nz] * np.log2(p[nz] / q[nz])))
    return max(kl, 0.0)


def _smooth(p: np.ndarray, n_total: float) -> np.ndarray:
    eps = 1.0 / (10.0 * n_total)
    return (p + eps) / (1.0 + eps * p.size)


# ---------------------------------------------------------------------------
# ROIs


@dataclass(frozen=True)
class ROIRect2:
    """Rectangle on one slice; ``direction`` is the long axis."""

    slice_index: int
    center_mm: tuple
    direction: tuple
    width_mm: float
    length_mm: float

    def __post_init__(self):
        d = tuple(float(v) for v in self.direction)
        if abs(math.hypot(*d) - 1.0) > 1e-9:
            raise InvalidArgument(f"ROI direction must be a unit vector, got {d}")
        if not (self.width_mm > 0 and self.length_mm > 0):
            raise InvalidArgument("ROI width and length must be > 0")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "center_mm", tuple(float(v) for v in self.center_mm))

    def corners(self) -> np.ndarray:
        cx, cy = self.center_mm
        dx, dy = self.direction
        hl, hw = 0.5 * self.length_mm, 0.5 * self.width_mm
        return np.array(
            [
                [cx - hl * dx + hw * dy, cy - hl * dy - hw * dx],
                [cx + hl * dx + hw * dy, cy + hl * dy - hw * dx],
                [cx + hl * dx - hw * dy, cy + hl * dy + hw * dx],
                [cx - hl * dx - hw * dy, cy - hl * dy + hw * dx],
            ]
        )

    def contains(self, x, y) -> np.ndarray:
        dx = np.asarray(x) - self.center_mm[0]
        dy = np.asarray(y) - self.center_mm[1]
        u = dx * self.direction[0] + dy * self.direction[1]
        v = -dx * self.direction[1] + dy * self.direction[0]
        return (np.abs(u) <= 0.5 * self.length_mm + ROI_EPS) & (np.abs(v) <= 0.5 * self.width_mm + ROI_EPS)

    def to_dict(self) -> dict:
        return {
            "slice_index": self.slice_index,
            "center_mm": list(self.center_mm),
            "direction": list(self.direction),
            "width_mm": self.width_mm,
            "length_mm": self.length_mm,
        }


def roi_cells(sl: Slice2D, roi: ROIRect2) -> tuple[np.ndarray, np.ndarray]:
    """Indices ``(i, j)`` of cells whose centres fall inside the rectangle."""
    corners = roi.corners()
    sx, sy = sl.spacing_mm
    ox, oy = sl.origin_mm
    nx, ny = sl.shape
    i_lo = max(int(math.floor((corners[:, 0].min() - ox) / sx)) - 1, 0)
    i_hi = min(int(math.ceil((corners[:, 0].max() - ox) / sx)) + 1, nx - 1)
    j_lo = max(int(math.floor((corners[:, 1].min() - oy) / sy)) - 1, 0)
    j_hi = min(int(math.ceil((corners[:, 1].max() - oy) / sy)) + 1, ny - 1)
    if i_lo > i_hi or j_lo > j_hi:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    i = np.arange(i_lo, i_hi + 1)[:, None]
    j = np.arange(j_lo, j_hi + 1)[None, :]
    inside = roi.contains(ox + i * sx, oy + j * sy)
    ii, jj = np.nonzero(inside)
    return ii + i_lo, jj + j_lo


def roi_mean_slice(sl: Slice2D, roi: ROIRect2) -> float:
    ii, jj = roi_cells(sl, roi)
    vals = sl.values[ii, jj]
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise EmptyROI(f"ROI at {roi.center_mm} covers no finite cell")
    return float(np.mean(vals))


def roi_mean_d(grid: ScalarGrid3, roi: ROIRect2) -> float:
    """Mean of the finite cell values whose centres fall inside ``roi``."""
    if not 0 <= roi.slice_index < grid.dims[2]:
        raise InvalidArgument(f"slice index {roi.slice_index} out of range")
    return roi_mean_slice(grid.slice2d(roi.slice_index), roi)


# ---------------------------------------------------------------------------
# Mask geometry


def _region_slice(mask: LabelGrid3, k: int) -> np.ndarray:
    if not 0 <= k < mask.dims[2]:
        raise InvalidArgument(f"slice index {k} out of range")
    region = mask.labels[:, :, k] != OUTSIDE
    if not region.any():
        raise EmptyMask(f"slice {k} has no tumour voxel")
    return region


def distance_to_boundary(mask: LabelGrid3, slice: int) -> np.ndarray:
    """Centre-to-centre distance (mm) from each tumour cell to the nearest
    non-tumour cell; cells beyond the array border count as non-tumour.
    Non-tumour cells get 0."""
    return distance_field(_region_slice(mask, slice), mask.spacing_mm[:2])


def distance_field(region: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    padded = np.pad(region, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=tuple(spacing))
    return dist[1:-1, 1:-1]


def largest_component(region: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(region)
    if n <= 1:
        return region.copy()
    sizes = np.bincount(lab.ravel())[1:]
    log.warning("tumour slice has %d components; keeping the largest", n)
    return lab == (int(np.argmax(sizes)) + 1)


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def boundary_contour(mask: LabelGrid3, slice: int, spacing_mm: float = 1.0) -> np.ndarray:
    """Closed tumour outline resampled to uniform arc length.

    Returns an ``(n, 2)`` array of world points (first point not repeated),
    ordered clockwise in the x-right / y-up frame and starting at the
    leftmost crossing of the outline with the centroid row ("9 o'clock").
    """
    region = _region_slice(mask, slice)
    return contour_points(region, mask.spacing_mm[:2], mask.origin_mm[:2], spacing_mm)


def contour_points(region, spacing, origin, spacing_mm: float = 1.0) -> np.ndarray:
    from skimage import measure

    if not spacing_mm > 0:
        raise InvalidArgument("contour spacing must be > 0")
    if not region.any():
        raise EmptyMask("empty tumour region")
    region = largest_component(region)
    # light smoothing removes the marching-squares staircase bias in length
    padded = ndimage.gaussian_filter(np.pad(region.astype(np.float64), 3), 1.0, mode="constant")
    contours = measure.find_contours(padded, 0.5)
    line = max(contours, key=len)
    pts = np.column_stack(
        [origin[0] + (line[:, 0] - 3) * spacing[0], origin[1] + (line[:, 1] - 3) * spacing[1]]
    )
    if np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    if _signed_area(pts) > 0:
        pts = pts[::-1]

    ii, jj = np.nonzero(region)
    yc = origin[1] + jj.mean() * spacing[1]
    pts = _rotate_to_start(pts, yc)

    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(3, int(round(total / spacing_mm)))
    target = np.arange(n) * (total / n)
    return np.column_stack([np.interp(target, s, closed[:, 0]), np.interp(target, s, closed[:, 1])])


def _rotate_to_start(pts: np.ndarray, yc: float) -> np.ndarray:
    nxt = np.roll(pts, -1, axis=0)
    y0, y1 = pts[:, 1] - yc, nxt[:, 1] - yc
    crossing = (y0 * y1 <= 0) & (y0 != y1)
    if not crossing.any():
        k = int(np.lexsort((pts[:, 0], np.abs(pts[:, 1] - yc)))[0])
        return np.roll(pts, -k, axis=0)
    idx = np.nonzero(crossing)[0]
    t = y0[idx] / (y0[idx] - y1[idx])
    xs = pts[idx, 0] + t * (nxt[idx, 0] - pts[idx, 0])
    best = int(np.argmin(xs))
    k = int(idx[best])
    start = np.array([xs[best], yc])
    rest = np.roll(pts, -(k + 1), axis=0)
    if np.allclose(rest[-1], start):
        rest = rest[:-1]
    return np.vstack([start, rest])


def kl_convergence(
    grid: ScalarGrid3,
    mask: LabelGrid3,
    u_values: Sequence[int],
    slice_index: int | None = None,
) -> list[dict]:
    """KL divergence and moments of the interpolated vital-tumour D values per ``U``.

    Each slice is upsampled in-plane only.  The original histogram fixes
    the shared bins, so every row is comparable.
    """
    check_geometry(grid, mask)
    k = grid.dims[2] // 2 if slice_index is None else slice_index
    g = ScalarGrid3(grid.values[:, :, k : k + 1], grid.spacing_mm, grid.origin_mm, grid.unit)
    m = LabelGrid3(mask.labels[:, :, k : k + 1], mask.spacing_mm, mask.origin_mm)
    orig = g.values[(m.labels == TUMOR) & np.isfinite(g.values)]
    rows = []
    for U in u_values:
        fine = resample_bicubic(g, m, int(U), z_factor=1)
        lab = upsample_labels(m, int(U), 1)
        vals = fine.values[(lab.labels == TUMOR) & np.isfinite(fine.values)]
        Q, P = shared_histograms(orig, vals)
        rows.append(
            {
                "U": int(U),
                "kl_bits": kl_divergence(P, Q),
                "mean": float(np.mean(vals)),
                "sd": float(np.std(vals, ddof=1)),
                "n": int(vals.size),
                "mean_orig": float(np.mean(orig)),
                "sd_orig": float(np.std(orig, ddof=1)),
            }
        )
    return rows
