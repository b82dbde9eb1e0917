"""Superpixel / supervoxel partitioning and candidate biopsy region selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InfeasibleSelection, InsufficientData, InvalidArgument
from .grid import FAT, NECROSIS, OUTSIDE, LabelGrid3, ScalarGrid3, Slice2D, check_geometry, distance_field

log = logging.getLogger(__name__)

REF_SUPERPIXEL_MM2 = 6.41
REF_SUPERVOXEL_MM3 = 4.23
REF_MIN_BOUNDARY_MM = 2.5
COMPACTNESS = 10.0
N_ITER = 10
LLOYD_PASSES = 5
BALANCE_ITER = 10
BALANCE_GAIN = 0.3
SKEW_THRESHOLD = 0.5
PERCENTILES = (2.0, 98.0)
MIN_VALUES = 50


@dataclass(frozen=True)
class Region:
    id: int
    mean_d: float
    var_d: float
    size: float
    n_cells: int
    centroid_mm: tuple
    min_boundary_distance_mm: float
    n_necrosis: int = 0
    n_fat: int = 0
    excluded: bool = False
    reason: str = ""

    def to_row(self) -> dict:
        row = {
            "id": self.id,
            "mean_d": self.mean_d,
            "var_d": self.var_d,
            "size": self.size,
            "n_cells": self.n_cells,
        }
        for axis, c in zip("xyz", self.centroid_mm):
            row[f"centroid_{axis}_mm"] = c
        row.update(
            min_boundary_distance_mm=self.min_boundary_distance_mm,
            n_necrosis=self.n_necrosis,
            n_fat=self.n_fat,
            excluded=int(self.excluded),
            reason=self.reason,
        )
        return row

    @classmethod
    def from_row(cls, row: dict) -> "Region":
        """Inverse of :meth:`to_row`; accepts the string values of a CSV reader."""

        def num(key):
            v = row.get(key, "")
            return float("nan") if v in ("", None) else float(v)

        centroid = tuple(num(f"centroid_{a}_mm") for a in "xyz" if f"centroid_{a}_mm" in row)
        return cls(
            int(row["id"]),
            num("mean_d"),
            num("var_d"),
            num("size"),
            int(row["n_cells"]),
            centroid,
            num("min_boundary_distance_mm"),
            int(row.get("n_necrosis") or 0),
            int(row.get("n_fat") or 0),
            str(row.get("excluded", "0")).lower() in ("1", "true"),
            row.get("reason") or "",
        )


@dataclass(frozen=True, eq=False)
class SuperpixelPartition:
    """Region-label array (``-1`` outside the tumour) plus per-region stats."""

    region_labels: np.ndarray
    regions: tuple
    spacing_mm: tuple
    origin_mm: tuple

    @property
    def ndim(self) -> int:
        return self.region_labels.ndim

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def region(self, rid: int) -> Region:
        return self.regions[rid]

    def eligible(self) -> list[Region]:
        return [r for r in self.regions if not r.excluded]

    def as_slice(self) -> Slice2D:
        if self.ndim != 2:
            raise InvalidArgument("partition is not 2d")
        return Slice2D(self.region_labels, self.spacing_mm, self.origin_mm)

    def relabeled(self, perm: Sequence[int]) -> "SuperpixelPartition":
        """Copy with region ``i`` renamed ``perm[i]`` (used by invariance checks)."""
        perm = np.asarray(perm)
        lab = np.where(self.region_labels >= 0, perm[np.maximum(self.region_labels, 0)], -1)
        regions = sorted((replace(r, id=int(perm[r.id])) for r in self.regions), key=lambda r: r.id)
        return SuperpixelPartition(lab, tuple(regions), self.spacing_mm, self.origin_mm)


@dataclass(frozen=True)
class OptimalDTargets:
    n_biopsy: int
    targets: tuple
    mode: str
    d_min: float
    d_max: float
    d_median: float

    @property
    def spacing(self) -> float:
        if self.n_biopsy < 2:
            return self.d_max - self.d_min
        return (self.targets[-1] - self.targets[0]) / (self.n_biopsy - 1)

    def to_dict(self) -> dict:
        return {
            "n_biopsy": self.n_biopsy,
            "targets": list(self.targets),
            "mode": self.mode,
            "d_min": self.d_min,
            "d_max": self.d_max,
            "d_median": self.d_median,
        }


@dataclass(frozen=True)
class Candidate:
    target_index: int
    target: float
    region: Region

    @property
    def deviation(self) -> float:
        return abs(self.region.mean_d - self.target)


# ---------------------------------------------------------------------------
# SLIC-style clustering


def _farthest_point_seeds(pts: np.ndarray, k: int) -> np.ndarray:
    centroid = pts.mean(axis=0)
    first = int(np.argmin(np.sum((pts - centroid) ** 2, axis=1)))
    chosen = [first]
    dist = np.sum((pts - pts[first]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return pts[np.array(chosen)].copy()


def _lloyd(pts: np.ndarray, centers: np.ndarray, passes: int) -> np.ndarray:
    k = centers.shape[0]
    for _ in range(passes):
        _, lab = cKDTree(centers).query(pts)
        counts = np.bincount(lab, minlength=k)
        keep = counts > 0
        for d in range(pts.shape[1]):
            s = np.bincount(lab, weights=pts[:, d], minlength=k)
            centers[keep, d] = s[keep] / counts[keep]
    return centers


def _slic(pts: np.ndarray, d: np.ndarray, k: int, step: float, compactness: float, n_iter: int) -> np.ndarray:
    """Local k-means on ``(m D / sigma_D, x / S, ...)``; returns a label per point."""
    sigma = float(np.std(d))
    # rounding noise in a constant map must not count as contrast
    flat = sigma <= 1e-9 * float(np.max(np.abs(d)))
    wd = 0.0 if flat else compactness / sigma
    centers = _lloyd(pts, _farthest_point_seeds(pts, k), LLOYD_PASSES)
    tree = cKDTree(centers)
    _, lab = tree.query(pts)
    cd = np.bincount(lab, weights=d, minlength=k) / np.maximum(np.bincount(lab, minlength=k), 1)
    n_near = min(k, 3 ** pts.shape[1])
    # additive per-cluster offsets steer cluster sizes toward equal counts
    w = np.zeros(k)
    mean_count = len(pts) / k
    for it in range(n_iter + BALANCE_ITER):
        _, near = tree.query(pts, k=n_near)
        near = near.reshape(len(pts), -1)
        spatial = np.sum((pts[:, None, :] - centers[near]) ** 2, axis=-1) / step**2
        feat = (wd * (d[:, None] - cd[near])) ** 2
        cost = spatial + feat - w[near]
        best = np.argmin(cost, axis=1)
        lab = near[np.arange(len(pts)), best]
        counts = np.bincount(lab, minlength=k)
        empty = np.nonzero(counts == 0)[0]
        if empty.size:
            # re-seed starved clusters at the worst-fitting cells
            worst = np.argsort(-cost[np.arange(len(pts)), best], kind="stable")[: empty.size]
            lab[worst] = empty
            counts = np.bincount(lab, minlength=k)
            cd[empty] = d[worst]
        keep = counts > 0
        for ax in range(pts.shape[1]):
            s = np.bincount(lab, weights=pts[:, ax], minlength=k)
            centers[keep, ax] = s[keep] / counts[keep]
        cd[keep] = np.bincount(lab, weights=d, minlength=k)[keep] / counts[keep]
        w += BALANCE_GAIN * (1.0 - counts / mean_count)
        tree = cKDTree(centers)
    return lab


def _enforce_connectivity(labels: np.ndarray, region: np.ndarray, spacing, min_cells: int) -> np.ndarray:
    """Split labels into connected pieces; small pieces join the nearest kept cell."""
    for _ in range(4):
        out = np.full(labels.shape, -1, dtype=np.int64)
        orphan = np.zeros(labels.shape, dtype=bool)
        next_id = 0
        changed = False
        objs = ndimage.find_objects(labels + 1)
        for lab, sl in enumerate(objs):
            if sl is None:
                continue
            sub = labels[sl] == lab
            comp, n = ndimage.label(sub)
            if n == 1:
                out[sl][sub] = next_id
                next_id += 1
                continue
            changed = True
            sizes = np.bincount(comp.ravel())[1:]
            biggest = int(np.argmax(sizes)) + 1
            for c in range(1, n + 1):
                piece = comp == c
                if c == biggest or sizes[c - 1] >= min_cells:
                    out[sl][piece] = next_id
                    next_id += 1
                else:
                    orphan[sl] |= piece
        if orphan.any():
            idx = ndimage.distance_transform_edt(
                ~(out >= 0), sampling=spacing, return_distances=False, return_indices=True
            )
            out[orphan] = out[tuple(i[orphan] for i in idx)]
        labels = out
        if not changed:
            break
    # consecutive ids in raster order of first appearance
    flat = labels[region]
    _, first = np.unique(flat, return_index=True)
    order = np.unique(flat)[np.argsort(first)]
    remap = np.full(int(labels.max()) + 1, -1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    final = np.full(labels.shape, -1, dtype=np.int64)
    final[region] = remap[labels[region]]
    return final


def _region_stats(
    labels: np.ndarray,
    values: np.ndarray,
    tissue: np.ndarray,
    spacing,
    origin,
    min_boundary_mm: float,
) -> tuple[Region, ...]:
    region = labels >= 0
    dist = distance_field(region, spacing) if labels.ndim == 2 else _distance_3d(region, spacing)
    lab = labels[region]
    k = int(lab.max()) + 1
    vals = values[region]
    finite = np.isfinite(vals)
    vz = np.where(finite, vals, 0.0)
    nf = np.bincount(lab, weights=finite.astype(float), minlength=k)
    n = np.bincount(lab, minlength=k)
    s1 = np.bincount(lab, weights=vz, minlength=k)
    mean = np.where(nf > 0, s1 / np.maximum(nf, 1), np.nan)
    dev = np.where(finite, vz - mean[lab], 0.0)
    var = np.where(nf > 0, np.bincount(lab, weights=dev * dev, minlength=k) / np.maximum(nf, 1), np.nan)
    idx = np.nonzero(region)
    cent = []
    for ax in range(labels.ndim):
        coord = origin[ax] + idx[ax] * spacing[ax]
        cent.append(np.bincount(lab, weights=coord, minlength=k) / n)
    mind = np.full(k, np.inf)
    np.minimum.at(mind, lab, dist[region])
    tis = tissue[region]
    n_nec = np.bincount(lab, weights=(tis == NECROSIS).astype(float), minlength=k).astype(int)
    n_fat = np.bincount(lab, weights=(tis == FAT).astype(float), minlength=k).astype(int)
    cell = float(np.prod(spacing))
    out = []
    for i in range(k):
        reasons = _exclusion_reasons(float(mind[i]), int(n_nec[i]), int(n_fat[i]), min_boundary_mm)
        # per-region mean straight from the member cells for exactness
        members = vals[(lab == i) & finite]
        m = float(np.mean(members)) if members.size else float("nan")
        out.append(
            Region(
                id=i,
                mean_d=m,
                var_d=float(var[i]),
                size=float(n[i]) * cell,
                n_cells=int(n[i]),
                centroid_mm=tuple(float(c[i]) for c in cent),
                min_boundary_distance_mm=float(mind[i]),
                n_necrosis=int(n_nec[i]),
                n_fat=int(n_fat[i]),
                excluded=bool(reasons),
                reason="+".join(reasons),
            )
        )
    return tuple(out)


def _exclusion_reasons(min_dist: float, n_nec: int, n_fat: int, min_boundary_mm: float) -> list[str]:
    reasons = []
    if not min_dist > min_boundary_mm:
        reasons.append("boundary")
    if n_nec:
        reasons.append("necrosis")
    if n_fat:
        reasons.append("fat")
    return reasons


def _distance_3d(region: np.ndarray, spacing) -> np.ndarray:
    padded = np.pad(region, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded, sampling=tuple(spacing))[1:-1, 1:-1, 1:-1]


def _partition(values, tissue, spacing, origin, target, compactness, n_iter, min_boundary_mm):
    if not target > 0:
        raise InvalidArgument(f"target region size must be > 0, got {target}")
    region = tissue != OUTSIDE
    if not region.any():
        raise InsufficientData("no tumour cells to partition")
    cell = float(np.prod(spacing))
    total = region.sum() * cell
    k = int(round(total / target))
    if k < 1:
        log.warning("tumour (%.3g) smaller than one region (%.3g); single region", total, target)
        k = 1
    k = min(k, int(region.sum()))
    idx = np.nonzero(region)
    pts = np.column_stack([origin[a] + idx[a] * spacing[a] for a in range(values.ndim)])
    d = values[region]
    d = np.where(np.isfinite(d), d, np.nanmean(d) if np.isfinite(d).any() else 0.0)
    step = (total / k) ** (1.0 / values.ndim)
    lab = _slic(pts, d, k, step, compactness, n_iter) if k > 1 else np.zeros(len(pts), dtype=np.int64)
    labels = np.full(values.shape, -1, dtype=np.int64)
    labels[region] = lab
    min_cells = max(1, int(0.5 * target / cell))
    labels = _enforce_connectivity(labels, region, spacing, min_cells)
    regions = _region_stats(labels, values, tissue, spacing, origin, min_boundary_mm)
    return SuperpixelPartition(labels, regions, tuple(spacing), tuple(origin))


def superpixels_2d(
    dmap_slice: Slice2D,
    mask_slice: Slice2D,
    target_area_mm2: float = REF_SUPERPIXEL_MM2,
    *,
    compactness: float = COMPACTNESS,
    n_iter: int = N_ITER,
    min_boundary_mm: float = REF_MIN_BOUNDARY_MM,
) -> SuperpixelPartition:
    """SLIC-style superpixels of one D-map slice.

    ``mask_slice`` carries tissue labels; every non-outside cell is
    partitioned.  The region count is ``round(tumour area / target)``.
    """
    if dmap_slice.shape != mask_slice.shape:
        raise InvalidArgument("D-map and mask slices differ in shape")
    return _partition(
        np.asarray(dmap_slice.values, dtype=np.float64),
        np.asarray(mask_slice.values),
        dmap_slice.spacing_mm,
        dmap_slice.origin_mm,
        target_area_mm2,
        compactness,
        n_iter,
        min_boundary_mm,
    )


def supervoxels_3d(
    dmap: ScalarGrid3,
    mask: LabelGrid3,
    target_volume_mm3: float = REF_SUPERVOXEL_MM3,
    *,
    compactness: float = COMPACTNESS,
    n_iter: int = N_ITER,
    min_boundary_mm: float = REF_MIN_BOUNDARY_MM,
) -> SuperpixelPartition:
    """3d analogue of :func:`superpixels_2d` with anisotropic spacing in mm."""
    check_geometry(dmap, mask)
    return _partition(
        dmap.values,
        mask.labels,
        dmap.spacing_mm,
        dmap.origin_mm,
        target_volume_mm3,
        compactness,
        n_iter,
        min_boundary_mm,
    )


# ---------------------------------------------------------------------------
# Optimal D targets


def sample_skewness(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    dv = v - v.mean()
    m2 = np.mean(dv * dv)
    if m2 <= 0:
        return 0.0
    return float(np.mean(dv**3) / m2**1.5)


def targets_from_stats(
    d_min: float, d_max: float, d_median: float, n_biopsy: int, mode: str, d_mean: float | None = None
) -> OptimalDTargets:
    """Targets from summary statistics; ``mode`` is ``symmetric`` or ``asymmetric``."""
    if isinstance(n_biopsy, bool) or int(n_biopsy) != n_biopsy or n_biopsy < 1:
        raise InvalidArgument(f"n_biopsy must be a positive integer, got {n_biopsy!r}")
    if mode not in ("symmetric", "asymmetric"):
        raise InvalidArgument(f"mode must be symmetric or asymmetric, got {mode!r}")
    if not d_min <= d_max:
        raise InvalidArgument("d_min must not exceed d_max")
    n = int(n_biopsy)
    tag = "symmetric_eq4" if mode == "symmetric" else "asymmetric_eq5"
    if n == 1:
        if mode == "symmetric":
            centre = 0.5 * (d_min + d_max) if d_mean is None else d_mean
        else:
            centre = d_median
        return OptimalDTargets(1, (float(centre),), tag, d_min, d_max, d_median)
    if mode == "symmetric":
        lo, hi = d_min, d_max
    else:
        lo, hi = _asymmetric_span(d_min, d_max, d_median)
    step = (hi - lo) / (n - 1)
    t = lo + np.arange(n) * step
    t[-1] = hi
    t = np.clip(t, lo, hi)
    return OptimalDTargets(n, tuple(float(x) for x in t), tag, float(d_min), float(d_max), float(d_median))


def _asymmetric_span(d_min, d_max, d_median):
    """Endpoints of the progression centred on the median.

    The lower end is ``Md - min(|Md - Dmin|, |Md - Dmax|)`` and the upper
    end mirrors it about the median.  When both distances agree to rounding
    the data are symmetric and the Dmin/Dmax endpoints are used directly.
    """
    left = abs(d_median - d_min)
    right = abs(d_max - d_median)
    tol = 4.0 * np.finfo(float).eps * max(abs(d_min), abs(d_max), abs(d_median))
    if abs(left - right) <= tol:
        return d_min, d_max
    if left < right:
        return d_min, 2.0 * d_median - d_min
    return 2.0 * d_median - d_max, d_max


def optimal_d_values(
    d_values,
    n_biopsy: int,
    mode: str = "auto",
    *,
    skew_threshold: float = SKEW_THRESHOLD,
    percentiles: tuple = PERCENTILES,
) -> OptimalDTargets:
    """Target D-values for ``n_biopsy`` biopsies from a D distribution.

    ``d_min``/``d_max`` are type-7 percentiles (2nd/98th by default).  In
    ``auto`` mode the median-centred rule is used when the sample skewness
    exceeds ``skew_threshold`` in magnitude.
    """
    if isinstance(n_biopsy, bool) or int(n_biopsy) != n_biopsy or n_biopsy < 1:
        raise InvalidArgument(f"n_biopsy must be a positive integer, got {n_biopsy!r}")
    v = np.asarray(d_values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size < MIN_VALUES:
        raise InsufficientData(f"need >= {MIN_VALUES} D-values, got {v.size}")
    if mode not in ("auto", "symmetric", "asymmetric"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    d_min, d_max = (float(p) for p in np.percentile(v, percentiles))
    d_med = float(np.median(v))
    if mode == "auto":
        mode = "asymmetric" if abs(sample_skewness(v)) > skew_threshold else "symmetric"
    return targets_from_stats(d_min, d_max, d_med, n_biopsy, mode, d_mean=float(v.mean()))


# ---------------------------------------------------------------------------
# Candidate selection


def eligibility(partition: SuperpixelPartition, min_boundary_mm: float = REF_MIN_BOUNDARY_MM) -> list[Region]:
    """Regions re-flagged for the given boundary threshold."""
    out = []
    for r in partition.regions:
        reasons = _exclusion_reasons(r.min_boundary_distance_mm, r.n_necrosis, r.n_fat, min_boundary_mm)
        if not math.isfinite(r.mean_d):
            reasons.append("no-data")
        out.append(replace(r, excluded=bool(reasons), reason="+".join(reasons)))
    return out


def select_candidates(
    partition: SuperpixelPartition,
    targets: OptimalDTargets,
    min_boundary_mm: float = REF_MIN_BOUNDARY_MM,
    regions: Sequence[Region] | None = None,
) -> list[Candidate]:
    """One distinct eligible region per target, closest mean D first.

    Pairs are taken greedily in order of ``|mean_d - target|`` with ties
    broken by larger boundary distance and then lower region id, so a region
    claimed by a better-fitting target is unavailable to the others.
    ``regions`` restricts the pool (it is re-checked for eligibility).
    """
    flagged = eligibility(partition, min_boundary_mm)
    if regions is not None:
        allowed = {r.id for r in regions}
        flagged = [r for r in flagged if r.id in allowed]
    pool = [r for r in flagged if not r.excluded]
    n = targets.n_biopsy
    if len(pool) < n:
        counts: dict = {}
        for r in flagged:
            for reason in r.reason.split("+") if r.reason else []:
                counts[reason] = counts.get(reason, 0) + 1
        raise InfeasibleSelection(
            f"{len(pool)} eligible regions for {n} targets",
            eligible=len(pool),
            required=n,
            total=len(flagged),
            excluded=counts,
        )
    return assign_targets(pool, targets.targets)


def assign_targets(pool: Sequence[Region], targets: Sequence[float]) -> list[Candidate]:
    """Greedy distinct assignment of eligible regions to targets."""
    n = len(targets)
    if len(pool) < n:
        raise InfeasibleSelection(f"{len(pool)} eligible regions for {n} targets", eligible=len(pool), required=n)
    means = np.array([r.mean_d for r in pool])
    bd = np.array([r.min_boundary_distance_mm for r in pool])
    ids = np.array([r.id for r in pool])
    tv = np.asarray(targets, dtype=np.float64)
    dev = np.abs(means[:, None] - tv[None, :])
    ri, ti = np.meshgrid(np.arange(len(pool)), np.arange(n), indexing="ij")
    ri, ti = ri.ravel(), ti.ravel()
    order = np.lexsort((ti, ids[ri], -bd[ri], dev.ravel()))
    used_r, chosen = set(), {}
    for o in order:
        r, t = int(ri[o]), int(ti[o])
        if r in used_r or t in chosen:
            continue
        used_r.add(r)
        chosen[t] = r
        if len(chosen) == n:
            break
    return [Candidate(t, float(tv[t]), pool[chosen[t]]) for t in range(n)]
