"""Needle-path geometry, exhaustive intervention enumeration and guided search.

Everything here works on one 2d slice.  Angles are in degrees, measured
counter-clockwise from +x in the x-right / y-up frame; a path leaves its
access point along ``(cos a, sin a)``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

from .errors import InfeasiblePlan, InfeasibleSelection, InvalidArgument, SamplingFailed, TipOutside
from .grid import NECROSIS, OUTSIDE, TUMOR, ROIRect2, Slice2D, contour_points, roi_cells

log = logging.getLogger(__name__)

ANGLE_EPS = 1e-9


@dataclass(frozen=True)
class NeedleConstraints:
    fan_deg: float = 20.0
    max_depth_mm: float = 22.0
    depth_step_mm: float = 2.5
    min_depth_mm: float = 2.5
    access_spacing_mm: float = 1.0
    angle_step_deg: float = 5.0
    tip_width_mm: float = 0.5
    tip_length_mm: float = 2.5
    inward_probe_mm: float = 0.5
    allow_necrosis_traversal: bool = True

    def __post_init__(self):
        for name in (
            "fan_deg",
            "max_depth_mm",
            "depth_step_mm",
            "min_depth_mm",
            "access_spacing_mm",
            "angle_step_deg",
            "tip_width_mm",
            "tip_length_mm",
            "inward_probe_mm",
        ):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be > 0")
        if self.min_depth_mm > self.max_depth_mm:
            raise InvalidArgument("min_depth_mm must not exceed max_depth_mm")
        n = 360.0 / self.angle_step_deg
        if abs(n - round(n)) > 1e-9:
            raise InvalidArgument("angle_step_deg must divide 360")

    def depths(self) -> np.ndarray:
        n = int(math.floor((self.max_depth_mm - self.min_depth_mm) / self.depth_step_mm + 1e-9))
        return self.min_depth_mm + self.depth_step_mm * np.arange(n + 1)

    def angles(self) -> np.ndarray:
        return self.angle_step_deg * np.arange(int(round(360.0 / self.angle_step_deg)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NeedleConstraints":
        return cls(**d)


def direction(angle_deg: float) -> tuple[float, float]:
    a = math.radians(angle_deg)
    return math.cos(a), math.sin(a)


@dataclass(frozen=True)
class NeedlePath:
    access_mm: tuple
    angle_deg: float
    depth_mm: float
    tip_roi: ROIRect2

    @property
    def direction(self) -> tuple[float, float]:
        return direction(self.angle_deg)

    @property
    def tip_mm(self) -> tuple[float, float]:
        dx, dy = self.direction
        return self.access_mm[0] + self.depth_mm * dx, self.access_mm[1] + self.depth_mm * dy


def tip_roi(
    access_mm,
    angle_deg: float,
    depth_mm: float,
    constraints: NeedleConstraints = NeedleConstraints(),
    slice_index: int = 0,
    mask: Slice2D | None = None,
    allowed=(TUMOR,),
) -> ROIRect2:
    """Sampling rectangle whose distal edge sits at the needle tip.

    With ``mask`` given, every cell centre inside the rectangle must carry
    one of the ``allowed`` labels.
    """
    if depth_mm < constraints.tip_length_mm:
        raise TipOutside(f"depth {depth_mm} mm is shorter than the sampling window")
    dx, dy = direction(angle_deg)
    back = depth_mm - 0.5 * constraints.tip_length_mm
    roi = ROIRect2(
        slice_index,
        (access_mm[0] + back * dx, access_mm[1] + back * dy),
        (dx, dy),
        constraints.tip_width_mm,
        constraints.tip_length_mm,
    )
    if mask is not None:
        ii, jj = roi_cells(mask, roi)
        if ii.size == 0 or not np.isin(mask.values[ii, jj], allowed).all():
            raise TipOutside(f"sampling window at {roi.center_mm} leaves the tumour")
    return roi


@dataclass(frozen=True)
class Intervention:
    access_mm: tuple
    paths: tuple
    biopsy_ds: tuple = ()
    rhos: tuple = ()
    access_index: int = -1
    path_ids: tuple = ()
    score: float = float("nan")
    assignment: tuple = ()

    @property
    def n_biopsy(self) -> int:
        return len(self.paths)

    def to_dict(self) -> dict:
        out = {
            "access_index": self.access_index,
            "access_mm": list(self.access_mm),
            "paths": [],
            "score": None if math.isnan(self.score) else self.score,
        }
        for k, p in enumerate(self.paths):
            row = {"angle_deg": p.angle_deg, "depth_mm": p.depth_mm, "tip_roi": p.tip_roi.to_dict()}
            if self.biopsy_ds:
                row["d_value"] = self.biopsy_ds[k]
            if self.rhos:
                row["rho"] = self.rhos[k]
            if self.assignment:
                row["target_index"] = self.assignment[k]
            out["paths"].append(row)
        return out


@dataclass
class AccessPaths:
    """Admissible paths from one access point, ordered by (unwrapped angle, depth)."""

    index: int
    access_mm: tuple
    inward: np.ndarray
    angles: np.ndarray
    unwrapped: np.ndarray
    depths: np.ndarray
    rois: list
    means: dict = field(default_factory=dict)
    hits: list = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return len(self.angles)


@lru_cache(maxsize=256)
def _comb_table(m: int, r: int) -> np.ndarray:
    if r == 0:
        return np.zeros((1, 0), dtype=np.int64)
    if m < r:
        return np.zeros((0, r), dtype=np.int64)
    flat = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(m), r)), dtype=np.int64)
    return flat.reshape(-1, r)


def _unwrap(angles: np.ndarray) -> np.ndarray:
    """Shift angles so the largest circular gap sits at the wrap point."""
    if angles.size == 0:
        return angles.astype(np.float64)
    a = np.sort(np.mod(angles, 360.0))
    gaps = np.diff(np.concatenate([a, [a[0] + 360.0]]))
    start = a[(int(np.argmax(gaps)) + 1) % a.size]
    return start + np.mod(angles - start, 360.0)


class NeedlePlanner:
    """Path tables per access point on one slice.

    Parameters
    ----------
    labels
        Tissue-label slice the needle moves through (typically the
        upsampled mask).
    constraints
        Needle constraints.
    fields
        Optional named scalar slices (same geometry) averaged over every tip
        ROI, e.g. ``{"d": dmap_slice, "rho": density_slice}``.
    regions
        Optional region-label slice (``-1`` outside) used for hit tests.
    tip_labels
        Labels every tip-ROI cell must carry.
    """

    def __init__(
        self,
        labels: Slice2D,
        constraints: NeedleConstraints = NeedleConstraints(),
        fields: dict | None = None,
        regions: Slice2D | None = None,
        slice_index: int = 0,
        tip_labels=(TUMOR,),
        access_points: np.ndarray | None = None,
    ):
        self.labels = labels
        self.constraints = constraints
        self.fields = dict(fields or {})
        for name, f in self.fields.items():
            if f.shape != labels.shape:
                raise InvalidArgument(f"field {name!r} differs in shape from the label slice")
        if regions is not None and regions.shape != labels.shape:
            raise InvalidArgument("region slice differs in shape from the label slice")
        self.regions = regions
        self.slice_index = slice_index
        self.tip_labels = tuple(tip_labels)
        self._tip_ok = np.zeros(256, dtype=bool)
        self._tip_ok[list(self.tip_labels)] = True
        region = labels.values != OUTSIDE
        if access_points is None:
            access_points = contour_points(region, labels.spacing_mm, labels.origin_mm, constraints.access_spacing_mm)
        self.access = np.asarray(access_points, dtype=np.float64)
        self._tables: dict[int, AccessPaths] = {}

    @property
    def n_access(self) -> int:
        return len(self.access)

    def _labels_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        sx, sy = self.labels.spacing_mm
        ox, oy = self.labels.origin_mm
        i = np.floor((x - ox) / sx + 0.5).astype(np.int64)
        j = np.floor((y - oy) / sy + 0.5).astype(np.int64)
        nx, ny = self.labels.shape
        inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
        out = np.full(np.shape(x), OUTSIDE, dtype=np.int64)
        out[inside] = self.labels.values[i[inside], j[inside]]
        return out

    def inward_angles(self, access_mm) -> np.ndarray:
        c = self.constraints
        ang = c.angles()
        rad = np.radians(ang)
        s = c.inward_probe_mm * np.arange(1, 5) / 4.0
        x = access_mm[0] + s[None, :] * np.cos(rad)[:, None]
        y = access_mm[1] + s[None, :] * np.sin(rad)[:, None]
        ok = np.all(self._labels_at(x, y) != OUTSIDE, axis=1)
        return ang[ok]

    def _path_ok(self, access_mm, angle: float, depth: float):
        """``(roi, cells)`` for an admissible path, else None."""
        c = self.constraints
        if depth < c.tip_length_mm:
            return None
        roi = tip_roi(access_mm, angle, depth, c, self.slice_index)
        cells = roi_cells(self.labels, roi)
        if cells[0].size == 0 or not self._tip_ok[self.labels.values[cells].astype(np.intp)].all():
            return None
        if not c.allow_necrosis_traversal:
            step = 0.5 * min(self.labels.spacing_mm)
            s = np.arange(0.0, depth + step, step)
            dx, dy = direction(angle)
            if (self._labels_at(access_mm[0] + s * dx, access_mm[1] + s * dy) == NECROSIS).any():
                return None
        return roi, cells

    def table(self, a: int) -> AccessPaths:
        if a in self._tables:
            return self._tables[a]
        access = tuple(float(v) for v in self.access[a])
        inward = self.inward_angles(access)
        un_in = _unwrap(inward)
        order_in = np.argsort(un_in, kind="stable")
        inward, un_in = inward[order_in], un_in[order_in]
        angles, unwrapped, depths, rois, cells = [], [], [], [], []
        for ang, un in zip(inward, un_in):
            for depth in self.constraints.depths():
                ok = self._path_ok(access, float(ang), float(depth))
                if ok is not None:
                    angles.append(float(ang))
                    unwrapped.append(float(un))
                    depths.append(float(depth))
                    rois.append(ok[0])
                    cells.append(ok[1])
        means = {}
        for name, f in self.fields.items():
            vals = np.empty(len(rois))
            for k, (ii, jj) in enumerate(cells):
                v = f.values[ii, jj]
                v = v[np.isfinite(v)]
                vals[k] = float(np.mean(v)) if v.size else np.nan
            means[name] = vals
        hits = []
        if self.regions is not None:
            for ii, jj in cells:
                ids = np.unique(self.regions.values[ii, jj])
                hits.append(ids[ids >= 0])
        tab = AccessPaths(
            a,
            access,
            inward,
            np.array(angles),
            np.array(unwrapped),
            np.array(depths),
            rois,
            means,
            hits,
        )
        self._tables[a] = tab
        return tab

    def path(self, tab: AccessPaths, p: int) -> NeedlePath:
        return NeedlePath(tab.access_mm, float(tab.angles[p]), float(tab.depths[p]), tab.rois[p])

    def combos(self, a: int, n: int) -> np.ndarray:
        """Fan-admissible ``n``-subsets of path indices at access ``a`` (lexicographic)."""
        tab = self.table(a)
        m = tab.n_paths
        if m < n:
            return np.zeros((0, n), dtype=np.int64)
        hi = np.searchsorted(tab.unwrapped, tab.unwrapped + self.constraints.fan_deg + ANGLE_EPS, side="right")
        blocks = []
        for i in range(m):
            width = hi[i] - i - 1
            t = _comb_table(int(width), n - 1)
            if t.shape[0] == 0:
                continue
            blk = np.empty((t.shape[0], n), dtype=np.int64)
            blk[:, 0] = i
            blk[:, 1:] = t + i + 1
            blocks.append(blk)
        if not blocks:
            return np.zeros((0, n), dtype=np.int64)
        return np.concatenate(blocks)

    def count(self, a: int, n: int) -> int:
        tab = self.table(a)
        if tab.n_paths < n:
            return 0
        hi = np.searchsorted(tab.unwrapped, tab.unwrapped + self.constraints.fan_deg + ANGLE_EPS, side="right")
        width = hi - np.arange(tab.n_paths) - 1
        return int(sum(math.comb(int(w), n - 1) for w in width))

    def make_intervention(self, a: int, combo, score=float("nan"), assignment=()) -> Intervention:
        tab = self.table(a)
        combo = tuple(int(p) for p in combo)
        paths = tuple(self.path(tab, p) for p in combo)
        ds = tuple(float(tab.means["d"][p]) for p in combo) if "d" in tab.means else ()
        rhos = tuple(float(tab.means["rho"][p]) for p in combo) if "rho" in tab.means else ()
        return Intervention(tab.access_mm, paths, ds, rhos, a, combo, score, tuple(assignment))

    def interventions(self, n: int, max_interventions: int | None = None) -> Iterator[Intervention]:
        for a, combos in self.combo_stream(n, max_interventions):
            for combo in combos:
                yield self.make_intervention(a, combo)

    def combo_stream(self, n: int, max_interventions: int | None = None):
        """Yield ``(access_index, combos)`` blocks; subsampled evenly per access if capped."""
        if n < 1:
            raise InvalidArgument("n_biopsy must be >= 1")
        keep = None
        if max_interventions is not None:
            counts = np.array([self.count(a, n) for a in range(self.n_access)])
            total = int(counts.sum())
            if total > max_interventions:
                keep = np.ceil(counts * (max_interventions / total)).astype(np.int64)
                log.info("subsampling %d interventions down to about %d", total, max_interventions)
        for a in range(self.n_access):
            combos = self.combos(a, n)
            if keep is not None and combos.shape[0] > keep[a]:
                pick = np.unique(np.linspace(0, combos.shape[0] - 1, int(keep[a])).round().astype(np.int64))
                combos = combos[pick]
            if combos.shape[0]:
                yield a, combos


def enumerate_interventions(
    mask_slice: Slice2D,
    constraints: NeedleConstraints,
    n_biopsy: int,
    fields: dict | None = None,
    max_interventions: int | None = None,
) -> Iterator[Intervention]:
    """Every admissible intervention in boundary order, then lexicographic path sets."""
    planner = NeedlePlanner(mask_slice, constraints, fields)
    return planner.interventions(n_biopsy, max_interventions)


def _search_access(planner: NeedlePlanner, a: int, cands, targets, allowed=None):
    tab = planner.table(a)
    if tab.n_paths == 0 or not tab.hits:
        return []
    n = len(cands)
    fan = planner.constraints.fan_deg + ANGLE_EPS
    hit_lists = []
    for c in cands:
        h = [p for p in range(tab.n_paths) if c in tab.hits[p] and (allowed is None or allowed[p])]
        if not h:
            return []
        hit_lists.append(h)
    d = tab.means.get("d")
    un = tab.unwrapped
    best: dict = {}

    def rec(j, chosen, lo, hi):
        if j == n:
            key = tuple(sorted(chosen))
            score = float(sum(abs(d[p] - targets[k]) for k, p in enumerate(chosen))) if d is not None else 0.0
            prev = best.get(key)
            if prev is None or score < prev[0]:
                best[key] = (score, tuple(chosen))
            return
        for p in hit_lists[j]:
            if p in chosen:
                continue
            nlo, nhi = min(lo, un[p]), max(hi, un[p])
            if nhi - nlo > fan:
                continue
            rec(j + 1, chosen + [p], nlo, nhi)

    rec(0, [], math.inf, -math.inf)
    out = []
    for key, (score, chosen) in best.items():
        target_of = {p: k for k, p in enumerate(chosen)}
        out.append((score, key, tuple(target_of[p] for p in key)))
    out.sort(key=lambda t: (t[0], t[1]))
    return out


def guided_search(
    candidates,
    planner: NeedlePlanner,
    n_biopsy: int | None = None,
    access_indices: Sequence[int] | None = None,
    path_filter=None,
) -> list[Intervention]:
    """Interventions whose tip ROIs reach every candidate region.

    Path ``j`` must touch candidate ``sigma(j)`` for some bijection
    ``sigma``; interventions are scored by the smallest
    ``sum |tip D - target|`` over such bijections.  The result lists every
    feasible intervention grouped by access point (boundary order), best
    first within each access point.
    """
    if planner.regions is None:
        raise InvalidArgument("guided search needs a region slice on the planner")
    n = len(candidates) if n_biopsy is None else n_biopsy
    if len(candidates) != n:
        raise InvalidArgument(f"{len(candidates)} candidates for {n} biopsies")
    ids = [c.region.id for c in candidates]
    targets = [c.target for c in candidates]
    access = range(planner.n_access) if access_indices is None else access_indices
    out = []
    for a in access:
        allowed = None if path_filter is None else path_filter(planner.table(a))
        for score, key, assign in _search_access(planner, a, ids, targets, allowed):
            out.append(planner.make_intervention(a, key, score, assign))
    if not out:
        raise InfeasiblePlan(
            "no intervention reaches all candidate regions",
            reachability=reachability(planner, ids),
        )
    return out


def reachability(planner: NeedlePlanner, region_ids: Sequence[int]) -> list[dict]:
    diag = []
    for rid in region_ids:
        n_access = n_paths = 0
        for a in range(planner.n_access):
            tab = planner.table(a)
            k = sum(1 for h in tab.hits if rid in h)
            n_paths += k
            n_access += k > 0
        diag.append({"region": int(rid), "access_points": n_access, "paths": n_paths})
    return diag


def best_per_access(plans: Sequence[Intervention]) -> list[Intervention]:
    best: dict = {}
    for p in plans:
        cur = best.get(p.access_index)
        if cur is None or (p.score, p.path_ids) < (cur.score, cur.path_ids):
            best[p.access_index] = p
    return [best[a] for a in sorted(best)]


def draw_rng(seed: int, draw_index: int) -> np.random.Generator:
    """Independent generator for one draw, identical in serial and parallel runs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(draw_index)]))


def random_intervention(
    planner: NeedlePlanner,
    n_biopsy: int,
    rng_seed: int,
    draw_index: int = 0,
    max_attempts: int = 1000,
) -> Intervention:
    """Random admissible intervention.

    The access point is uniform over the arc-length resampled outline, the
    base orientation uniform over the inward angles there, and the paths a
    uniform ``n_biopsy``-subset of admissible paths inside the fan centred
    on the base orientation.  Orientations that cannot host ``n_biopsy``
    paths are rejected; an access point with no such orientation is redrawn.
    """
    if n_biopsy < 1:
        raise InvalidArgument("n_biopsy must be >= 1")
    rng = draw_rng(rng_seed, draw_index)
    half = 0.5 * planner.constraints.fan_deg + ANGLE_EPS
    for _ in range(max_attempts):
        a = int(rng.integers(planner.n_access))
        tab = planner.table(a)
        if tab.inward.size == 0:
            continue
        bases = np.sort(_unwrap(tab.inward))
        # rejection over orientations at this access keeps the access draw uniform
        fits = np.array([np.count_nonzero(np.abs(tab.unwrapped - b) <= half) >= n_biopsy for b in bases])
        if not fits.any():
            continue
        base = bases[np.nonzero(fits)[0][int(rng.integers(int(fits.sum())))]]
        idx = np.nonzero(np.abs(tab.unwrapped - base) <= half)[0]
        pick = np.sort(rng.choice(idx, size=n_biopsy, replace=False))
        return planner.make_intervention(a, pick)
    raise SamplingFailed(f"no admissible intervention after {max_attempts} attempts")


@dataclass(frozen=True)
class GuidedPlan:
    """Best guided intervention per qualifying access point."""

    plans: tuple
    candidates: tuple
    mode: str
    n_feasible: int


def plan_guided(
    planner: NeedlePlanner,
    partition,
    targets,
    min_boundary_mm: float = 2.5,
    gate: float = 0.25,
    mode: str = "auto",
) -> GuidedPlan:
    """Guided interventions for ``targets`` on a partitioned slice.

    ``global`` mode selects one candidate region per target over the whole
    slice and keeps interventions reaching all of them.  ``reachable`` mode
    repeats the selection for every access point and fan window among the
    regions the needle can reach there.  ``auto`` tries ``global`` first.
    Only interventions whose every tip D lies within ``gate`` target
    spacings of its target are kept; one plan per access point is returned.
    """
    from .partition import assign_targets, eligibility, select_candidates

    if mode not in ("auto", "global", "reachable"):
        raise InvalidArgument(f"unknown guidance mode {mode!r}")
    tv = np.asarray(targets.targets)
    tol = gate * targets.spacing

    def passes(plan: Intervention) -> bool:
        return all(abs(d - tv[k]) <= tol for d, k in zip(plan.biopsy_ds, plan.assignment))

    if mode in ("auto", "global"):
        try:
            cands = select_candidates(partition, targets, min_boundary_mm)
            found = [p for p in guided_search(cands, planner, len(tv)) if passes(p)]
            if found:
                return GuidedPlan(tuple(best_per_access(found)), tuple(cands), "global", len(found))
        except (InfeasiblePlan, InfeasibleSelection) as exc:
            if mode == "global":
                raise
            log.info("global candidates unreachable (%s); searching per access point", exc)
        if mode == "global":
            raise InfeasiblePlan("no global plan passes the target gate", gate=gate)

    pool = {r.id: r for r in eligibility(partition, min_boundary_mm) if not r.excluded}
    fan = planner.constraints.fan_deg + ANGLE_EPS
    plans, used, n_feasible = [], [], 0
    for a in range(planner.n_access):
        tab = planner.table(a)
        if tab.n_paths < len(tv):
            continue
        best = None
        seen = set()
        for start in np.unique(tab.unwrapped):
            window = (tab.unwrapped >= start - ANGLE_EPS) & (tab.unwrapped <= start + fan)
            key = tuple(np.nonzero(window)[0])
            if key in seen:
                continue
            seen.add(key)
            reach = sorted({int(r) for p in key for r in tab.hits[p] if int(r) in pool})
            if len(reach) < len(tv):
                continue
            cands = assign_targets([pool[r] for r in reach], tv)
            ids = [c.region.id for c in cands]
            for score, combo, assign in _search_access(planner, a, ids, list(tv), window):
                plan = planner.make_intervention(a, combo, score, assign)
                if passes(plan):
                    n_feasible += 1
                    if best is None or (score, combo) < (best[0].score, best[0].path_ids):
                        best = (plan, cands)
                    break
        if best is not None:
            plans.append(best[0])
            used.append(tuple(best[1]))
    if not plans:
        raise InfeasiblePlan(
            "no access point reaches regions matching every target",
            gate=gate,
            eligible_regions=len(pool),
            access_points=planner.n_access,
        )
    return GuidedPlan(tuple(plans), tuple(used), "reachable", n_feasible)
