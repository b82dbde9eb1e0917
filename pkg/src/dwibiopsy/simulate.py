"""Synthetic phantoms, virtual biopsies and the biopsy-strategy comparison."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .density import DensityModel3d, cell_load, density_map_3d, fit_linear
from .errors import EmptyComparison, InvalidArgument, InvalidSpec, UndefinedStd
from .grid import (
    DENSITY_3D,
    FAT,
    NECROSIS,
    OUTSIDE,
    TUMOR,
    LabelGrid3,
    ScalarGrid3,
    resample_bicubic,
    upsample_labels,
)
from .gridio import load_grid, save_grid
from .needle import NeedleConstraints, NeedlePlanner, plan_guided, random_intervention
from .partition import (
    REF_MIN_BOUNDARY_MM,
    REF_SUPERPIXEL_MM2,
    PERCENTILES,
    SuperpixelPartition,
    optimal_d_values,
    superpixels_2d,
)

log = logging.getLogger(__name__)

REF_SIGMA_NOISE = 6e4  # cells / mm^3
STRATEGIES = ("guided", "constrained", "random")


# ---------------------------------------------------------------------------
# Density synthesis and phantoms


def synthesize_density_map(
    dmap: ScalarGrid3,
    model: DensityModel3d = DensityModel3d(),
    sigma_noise: float = REF_SIGMA_NOISE,
    seed: int = 0,
    mask: LabelGrid3 | None = None,
) -> ScalarGrid3:
    """``max(0, model(D) + noise)`` at every finite voxel, NaN elsewhere.

    With ``mask`` given, necrosis voxels get density 0 and voxels outside
    the tumour are NaN.
    """
    if sigma_noise < 0:
        raise InvalidArgument("sigma_noise must be >= 0")
    D = dmap.values
    fin = np.isfinite(D)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(D.shape) * sigma_noise if sigma_noise > 0 else np.zeros(D.shape)
    rho = np.full(D.shape, np.nan)
    rho[fin] = np.maximum(model.raw(D[fin]) + noise[fin], 0.0)
    if mask is not None:
        rho = np.where(mask.labels == OUTSIDE, np.nan, rho)
        rho = np.where(mask.labels == NECROSIS, 0.0, rho)
    return dmap.with_values(rho, DENSITY_3D)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32)
    spacing_mm: tuple = (2.1, 2.1, 6.0)
    semi_axes_mm: tuple = (24.0, 20.0)
    d_range: tuple = (0.9e-3, 3.5e-3)
    n_bumps: int = 6
    bump_width_mm: float = 9.0
    necrosis_radius_mm: float = 0.0
    fat_radius_mm: float = 0.0
    sigma_noise: float = REF_SIGMA_NOISE
    slope: float = DensityModel3d().slope
    intercept: float = DensityModel3d().intercept
    U: int = 20
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def validate(self) -> None:
        if len(self.dims) != 2 or min(self.dims) < 4:
            raise InvalidSpec("dims must be two integers >= 4")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise InvalidSpec("spacing_mm must be three positive reals")
        a, b = self.semi_axes_mm
        if not (a > 0 and b > 0):
            raise InvalidSpec("semi-axes must be > 0")
        if 2 * a > self.dims[0] * self.spacing_mm[0] or 2 * b > self.dims[1] * self.spacing_mm[1]:
            raise InvalidSpec("tumour ellipse does not fit the field of view")
        lo, hi = self.d_range
        if not 0 <= lo < hi:
            raise InvalidSpec("d_range must satisfy 0 <= min < max")
        if self.necrosis_radius_mm < 0 or self.fat_radius_mm < 0:
            raise InvalidSpec("blob radii must be >= 0")
        if self.necrosis_radius_mm >= 0.5 * min(a, b):
            raise InvalidSpec("necrosis must be smaller than half the tumour")
        if self.fat_radius_mm >= 0.5 * min(a, b):
            raise InvalidSpec("fat blob must be smaller than half the tumour")
        if self.n_bumps < 1 or self.bump_width_mm <= 0:
            raise InvalidSpec("need >= 1 bump of positive width")
        if self.sigma_noise < 0 or self.U < 1:
            raise InvalidSpec("sigma_noise must be >= 0 and U >= 1")


@dataclass(frozen=True, eq=False)
class Phantom:
    """Coarse D-map and labels plus the interpolated slice that biopsies sample.

    ``dmap``/``labels`` are the acquisition-grid maps; ``dmap_fine``,
    ``labels_fine`` and ``rho_truth`` live on the ``U``-fold upsampled
    slice.  ``mu_rho``/``sigma_rho`` summarise ``rho_truth`` over vital
    tumour cells.
    """

    dmap: ScalarGrid3
    labels: LabelGrid3
    dmap_fine: ScalarGrid3
    labels_fine: LabelGrid3
    rho_truth: ScalarGrid3
    model_truth: DensityModel3d
    mu_rho: float
    sigma_rho: float
    seed: int
    spec: PhantomSpec = field(default_factory=PhantomSpec)

    def true_cell_load(self) -> float:
        return cell_load(self.rho_truth, self.labels_fine)


def _ellipse(spec: PhantomSpec):
    nx, ny = spec.dims
    sx, sy, _ = spec.spacing_mm
    cx, cy = 0.5 * (nx - 1) * sx, 0.5 * (ny - 1) * sy
    x = np.arange(nx) * sx - cx
    y = np.arange(ny) * sy - cy
    return np.meshgrid(x, y, indexing="ij")


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> Phantom:
    """Seeded elliptical tumour with a smooth D field and a synthetic density map."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    X, Y = _ellipse(spec)
    a, b = spec.semi_axes_mm
    inside = (X / a) ** 2 + (Y / b) ** 2 <= 1.0
    labels = np.where(inside, TUMOR, OUTSIDE)
    if spec.necrosis_radius_mm > 0:
        off = rng.uniform(-0.25, 0.25, 2) * np.array([a, b])
        blob = (X - off[0]) ** 2 + (Y - off[1]) ** 2 <= spec.necrosis_radius_mm**2
        labels = np.where(inside & blob, NECROSIS, labels)
    if spec.fat_radius_mm > 0:
        ang = rng.uniform(0, 2 * np.pi)
        fx, fy = 0.6 * a * np.cos(ang), 0.6 * b * np.sin(ang)
        blob = (X - fx) ** 2 + (Y - fy) ** 2 <= spec.fat_radius_mm**2
        labels = np.where(inside & blob & (labels == TUMOR), FAT, labels)
    if not (labels == TUMOR).any():
        raise InvalidSpec("no vital tumour voxel left")

    centres = rng.uniform(-1, 1, (spec.n_bumps, 2)) * np.array([a, b])
    amps = rng.uniform(-1, 1, spec.n_bumps)
    F = np.zeros_like(X)
    for (px, py), amp in zip(centres, amps):
        F += amp * np.exp(-((X - px) ** 2 + (Y - py) ** 2) / (2 * spec.bump_width_mm**2))
    vital = labels == TUMOR
    lo, hi = spec.d_range
    if np.ptp(F[vital]) <= 0:
        raise InvalidSpec("D field is flat; use more bumps")
    # monotone remap of the smooth field onto a symmetric Beta(2, 2) marginal
    ref = np.sort(F[vital])
    q = (np.searchsorted(ref, F, side="left") + np.searchsorted(ref, F, side="right")) / (2.0 * ref.size)
    D = lo + stats.beta.ppf(np.clip(q, 0.0, 1.0), 2.0, 2.0) * (hi - lo)
    D = np.where(labels == NECROSIS, 0.0, D)
    D = np.where(labels == OUTSIDE, np.nan, D)

    spacing = spec.spacing_mm
    dmap = ScalarGrid3(D[:, :, None], spacing)
    lab = LabelGrid3(labels[:, :, None], spacing)
    return phantom_from_maps(dmap, lab, DensityModel3d(spec.slope, spec.intercept), spec.sigma_noise, spec.U, spec.seed, spec)


def phantom_from_maps(
    dmap: ScalarGrid3,
    labels: LabelGrid3,
    model: DensityModel3d = DensityModel3d(),
    sigma_noise: float = REF_SIGMA_NOISE,
    U: int = 20,
    seed: int = 0,
    spec: PhantomSpec | None = None,
    slice_index: int | None = None,
) -> Phantom:
    """Phantom for one slice of an existing D-map (middle slice by default)."""
    k = dmap.dims[2] // 2 if slice_index is None else slice_index
    d2 = ScalarGrid3(dmap.values[:, :, k : k + 1], dmap.spacing_mm, dmap.origin_mm, dmap.unit)
    l2 = LabelGrid3(labels.labels[:, :, k : k + 1], labels.spacing_mm, labels.origin_mm)
    fine = resample_bicubic(d2, l2, U, z_factor=1)
    lab_fine = upsample_labels(l2, U, 1)
    # the density stream is independent of the geometry stream
    rho = synthesize_density_map(fine, model, sigma_noise, np.random.SeedSequence([seed, 1]), lab_fine)
    vital = lab_fine.labels == TUMOR
    vals = rho.values[vital]
    return Phantom(
        dmap,
        labels,
        fine,
        lab_fine,
        rho,
        model,
        float(np.mean(vals)),
        float(np.std(vals, ddof=1)),
        seed,
        spec or PhantomSpec(),
    )


PHANTOM_FILES = {
    "dmap": "dmap.grid",
    "labels": "labels.grid",
    "dmap_fine": "dmap_fine.grid",
    "labels_fine": "labels_fine.grid",
    "rho_truth": "rho_truth.grid",
}


def save_phantom(phantom: Phantom, directory) -> None:
    """Grids plus ``phantom.json`` with the spec, model and reference stats."""
    os.makedirs(directory, exist_ok=True)
    for attr, name in PHANTOM_FILES.items():
        save_grid(getattr(phantom, attr), os.path.join(directory, name))
    meta = {
        "spec": phantom.spec.to_dict(),
        "model_truth": phantom.model_truth.to_dict(),
        "mu_rho": phantom.mu_rho,
        "sigma_rho": phantom.sigma_rho,
        "seed": phantom.seed,
        "true_cell_load": phantom.true_cell_load(),
    }
    with open(os.path.join(directory, "phantom.json"), "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_phantom(directory) -> Phantom:
    path = os.path.join(directory, "phantom.json")
    if not os.path.exists(path):
        raise InvalidArgument(f"{directory} holds no phantom.json")
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    grids = {attr: load_grid(os.path.join(directory, name)) for attr, name in PHANTOM_FILES.items()}
    return Phantom(
        grids["dmap"],
        grids["labels"],
        grids["dmap_fine"],
        grids["labels_fine"],
        grids["rho_truth"],
        DensityModel3d(**meta["model_truth"]),
        float(meta["mu_rho"]),
        float(meta["sigma_rho"]),
        int(meta["seed"]),
        PhantomSpec.from_dict(meta["spec"]),
    )


# ---------------------------------------------------------------------------
# Sample statistics


def sample_mean(rhos: Sequence[float]) -> float:
    v = np.asarray(rhos, dtype=np.float64)
    if v.size < 1:
        raise InvalidArgument("need >= 1 value")
    return float(np.sum(v) / v.size)


def sample_std(rhos: Sequence[float]) -> float:
    v = np.asarray(rhos, dtype=np.float64)
    if v.size < 2:
        raise UndefinedStd("sample standard deviation needs >= 2 values")
    m = np.sum(v) / v.size
    return float(math.sqrt(np.sum((v - m) ** 2) / (v.size - 1)))


def sample_stats(rhos: Sequence[float]) -> tuple[float, float | None]:
    """Sample mean and (n - 1)-denominator standard deviation; ``s`` is None for one value."""
    v = np.asarray(rhos, dtype=np.float64)
    return sample_mean(v), (sample_std(v) if v.size >= 2 else None)


def _row_stats(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = R.shape[1]
    m = R.sum(axis=1) / n
    if n < 2:
        return m, np.full(R.shape[0], np.nan)
    s = np.sqrt(((R - m[:, None]) ** 2).sum(axis=1) / (n - 1))
    return m, s


# ---------------------------------------------------------------------------
# Strategies


@dataclass(frozen=True)
class BiopsySample:
    d_value: float
    rho: float
    intervention: int
    path: int


@dataclass(frozen=True, eq=False)
class StrategyReport:
    strategy: str
    n_biopsy: int
    rho_bar_samples: np.ndarray
    s_samples: np.ndarray
    mu_rho_ref: float
    sigma_rho_ref: float
    cell_load_estimates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    access: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    d_values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    rhos: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    fit: dict = field(default_factory=dict)
    true_cell_load: float = float("nan")

    @property
    def n_interventions(self) -> int:
        return int(self.rho_bar_samples.size)

    def samples(self) -> list[BiopsySample]:
        return [
            BiopsySample(float(self.d_values[i, j]), float(self.rhos[i, j]), i, j)
            for i in range(self.d_values.shape[0])
            for j in range(self.d_values.shape[1])
        ]

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.n_interventions):
            out.append(
                {
                    "strategy": self.strategy,
                    "n_biopsy": self.n_biopsy,
                    "access": int(self.access[i]) if self.access.size else -1,
                    "rho_bar": float(self.rho_bar_samples[i]),
                    "s": float(self.s_samples[i]),
                    "cell_load": float(self.cell_load_estimates[i]) if self.cell_load_estimates.size else float("nan"),
                }
            )
        return out


def phantom_planner(
    phantom: Phantom,
    constraints: NeedleConstraints = NeedleConstraints(),
    partition: SuperpixelPartition | None = None,
) -> NeedlePlanner:
    fine = phantom.dmap_fine.slice2d(0)
    fields = {"d": fine, "rho": phantom.rho_truth.slice2d(0)}
    regions = partition.as_slice() if partition is not None else None
    return NeedlePlanner(phantom.labels_fine.slice2d(0), constraints, fields, regions)


def phantom_partition(phantom: Phantom, target_area_mm2: float = REF_SUPERPIXEL_MM2, min_boundary_mm: float = 2.5):
    return superpixels_2d(
        phantom.dmap_fine.slice2d(0),
        phantom.labels_fine.slice2d(0),
        target_area_mm2,
        min_boundary_mm=min_boundary_mm,
    )


def phantom_targets(phantom: Phantom, n_biopsy: int, mode: str = "auto", percentiles: tuple = PERCENTILES):
    vital = phantom.labels_fine.labels == TUMOR
    return optimal_d_values(phantom.dmap_fine.values[vital], n_biopsy, mode, percentiles=percentiles)


def _map_ordered(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def estimate_cell_load(phantom: Phantom, model: DensityModel3d) -> float:
    """Cell load of the acquisition-grid slice converted with ``model``."""
    k = phantom.dmap.dims[2] // 2
    d2 = ScalarGrid3(phantom.dmap.values[:, :, k : k + 1], phantom.dmap.spacing_mm, phantom.dmap.origin_mm)
    l2 = LabelGrid3(phantom.labels.labels[:, :, k : k + 1], phantom.labels.spacing_mm, phantom.labels.origin_mm)
    return cell_load(density_map_3d(d2, model, l2), l2)


def run_strategy(
    phantom: Phantom,
    strategy: str,
    constraints: NeedleConstraints = NeedleConstraints(),
    n_biopsy: int = 4,
    n_reps: int = 20000,
    seed: int = 0,
    *,
    planner: NeedlePlanner | None = None,
    partition: SuperpixelPartition | None = None,
    max_interventions: int | None = 2_000_000,
    workers: int = 1,
    target_mode: str = "auto",
    guidance: str = "auto",
    percentiles: tuple = PERCENTILES,
    min_boundary_mm: float = REF_MIN_BOUNDARY_MM,
    gate: float = 0.25,
) -> StrategyReport:
    """Simulate one biopsy strategy on a phantom.

    ``guided`` plans one intervention per qualifying access point, fits a
    line through each intervention's ``(D, rho)`` samples and converts the
    acquisition-grid D-map to a cell load with it.  ``constrained`` takes
    every admissible intervention (evenly subsampled above
    ``max_interventions``).  ``random`` draws ``n_reps`` seeded
    interventions.
    """
    if strategy not in STRATEGIES:
        raise InvalidArgument(f"unknown strategy {strategy!r}")
    if n_biopsy < 1:
        raise InvalidArgument("n_biopsy must be >= 1")
    if strategy == "guided" and partition is None:
        partition = phantom_partition(phantom, min_boundary_mm=min_boundary_mm)
    if planner is None or (strategy == "guided" and planner.regions is None):
        planner = phantom_planner(phantom, constraints, partition)
    fit: dict = {}
    loads = np.zeros(0)
    if strategy == "guided":
        targets = phantom_targets(phantom, n_biopsy, target_mode, percentiles)
        plan = plan_guided(planner, partition, targets, min_boundary_mm, gate, guidance)
        access = np.array([p.access_index for p in plan.plans], dtype=np.int64)
        D = np.array([p.biopsy_ds for p in plan.plans])
        R = np.array([p.rhos for p in plan.plans])
        loads = np.empty(len(plan.plans))
        for i in range(len(plan.plans)):
            if n_biopsy >= 2 and np.ptp(D[i]) > 0:
                loads[i] = estimate_cell_load(phantom, DensityModel3d.from_fit(fit_linear(np.column_stack([D[i], R[i]]))))
            else:
                loads[i] = np.nan
        if n_biopsy >= 2:
            pooled = fit_linear(np.column_stack([D.ravel(), R.ravel()]))
            fit = {
                "slope": pooled.k2d,
                "intercept": pooled.d2d,
                "r": pooled.pearson_r,
                "n": pooled.n,
                "cell_load": estimate_cell_load(phantom, DensityModel3d.from_fit(pooled)),
                "targets": list(targets.targets),
                "mode": plan.mode,
            }
    elif strategy == "constrained":
        access_l, D_l, R_l = [], [], []
        for a, combos in planner.combo_stream(n_biopsy, max_interventions):
            tab = planner.table(a)
            D_l.append(tab.means["d"][combos])
            R_l.append(tab.means["rho"][combos])
            access_l.append(np.full(combos.shape[0], a, dtype=np.int64))
        if not D_l:
            raise InvalidArgument("no admissible intervention on this phantom")
        access = np.concatenate(access_l)
        D = np.concatenate(D_l)
        R = np.concatenate(R_l)
    else:
        # build every path table up front so threads only read shared state
        for a in range(planner.n_access):
            planner.table(a)

        def draw(i):
            return random_intervention(planner, n_biopsy, seed, i)

        plans = _map_ordered(draw, range(n_reps), workers)
        access = np.array([p.access_index for p in plans], dtype=np.int64)
        D = np.array([p.biopsy_ds for p in plans])
        R = np.array([p.rhos for p in plans])
    rho_bar, s = _row_stats(R)
    return StrategyReport(
        strategy,
        n_biopsy,
        rho_bar,
        s,
        phantom.mu_rho,
        phantom.sigma_rho,
        loads,
        access,
        D,
        R,
        fit,
        phantom.true_cell_load(),
    )


# ---------------------------------------------------------------------------
# Comparison


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    n_biopsy: int
    n_interventions: int
    mean_rho_bar: float
    sd_rho_bar: float
    hit_fraction: float
    median_s: float
    modal_s: float
    modal_s_distance: float
    mu_rho: float
    sigma_rho: float


def histogram_edges(mu: float, sigma: float, kind: str, n_bins: int = 60) -> np.ndarray:
    """Fixed bins shared across runs: ``mu +- 4 sigma`` for means, ``[0, 4 sigma]`` for SDs."""
    if kind == "rho_bar":
        return np.linspace(mu - 4 * sigma, mu + 4 * sigma, n_bins + 1)
    return np.linspace(0.0, 4 * sigma, n_bins + 1)


def compare_report(reports: Sequence[StrategyReport], tolerance: float = 0.1, n_bins: int = 60):
    """Per-strategy summary rows plus fixed-bin histograms of rho_bar and s."""
    if not reports:
        raise EmptyComparison("no reports to compare")
    mu, sigma = reports[0].mu_rho_ref, reports[0].sigma_rho_ref
    for r in reports:
        if r.mu_rho_ref != mu or r.sigma_rho_ref != sigma:
            raise InvalidArgument("reports come from different phantoms")
        if r.n_interventions == 0:
            raise EmptyComparison(f"{r.strategy} report has no interventions")
    e_mean = histogram_edges(mu, sigma, "rho_bar", n_bins)
    e_sd = histogram_edges(mu, sigma, "s", n_bins)
    rows, hists = [], []
    for r in reports:
        rb = r.rho_bar_samples
        s = r.s_samples[np.isfinite(r.s_samples)]
        hit = float(np.mean(np.abs(rb - mu) <= tolerance * mu))
        if s.size:
            cs, _ = np.histogram(np.clip(s, e_sd[0], e_sd[-1]), e_sd)
            k = int(np.argmax(cs))
            modal = 0.5 * (e_sd[k] + e_sd[k + 1])
            med = float(np.median(s))
        else:
            cs = np.zeros(n_bins, dtype=np.int64)
            modal = med = float("nan")
        cm, _ = np.histogram(np.clip(rb, e_mean[0], e_mean[-1]), e_mean)
        rows.append(
            ComparisonRow(
                r.strategy,
                r.n_biopsy,
                r.n_interventions,
                float(np.mean(rb)),
                float(np.std(rb, ddof=1)) if rb.size > 1 else 0.0,
                hit,
                med,
                float(modal),
                float(abs(modal - sigma)),
                mu,
                sigma,
            )
        )
        hists.append({"strategy": r.strategy, "n_biopsy": r.n_biopsy, "rho_bar": cm, "s": cs})
    return {"rows": rows, "histograms": hists, "edges": {"rho_bar": e_mean, "s": e_sd}}
