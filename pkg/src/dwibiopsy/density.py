"""Linear density-versus-D models, density maps, cell load and regression tests.

Units: D in mm^2/s, 2d densities in cells/mm^2, 3d densities in cells/mm^3.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .errors import (
    DegenerateX,
    InsufficientData,
    InvalidArgument,
    UndefinedCorrelation,
    UnitError,
)
from .grid import DENSITY_2D, DENSITY_3D, NECROSIS, TUMOR, LabelGrid3, ScalarGrid3, check_geometry

log = logging.getLogger(__name__)

REF_K2D = -1.684e6  # cells s / mm^4
REF_D2D = 9363.0  # cells / mm^2
REF_KC = 0.43
REF_DC = 1253.0  # cells / mm^2
REF_VALID_FROM = 3000.0  # cells / mm^2
REF_M_C = 96.0  # 1 / mm
REF_M_NC = 115.0  # 1 / mm
# 3d calibration: rho = 1.125e6 - 2.5e5 * (D / 1e-3)
REF_SLOPE_3D = -2.5e5 / 1e-3  # cells s / mm^5
REF_INTERCEPT_3D = 1.125e6  # cells / mm^3
UM3_PER_MM3 = 1e9


def _xy(points) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidArgument("points must be a sequence of (x, y) pairs")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("points must be finite")
    return arr[:, 0], arr[:, 1]


@dataclass(frozen=True)
class DensityModel2d:
    """Fitted line ``rho = k2d * D + d2d`` with the statistics needed for intervals.

    ``x_mean`` is kept next to ``sxx`` because interval widths depend on the
    distance from the mean D of the fit.
    """

    k2d: float
    d2d: float
    pearson_r: float = float("nan")
    n: int = 0
    residual_se: float = float("nan")
    sxx: float = float("nan")
    x_mean: float = float("nan")

    def raw(self, D):
        return self.k2d * np.asarray(D, dtype=np.float64) + self.d2d

    def to_dict(self) -> dict:
        return {
            "k2d": self.k2d,
            "d2d": self.d2d,
            "r": self.pearson_r,
            "n": self.n,
            "residual_se": self.residual_se,
            "sxx": self.sxx,
            "x_mean": self.x_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DensityModel2d":
        return cls(
            float(d["k2d"]),
            float(d["d2d"]),
            float(d.get("r", float("nan"))),
            int(d.get("n", 0)),
            float(d.get("residual_se", float("nan"))),
            float(d.get("sxx", float("nan"))),
            float(d.get("x_mean", float("nan"))),
        )


REF_MODEL_2D = DensityModel2d(REF_K2D, REF_D2D)


@dataclass(frozen=True)
class CancerFractionModel:
    kc: float = REF_KC
    dc: float = REF_DC
    valid_from: float = REF_VALID_FROM

    def __post_init__(self):
        if not 0 < self.kc < 1:
            raise InvalidArgument(f"kc must lie in (0, 1), got {self.kc}")


@dataclass(frozen=True)
class DensityModel3d:
    """``rho = slope * D + intercept`` in cells/mm^3 with D in mm^2/s."""

    slope: float = REF_SLOPE_3D
    intercept: float = REF_INTERCEPT_3D

    def raw(self, D):
        return self.slope * np.asarray(D, dtype=np.float64) + self.intercept

    def predict(self, D):
        out = np.maximum(self.raw(D), 0.0)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def rho_max_A(self) -> float:
        """Product of packing density and attenuation factor (intercept)."""
        return self.intercept

    @property
    def d_zero(self) -> float:
        """D at which the modelled density reaches zero."""
        return -self.intercept / self.slope

    def cell_volume_um3(self, D: float = 0.0) -> float:
        return UM3_PER_MM3 / float(self.predict(D))

    def cell_edge_um(self, D: float = 0.0) -> float:
        return self.cell_volume_um3(D) ** (1.0 / 3.0)

    @classmethod
    def from_fit(cls, model: DensityModel2d) -> "DensityModel3d":
        return cls(model.k2d, model.d2d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DensityScale:
    m_c: float = REF_M_C
    m_nc: float = REF_M_NC

    def __post_init__(self):
        if not (self.m_c > 0 and self.m_nc > 0):
            raise InvalidArgument("scale factors must be > 0")


def fit_linear(points) -> DensityModel2d:
    """Ordinary least-squares line through ``(D, rho)`` pairs."""
    x, y = _xy(points)
    n = x.size
    if n < 2:
        raise InsufficientData(f"need >= 2 points, got {n}")
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(np.dot(dx, dx))
    if sxx <= 0 or np.ptp(x) == 0:
        raise DegenerateX("all D values are equal")
    slope = float(np.dot(dx, dy) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    syy = float(np.dot(dy, dy))
    r = slope * math.sqrt(sxx / syy) if syy > 0 else float("nan")
    r = float(np.clip(r, -1.0, 1.0))
    se = math.sqrt(float(np.dot(resid, resid)) / (n - 2)) if n > 2 else 0.0
    return DensityModel2d(slope, intercept, r, n, se, sxx, float(xm))


def predict_density_2d(model: DensityModel2d, D):
    """Eq.-6-style prediction clamped at zero."""
    out = np.maximum(model.raw(D), 0.0)
    return float(out) if np.ndim(out) == 0 else out


def cancer_density(model: CancerFractionModel, rho_2d):
    """Cancer-cell density ``max(0, kc * rho - dc)``."""
    rho = np.asarray(rho_2d, dtype=np.float64)
    if np.any(rho < 0):
        raise InvalidArgument("rho_2d must be >= 0")
    out = np.maximum(model.kc * rho - model.dc, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def scale_2d_to_3d(rho_2d, m: float):
    rho = np.asarray(rho_2d, dtype=np.float64)
    if np.any(rho < 0) or m < 0:
        raise InvalidArgument("density and scale must be >= 0")
    out = m * rho
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class DensityMaps:
    total: ScalarGrid3
    cancer: ScalarGrid3
    noncancer: ScalarGrid3
    extrapolated_fraction: float

    def __iter__(self):
        return iter((self.total, self.cancer, self.noncancer))


def density_maps(
    dmap: ScalarGrid3,
    model2d: DensityModel2d = REF_MODEL_2D,
    cancer: CancerFractionModel = CancerFractionModel(),
    mask: LabelGrid3 | None = None,
) -> DensityMaps:
    """Total, cancer and non-cancer 2d density maps from a D-map.

    NaN voxels stay NaN.  With ``mask`` given, necrosis voxels get density 0.
    ``extrapolated_fraction`` is the share of finite voxels whose total
    density lies below the cancer model's ``valid_from``.
    """
    D = dmap.values
    total = np.where(np.isfinite(D), np.maximum(model2d.raw(np.nan_to_num(D)), 0.0), np.nan)
    if mask is not None:
        check_geometry(dmap, mask)
        total = np.where(mask.labels == NECROSIS, 0.0, total)
    fin = np.isfinite(total)
    pc = np.full_like(total, np.nan)
    pc[fin] = np.maximum(cancer.kc * total[fin] - cancer.dc, 0.0)
    pnc = total - pc
    n_fin = int(fin.sum())
    extrap = float(np.count_nonzero(total[fin] < cancer.valid_from)) / n_fin if n_fin else 0.0
    if extrap > 0:
        log.info("%.1f%% of voxels below the cancer-model validity threshold", 100 * extrap)
    return DensityMaps(
        dmap.with_values(total, DENSITY_2D),
        dmap.with_values(pc, DENSITY_2D),
        dmap.with_values(pnc, DENSITY_2D),
        extrap,
    )


def density_map_3d(dmap: ScalarGrid3, model: DensityModel3d = DensityModel3d(), mask: LabelGrid3 | None = None) -> ScalarGrid3:
    """Voxel-wise 3d density (cells/mm^3); necrosis is 0 when ``mask`` is given."""
    D = dmap.values
    rho = np.where(np.isfinite(D), np.maximum(model.raw(np.nan_to_num(D)), 0.0), np.nan)
    if mask is not None:
        check_geometry(dmap, mask)
        rho = np.where(mask.labels == NECROSIS, 0.0, rho)
    return dmap.with_values(rho, DENSITY_3D)


def cell_load(rho3d_map: ScalarGrid3, mask: LabelGrid3, labels=(TUMOR,)) -> float:
    """Total cell count: sum of density times voxel volume over ``labels``."""
    if rho3d_map.unit != DENSITY_3D:
        raise UnitError(f"cell load needs a {DENSITY_3D} map, got {rho3d_map.unit}")
    check_geometry(rho3d_map, mask)
    sel = np.isin(mask.labels, labels)
    vals = rho3d_map.values[sel]
    bad = ~np.isfinite(vals)
    if bad.any():
        log.warning("%d selected voxels have no density; skipped", int(bad.sum()))
        vals = vals[~bad]
    return float(np.sum(vals) * rho3d_map.voxel_volume_mm3)


def pearson(points) -> float:
    x, y = _xy(points)
    if x.size < 2:
        raise InsufficientData("need >= 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx <= 0 or syy <= 0:
        raise UndefinedCorrelation("zero variance in one coordinate")
    return float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def _sse(x, y) -> float:
    xm = x.mean()
    dx = x - xm
    sxx = float(np.dot(dx, dx))
    if sxx <= 0:
        raise DegenerateX("group has no spread in D")
    slope = float(np.dot(dx, y - y.mean()) / sxx)
    resid = y - y.mean() - slope * dx
    return float(np.dot(resid, resid))


def chow_test(points_a, points_b, k: int = 2) -> tuple[float, float]:
    """Chow F statistic and p-value for equal lines in two groups."""
    xa, ya = _xy(points_a)
    xb, yb = _xy(points_b)
    if xa.size < 3 or xb.size < 3:
        raise DegenerateX("each group needs >= 3 points")
    s_a, s_b = _sse(xa, ya), _sse(xb, yb)
    s_p = _sse(np.concatenate([xa, xb]), np.concatenate([ya, yb]))
    df2 = xa.size + xb.size - 2 * k
    within = s_a + s_b
    if within <= 0:
        if s_p - within <= 1e-12 * max(s_p, 1.0):
            return 0.0, 1.0
        return math.inf, 0.0
    F = max((s_p - within) / k, 0.0) / (within / df2)
    return float(F), float(special.fdtrc(k, df2, F))


def prediction_interval(
    model: DensityModel2d, x: float, level: float = 0.95, kind: str = "prediction"
) -> tuple[float, float]:
    """Student-t prediction (or confidence) interval of the fitted line at ``x``."""
    if not 0 < level < 1:
        raise InvalidArgument(f"level must lie in (0, 1), got {level}")
    if kind not in ("prediction", "confidence"):
        raise InvalidArgument(f"kind must be prediction or confidence, got {kind!r}")
    if model.n <= 2 or not math.isfinite(model.sxx) or not math.isfinite(model.x_mean):
        raise InsufficientData("interval needs a fitted model with n > 2")
    t = float(special.stdtrit(model.n - 2, 0.5 * (1.0 + level)))
    lead = 1.0 if kind == "prediction" else 0.0
    half = t * model.residual_se * math.sqrt(lead + 1.0 / model.n + (x - model.x_mean) ** 2 / model.sxx)
    yhat = model.k2d * x + model.d2d
    return yhat - half, yhat + half
