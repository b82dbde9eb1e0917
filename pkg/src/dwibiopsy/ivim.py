"""Bi-exponential IVIM signal model and per-voxel fitting.

The attenuation is ``S(b)/S(0) = (1 - f) exp(-b D) + f exp(-b (D + D*))``
with ``b`` in s/mm^2 and the diffusivities in mm^2/s.  Fitting runs a
vectorised projected Levenberg-Marquardt over many voxels at once, so a
whole D-map is one batched solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, InvalidSignal
from .grid import NECROSIS, OUTSIDE, LabelGrid3, ScalarGrid3, check_geometry

log = logging.getLogger(__name__)

REF_B_VALUES = (0.0, 50.0, 100.0, 150.0, 200.0, 400.0, 800.0)

# box constraints on (D, D*, f); f is capped so the slow compartment stays the
# majority, which removes the f -> 1 branch of mono-exponential signals
F_MAX = 0.5
# pseudo-diffusion floor; keeps D* clear of D so the two decays stay separable
DSTAR_MIN = 3e-3
LOWER = np.array([0.0, DSTAR_MIN, 0.0])
UPPER = np.array([0.01, 1.0, F_MAX])

MAX_ITER = 200
STEP_TOL = 1e-12
SEGMENT_B = 200.0

_GRID_D = np.geomspace(1e-4, 6e-3, 36)
_GRID_DSTAR = np.geomspace(DSTAR_MIN, 0.3, 36)


@dataclass(frozen=True)
class IVIMSignal:
    b_values: tuple
    ratios: tuple

    def __post_init__(self):
        b = np.asarray(self.b_values, dtype=np.float64)
        r = np.asarray(self.ratios, dtype=np.float64)
        if b.ndim != 1 or b.shape != r.shape:
            raise InvalidArgument("b_values and ratios must be 1d of equal length")
        if b[0] != 0 or np.any(np.diff(b) <= 0):
            raise InvalidArgument("b_values must start at 0 and be strictly ascending")
        if b.size < 4 or np.count_nonzero(b >= SEGMENT_B) < 2:
            raise InvalidArgument("need >= 4 b-values with at least two >= 200 s/mm^2")
        object.__setattr__(self, "b_values", tuple(b.tolist()))
        object.__setattr__(self, "ratios", tuple(r.tolist()))

    @classmethod
    def from_signal(cls, b_values, signal) -> "IVIMSignal":
        s = np.asarray(signal, dtype=np.float64)
        if not s[0] > 0:
            raise InvalidSignal("S(0) must be > 0")
        return cls(b_values, s / s[0])


@dataclass(frozen=True)
class IVIMParams:
    D: float
    D_star: float
    f: float
    residual_rms: float = 0.0
    converged: bool = True

    def __post_init__(self):
        if not 0.0 <= self.f <= 1.0:
            raise InvalidArgument(f"f must lie in [0, 1], got {self.f}")
        if self.D < 0:
            raise InvalidArgument(f"D must be >= 0, got {self.D}")


def ivim_curve(D, D_star, f, b):
    """Vectorised signal model; broadcasts over all arguments."""
    D = np.asarray(D, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (1.0 - f) * np.exp(-b * D) + f * np.exp(-b * (D + D_star))


def forward_ivim(params: IVIMParams, b):
    """Signal ratio ``S(b)/S(0)`` for ``params`` at ``b`` (scalar or array)."""
    if np.any(np.asarray(b) < 0):
        raise InvalidArgument("b must be >= 0")
    out = ivim_curve(params.D, params.D_star, params.f, b)
    return float(out) if np.ndim(out) == 0 else out


def _model_and_jac(theta: np.ndarray, b: np.ndarray):
    D, Ds, f = theta[:, 0:1], theta[:, 1:2], theta[:, 2:3]
    e1 = np.exp(-b * D)
    e2 = np.exp(-b * (D + Ds))
    m = (1.0 - f) * e1 + f * e2
    J = np.stack([-b * m, -b * f * e2, e2 - e1], axis=-1)
    return m, J


def _closed_form_f(R, D, Ds, b):
    """Least-squares f for fixed (D, D*), clipped to [0, 1]."""
    e1 = np.exp(-b * D)
    c = np.exp(-b * (D + Ds)) - e1
    cc = np.sum(c * c, axis=-1)
    f = np.where(cc > 0, np.sum((R - e1) * c, axis=-1) / np.where(cc > 0, cc, 1.0), 0.0)
    return np.clip(f, 0.0, F_MAX)


def _segmented_start(R: np.ndarray, b: np.ndarray) -> np.ndarray:
    hi = b >= SEGMENT_B
    x = b[hi]
    y = np.log(R[:, hi])
    xm = x.mean()
    slope = ((x - xm) * (y - y.mean(axis=1, keepdims=True))).sum(axis=1) / ((x - xm) ** 2).sum()
    intercept = y.mean(axis=1) - slope * xm
    D = np.clip(-slope, 1e-6, UPPER[0])
    f = np.clip(1.0 - np.exp(intercept), 0.0, F_MAX)
    Ds = np.maximum(10.0 * D, 1e-2)
    return np.column_stack([D, Ds, f])


def _grid_starts(R: np.ndarray, b: np.ndarray, n_best: int) -> np.ndarray:
    D, Ds = np.meshgrid(_GRID_D, _GRID_DSTAR, indexing="ij")
    D = D.ravel()[None, :, None]
    Ds = Ds.ravel()[None, :, None]
    Rb = R[:, None, :]
    f = _closed_form_f(Rb, D, Ds, b)
    sse = np.sum((Rb - ivim_curve(D, Ds, f[..., None], b)) ** 2, axis=-1)
    order = np.argsort(sse, axis=1, kind="stable")[:, :n_best]
    rows = np.arange(R.shape[0])[:, None]
    return np.stack(
        [np.broadcast_to(D[0, :, 0], sse.shape)[rows, order],
         np.broadcast_to(Ds[0, :, 0], sse.shape)[rows, order],
         f[rows, order]],
        axis=-1,
    )


def _levenberg_marquardt(R: np.ndarray, b: np.ndarray, theta: np.ndarray):
    n = theta.shape[0]
    theta = np.clip(theta, LOWER, UPPER)
    m, J = _model_and_jac(theta, b)
    res = R - m
    sse = np.sum(res * res, axis=1)
    lam = np.full(n, 1e-3)
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    eye = np.eye(3)
    for _ in range(MAX_ITER):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        Ja, ra = J[idx], res[idx]
        A = np.einsum("nki,nkj->nij", Ja, Ja)
        g = np.einsum("nki,nk->ni", Ja, ra)
        diag = np.diagonal(A, axis1=1, axis2=2)
        damp = lam[idx, None, None] * (diag[:, :, None] * eye + 1e-30 * eye)
        try:
            delta = np.linalg.solve(A + damp, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = _safe_solve(A + damp, g)
        trial = np.clip(theta[idx] + delta, LOWER, UPPER)
        mt, Jt = _model_and_jac(trial, b)
        rt = R[idx] - mt
        sse_t = np.sum(rt * rt, axis=1)
        better = sse_t < sse[idx]
        step = np.abs(trial - theta[idx])
        scale = np.abs(theta[idx]) + 1e-12
        small = np.all(step <= STEP_TOL * scale, axis=1)

        acc = idx[better]
        theta[acc], m[acc], J[acc], res[acc], sse[acc] = trial[better], mt[better], Jt[better], rt[better], sse_t[better]
        lam[acc] = np.maximum(lam[acc] / 10.0, 1e-12)
        rej = idx[~better]
        lam[rej] = lam[rej] * 10.0

        done = (better & small) | (sse_t <= 1e-32) | (~better & (lam[idx] > 1e12))
        converged[idx[done]] = True
        active[idx[done]] = False
    return theta, sse, converged


def _safe_solve(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = np.zeros_like(g)
    for k in range(A.shape[0]):
        out[k] = np.linalg.lstsq(A[k], g[k], rcond=None)[0]
    return out


def fit_ivim_batch(b_values: Sequence[float], ratios: np.ndarray, n_starts: int = 3):
    """Fit many signals at once.

    Parameters
    ----------
    b_values : sequence of float
        Ascending b-values starting at 0.
    ratios : ndarray, shape (n, len(b_values))
        Normalised signals ``S(b)/S(0)``; all entries must be > 0.
    n_starts : int
        Number of coarse-grid starts refined next to the segmented start.

    Returns
    -------
    dict with arrays ``D``, ``D_star``, ``f``, ``residual_rms``, ``converged``.
    """
    b = np.asarray(b_values, dtype=np.float64)
    R = np.atleast_2d(np.asarray(ratios, dtype=np.float64))
    if R.shape[1] != b.size:
        raise InvalidArgument("ratios must have one column per b-value")
    if R.shape[0] and (not np.all(np.isfinite(R)) or np.any(R <= 0)):
        raise InvalidSignal("signal ratios must be finite and > 0")
    n = R.shape[0]
    if n == 0:
        empty = np.zeros(0)
        return {"D": empty, "D_star": empty, "f": empty, "residual_rms": empty, "converged": empty.astype(bool)}
    starts = [_segmented_start(R, b)[:, None, :], _grid_starts(R, b, n_starts)]
    starts = np.concatenate(starts, axis=1)
    k = starts.shape[1]
    theta, sse, conv = _levenberg_marquardt(np.repeat(R, k, axis=0), b, starts.reshape(-1, 3).copy())
    theta = theta.reshape(n, k, 3)
    sse = sse.reshape(n, k)
    conv = conv.reshape(n, k)
    best = np.argmin(sse, axis=1)
    rows = np.arange(n)
    th = theta[rows, best]
    return {
        "D": th[:, 0],
        "D_star": th[:, 1],
        "f": th[:, 2],
        "residual_rms": np.sqrt(sse[rows, best] / b.size),
        "converged": conv[rows, best],
    }


def fit_ivim(signal: IVIMSignal) -> IVIMParams:
    """Least-squares IVIM fit over all b-values of one signal."""
    out = fit_ivim_batch(signal.b_values, np.asarray(signal.ratios)[None, :])
    if not out["converged"][0]:
        log.warning("IVIM fit hit the iteration cap; returning best iterate")
    return IVIMParams(
        float(out["D"][0]),
        float(out["D_star"][0]),
        float(out["f"][0]),
        float(out["residual_rms"][0]),
        bool(out["converged"][0]),
    )


def build_dmap(
    dwi_stack: Sequence[ScalarGrid3],
    mask: LabelGrid3,
    b_values: Sequence[float] = REF_B_VALUES,
    max_residual_rms: float | None = None,
) -> ScalarGrid3:
    """D-map from a DWI stack (one grid per b-value, ascending b).

    Tumour voxels (any non-outside label except necrosis) receive the fitted
    D; necrosis is 0 and everything outside the tumour is NaN.  Voxels with
    ``S(0) <= 0`` or non-positive ratios are NaN and counted in a warning.
    With ``max_residual_rms`` set, voxels whose fit residual exceeds it are
    NaN as well.
    """
    if len(dwi_stack) != len(b_values):
        raise InvalidArgument(f"{len(dwi_stack)} DWI grids for {len(b_values)} b-values")
    IVIMSignal(b_values, np.ones(len(b_values)))  # validates the b-values
    for g in dwi_stack:
        check_geometry(g, mask)
    labels = mask.labels
    out = np.full(mask.dims, np.nan)
    out[labels == NECROSIS] = 0.0
    fit_mask = (labels != OUTSIDE) & (labels != NECROSIS)
    if not (labels != OUTSIDE).any():
        log.warning("empty tumour mask; D-map is all NaN")
    S = np.stack([g.values[fit_mask] for g in dwi_stack], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = S / S[:, :1]
    ok = (S[:, 0] > 0) & np.all(np.isfinite(R), axis=1) & np.all(R > 0, axis=1)
    n_bad = int(np.count_nonzero(~ok))
    if n_bad:
        log.warning("%d tumour voxels have invalid signal (S0 <= 0 or non-positive ratios); set to NaN", n_bad)
    fit = fit_ivim_batch(b_values, R[ok])
    D = np.full(S.shape[0], np.nan)
    D[ok] = fit["D"]
    if max_residual_rms is not None:
        gated = np.full(S.shape[0], False)
        gated[ok] = fit["residual_rms"] > max_residual_rms
        if gated.any():
            log.warning("%d voxels exceed residual gate %.3g", int(gated.sum()), max_residual_rms)
        D[gated] = np.nan
    out[fit_mask] = D
    return ScalarGrid3(out, mask.spacing_mm, mask.origin_mm)


def synthesize_dwi(
    dmap: ScalarGrid3,
    mask: LabelGrid3,
    b_values: Sequence[float] = REF_B_VALUES,
    D_star: float = 2e-2,
    f: float = 0.1,
    s0: float = 1000.0,
    noise: float = 0.0,
    seed: int = 0,
) -> list[ScalarGrid3]:
    """Forward-simulate a DWI stack from a D-map (multiplicative Gaussian noise)."""
    rng = np.random.default_rng(seed)
    D = np.nan_to_num(dmap.values, nan=0.0)
    region = mask.region()
    stack = []
    for b in b_values:
        s = s0 * ivim_curve(D, D_star, f, b)
        if noise > 0:
            s = s * (1.0 + noise * rng.standard_normal(s.shape))
        s = np.where(region, np.maximum(s, 1e-6 * s0), 0.0)
        stack.append(ScalarGrid3(s, dmap.spacing_mm, dmap.origin_mm, "dimensionless"))
    return stack
