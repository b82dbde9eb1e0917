from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwibiopsy.density import DensityModel3d
from dwibiopsy.errors import EmptyComparison, InvalidArgument, InvalidSpec, UndefinedStd
from dwibiopsy.grid import FAT, NECROSIS, OUTSIDE, TUMOR, LabelGrid3, ScalarGrid3
from dwibiopsy.simulate import (
    PhantomSpec,
    StrategyReport,
    _row_stats,
    compare_report,
    generate_phantom,
    load_phantom,
    phantom_planner,
    run_strategy,
    sample_mean,
    sample_stats,
    sample_std,
    save_phantom,
    synthesize_density_map,
)

SMALL = PhantomSpec(dims=(14, 14), semi_axes_mm=(12.0, 10.0), n_bumps=4, U=6, seed=3)


@pytest.fixture(scope="module")
def small_phantom():
    return generate_phantom(SMALL)


# ---------------------------------------------------------------------------
# density synthesis


def test_noiseless_synthesis_is_model():
    rng = np.random.default_rng(0)
    d = ScalarGrid3(rng.uniform(1e-3, 3e-3, (5, 6, 2)), (1.0, 1.0, 1.0))
    m = DensityModel3d()
    rho = synthesize_density_map(d, m, 0.0, seed=1)
    np.testing.assert_array_equal(rho.values, m.raw(d.values))


def test_noise_sd_on_large_grid():
    d = ScalarGrid3(np.full((400, 300, 1), 2e-3), (1.0, 1.0, 1.0))
    rho = synthesize_density_map(d, DensityModel3d(), 6e4, seed=7)
    resid = rho.values - DensityModel3d().raw(2e-3)
    assert abs(resid.std(ddof=1) - 6e4) <= 0.02 * 6e4


def test_synthesis_masking_and_seed():
    d = ScalarGrid3(np.full((4, 4, 1), 2e-3), (1.0, 1.0, 1.0))
    lab = np.full((4, 4, 1), TUMOR, np.uint8)
    lab[0, 0, 0] = OUTSIDE
    lab[1, 1, 0] = NECROSIS
    rho = synthesize_density_map(d, DensityModel3d(), 6e4, 5, LabelGrid3(lab, (1.0, 1.0, 1.0)))
    assert np.isnan(rho.values[0, 0, 0]) and rho.values[1, 1, 0] == 0.0
    again = synthesize_density_map(d, DensityModel3d(), 6e4, 5, LabelGrid3(lab, (1.0, 1.0, 1.0)))
    np.testing.assert_array_equal(rho.values, again.values)
    with pytest.raises(InvalidArgument):
        synthesize_density_map(d, DensityModel3d(), -1.0)


# ---------------------------------------------------------------------------
# phantoms


def test_phantom_is_deterministic(small_phantom):
    again = generate_phantom(SMALL)
    for attr in ("dmap", "dmap_fine", "rho_truth"):
        np.testing.assert_array_equal(getattr(small_phantom, attr).values, getattr(again, attr).values)
    other = generate_phantom(PhantomSpec(**{**SMALL.to_dict(), "seed": 4}))
    assert not np.array_equal(other.dmap.values, small_phantom.dmap.values, equal_nan=True)


def test_phantom_d_within_range(small_phantom):
    vital = small_phantom.labels.labels == TUMOR
    d = small_phantom.dmap.values[vital]
    assert d.min() >= 0.9e-3 and d.max() <= 3.5e-3
    # the mid-rank remap spreads values over most of the range
    assert d.min() < 1.2e-3 and d.max() > 3.2e-3


def test_phantom_reference_stats(small_phantom):
    vital = small_phantom.labels_fine.labels == TUMOR
    vals = small_phantom.rho_truth.values[vital]
    total = 0.0
    for v in vals:
        total += v
    assert small_phantom.mu_rho == pytest.approx(total / vals.size, rel=1e-12)
    assert small_phantom.sigma_rho == pytest.approx(np.std(vals, ddof=1), rel=1e-12)
    assert np.all(vals >= 0)


def test_phantom_blobs_and_invalid_specs():
    ph = generate_phantom(PhantomSpec(**{**SMALL.to_dict(), "necrosis_radius_mm": 3.0, "fat_radius_mm": 2.0}))
    labs = ph.labels.labels
    assert (labs == NECROSIS).any() and (labs == FAT).any()
    assert np.all(ph.rho_truth.values[ph.labels_fine.labels == NECROSIS] == 0)
    for bad in ({"necrosis_radius_mm": 9.0}, {"d_range": (3e-3, 1e-3)}, {"dims": (3, 3)}, {"semi_axes_mm": (40.0, 10.0)}):
        with pytest.raises(InvalidSpec):
            generate_phantom(PhantomSpec(**{**SMALL.to_dict(), **bad}))


def test_phantom_save_load(tmp_path, small_phantom):
    save_phantom(small_phantom, tmp_path)
    back = load_phantom(tmp_path)
    assert back.spec == small_phantom.spec
    assert back.mu_rho == small_phantom.mu_rho and back.sigma_rho == small_phantom.sigma_rho
    np.testing.assert_allclose(back.rho_truth.values, small_phantom.rho_truth.values, rtol=1e-6, equal_nan=True)
    with pytest.raises(InvalidArgument):
        load_phantom(tmp_path / "missing")


# ---------------------------------------------------------------------------
# sample statistics


def test_sample_stats_hand_values():
    assert sample_stats([2, 4]) == (3.0, pytest.approx(1.41421, abs=5e-6))
    assert sample_stats([1, 2, 3, 4]) == (2.5, pytest.approx(1.29099, abs=5e-6))
    assert sample_stats([7.0]) == (7.0, None)
    with pytest.raises(UndefinedStd):
        sample_std([7.0])
    with pytest.raises(InvalidArgument):
        sample_mean([])


def welford(v):
    n, m, m2 = 0, 0.0, 0.0
    for x in v:
        n += 1
        d = x - m
        m += d / n
        m2 += d * (x - m)
    return m, (m2 / (n - 1)) ** 0.5


def test_row_stats_match_one_pass_oracle():
    rng = np.random.default_rng(11)
    R = rng.normal(6e5, 1.5e5, (100_000, 4))
    m, s = _row_stats(R)
    np.testing.assert_allclose(m, R.mean(axis=1), rtol=1e-12)
    np.testing.assert_allclose(s, R.std(axis=1, ddof=1), rtol=1e-12)
    for i in range(0, 100_000, 997):
        wm, ws = welford(R[i])
        assert m[i] == pytest.approx(wm, rel=1e-12) and s[i] == pytest.approx(ws, rel=1e-12)


@given(st.lists(st.floats(0, 2e6), min_size=2, max_size=12))
@settings(max_examples=200, deadline=None)
def test_sample_stats_property(v):
    m, s = sample_stats(v)
    wm, ws = welford(v)
    assert m == pytest.approx(wm, rel=1e-12, abs=1e-6)
    assert s == pytest.approx(ws, rel=1e-9, abs=1e-6)


# ---------------------------------------------------------------------------
# strategies


def test_random_strategy_reproducible_and_parallel_safe(small_phantom):
    a = run_strategy(small_phantom, "random", n_biopsy=3, n_reps=300, seed=9)
    b = run_strategy(small_phantom, "random", n_biopsy=3, n_reps=300, seed=9, workers=3)
    np.testing.assert_array_equal(a.rho_bar_samples, b.rho_bar_samples)
    np.testing.assert_array_equal(a.s_samples, b.s_samples)
    np.testing.assert_array_equal(a.access, b.access)
    c = run_strategy(small_phantom, "random", n_biopsy=3, n_reps=300, seed=10)
    assert not np.array_equal(a.rho_bar_samples, c.rho_bar_samples)
    assert a.n_interventions == 300 and a.rhos.shape == (300, 3)
    assert len(a.samples()) == 900 and all(x.rho >= 0 for x in a.samples())


def test_constrained_strategy_is_exhaustive(small_phantom):
    planner = phantom_planner(small_phantom)
    rep = run_strategy(small_phantom, "constrained", n_biopsy=2, planner=planner)
    assert rep.n_interventions == sum(planner.count(a, 2) for a in range(planner.n_access))
    capped = run_strategy(small_phantom, "constrained", n_biopsy=2, planner=planner, max_interventions=500)
    assert 500 <= capped.n_interventions <= 500 + planner.n_access


def test_single_biopsy_has_no_s(small_phantom):
    rep = run_strategy(small_phantom, "random", n_biopsy=1, n_reps=50)
    assert np.all(np.isnan(rep.s_samples))


def test_unknown_strategy(small_phantom):
    with pytest.raises(InvalidArgument):
        run_strategy(small_phantom, "oracle")


@pytest.fixture(scope="module")
def guided3(standard_setup):
    ph, part, planner = standard_setup
    return run_strategy(ph, "guided", n_biopsy=3, planner=planner, partition=part)


def test_guided_samples_well_separated(standard_setup, guided3):
    ph = standard_setup[0]
    d = ph.dmap_fine.values[ph.labels_fine.labels == TUMOR]
    lo, hi = np.percentile(d, [2, 98])
    span = np.ptp(guided3.d_values, axis=1)
    assert np.all(span >= 0.5 * (hi - lo))


def test_guided_refit_closes_on_truth(standard_setup, guided3):
    ph = standard_setup[0]
    assert guided3.fit["slope"] == pytest.approx(ph.model_truth.slope, rel=0.05)
    assert guided3.fit["cell_load"] == pytest.approx(ph.true_cell_load(), rel=0.05)
    finite = guided3.cell_load_estimates[np.isfinite(guided3.cell_load_estimates)]
    assert np.median(finite) == pytest.approx(ph.true_cell_load(), rel=0.05)


# ---------------------------------------------------------------------------
# comparison


def fake_report(strategy, values, mu=100.0, sigma=10.0, n=2):
    R = np.asarray(values, dtype=float).reshape(-1, n)
    m, s = _row_stats(R)
    return StrategyReport(strategy, n, m, s, mu, sigma, rhos=R)


def test_compare_identical_reports():
    rng = np.random.default_rng(0)
    v = rng.normal(100, 10, 400)
    out = compare_report([fake_report("random", v), fake_report("random", v)])
    assert out["rows"][0] == out["rows"][1]
    assert out["histograms"][0]["rho_bar"].sum() == 200


def test_compare_single_and_hit_fraction():
    v = [100, 100, 95, 95, 130, 130, 60, 60]
    out = compare_report([fake_report("guided", v)])
    (row,) = out["rows"]
    assert row.hit_fraction == 0.5
    assert row.n_interventions == 4
    assert row.mean_rho_bar == pytest.approx(96.25)
    assert len(out["edges"]["rho_bar"]) == 61


def test_compare_errors():
    with pytest.raises(EmptyComparison):
        compare_report([])
    with pytest.raises(EmptyComparison):
        compare_report([fake_report("random", np.zeros((0,)))])
    with pytest.raises(InvalidArgument):
        compare_report([fake_report("random", [1, 2]), fake_report("guided", [1, 2], mu=50.0)])
