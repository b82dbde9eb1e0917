from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwibiopsy.errors import InvalidArgument, InvalidSignal
from dwibiopsy.grid import NECROSIS, OUTSIDE, TUMOR, LabelGrid3, ScalarGrid3
from dwibiopsy.ivim import (
    REF_B_VALUES,
    IVIMParams,
    IVIMSignal,
    build_dmap,
    fit_ivim,
    fit_ivim_batch,
    forward_ivim,
    synthesize_dwi,
)

B = np.array(REF_B_VALUES)


def signal(D, Ds, f, b=B):
    return IVIMSignal(b, forward_ivim(IVIMParams(D, Ds, f), b))


def test_forward_hand_values():
    assert forward_ivim(IVIMParams(1.7e-3, 3e-2, 0.2), 0.0) == 1.0
    assert forward_ivim(IVIMParams(2e-3, 1e-2, 0.0), 500) == pytest.approx(math.exp(-1), abs=1e-15)
    # 0.9 * 0.449328964 + 0.1 * 0.000150733 (tabulated exponentials)
    assert forward_ivim(IVIMParams(1e-3, 1e-2, 0.1), 800) == pytest.approx(0.4044111, abs=1e-7)
    assert forward_ivim(IVIMParams(1e-3, 1e-2, 0.1), 800) == pytest.approx(0.9 * math.exp(-0.8) + 0.1 * math.exp(-8.8), rel=1e-14)


def test_forward_rejects_negative_b():
    with pytest.raises(InvalidArgument):
        forward_ivim(IVIMParams(1e-3, 1e-2, 0.1), -1)


@given(D=st.floats(1e-5, 5e-3), Ds=st.floats(1e-3, 0.1), f=st.floats(0, 0.99))
@settings(max_examples=100, deadline=None)
def test_forward_strictly_decreasing(D, Ds, f):
    s = forward_ivim(IVIMParams(D, Ds, f), np.linspace(0, 1000, 50))
    assert np.all(np.diff(s) < 0)


def test_noiseless_fit_recovers_d():
    p = fit_ivim(signal(2e-3, 2e-2, 0.1))
    assert abs(p.D - 2e-3) / 2e-3 < 0.005
    assert p.residual_rms < 1e-10


def test_f_zero_matches_log_linear_slope():
    s = signal(1.3e-3, 2e-2, 0.0)
    slope = -np.polyfit(B, np.log(s.ratios), 1)[0]
    assert abs(fit_ivim(s).D - slope) / slope < 0.001


def test_fit_is_deterministic():
    s = signal(1.1e-3, 4e-2, 0.25)
    a, b = fit_ivim(s), fit_ivim(s)
    assert (a.D, a.D_star, a.f, a.residual_rms) == (b.D, b.D_star, b.f, b.residual_rms)


@given(D=st.floats(0.5e-3, 3.5e-3), Ds=st.floats(5e-3, 5e-2), f=st.floats(0, 0.3))
@settings(max_examples=60, deadline=None)
def test_noiseless_roundtrip_property(D, Ds, f):
    out = fit_ivim_batch(B, forward_ivim(IVIMParams(D, Ds, f), B)[None, :])
    assert abs(out["D"][0] - D) / D < 0.005
    assert out["residual_rms"][0] < 1e-10


def test_signal_validation():
    with pytest.raises(InvalidArgument):
        IVIMSignal([0, 100, 50, 800], [1, 0.9, 0.8, 0.5])
    with pytest.raises(InvalidArgument):
        IVIMSignal([0, 50, 100], [1, 0.9, 0.8])
    with pytest.raises(InvalidSignal):
        IVIMSignal.from_signal(B, np.zeros(7))


def _field():
    x = np.arange(8)
    X, Y = np.meshgrid(x, x, indexing="ij")
    D = 0.8e-3 + 2.5e-3 * (X + 2 * Y) / 21
    lab = np.full((8, 8, 1), TUMOR, np.uint8)
    lab[0, :] = OUTSIDE
    lab[5, 5] = NECROSIS
    return ScalarGrid3(D[:, :, None], (2.1, 2.1, 6.0)), LabelGrid3(lab, (2.1, 2.1, 6.0))


def test_build_dmap_recovers_field():
    dm, lab = _field()
    out = build_dmap(synthesize_dwi(dm, lab, B), lab, B)
    fit = lab.labels == TUMOR
    rel = np.abs(out.values[fit] - dm.values[fit]) / dm.values[fit]
    assert rel.max() < 0.005
    assert np.isnan(out.values[lab.labels == OUTSIDE]).all()
    assert out.values[5, 5, 0] == 0.0


def test_build_dmap_all_necrosis_and_empty(caplog):
    dm, _ = _field()
    nec = LabelGrid3(np.full((8, 8, 1), NECROSIS, np.uint8), (2.1, 2.1, 6.0))
    out = build_dmap(synthesize_dwi(dm, nec, B), nec, B)
    assert (out.values == 0).all()
    empty = LabelGrid3(np.zeros((8, 8, 1), np.uint8), (2.1, 2.1, 6.0))
    with caplog.at_level(logging.WARNING):
        out = build_dmap(synthesize_dwi(dm, empty, B), empty, B)
    assert np.isnan(out.values).all()
    assert "empty" in caplog.text


def test_build_dmap_flags_bad_voxels(caplog):
    dm, lab = _field()
    stack = synthesize_dwi(dm, lab, B)
    v = stack[0].values.copy()
    v[3, 3, 0] = 0.0
    stack[0] = ScalarGrid3(v, dm.spacing_mm, unit="dimensionless")
    with caplog.at_level(logging.WARNING):
        out = build_dmap(stack, lab, B)
    assert np.isnan(out.values[3, 3, 0])
    assert "1" in caplog.text


def test_build_dmap_stack_length():
    dm, lab = _field()
    with pytest.raises(InvalidArgument):
        build_dmap(synthesize_dwi(dm, lab, B)[:-1], lab, B)
