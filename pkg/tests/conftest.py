from __future__ import annotations

import numpy as np
import pytest

from dwibiopsy.grid import OUTSIDE, TUMOR, LabelGrid3, Slice2D


def disk_slice(radius_mm: float, spacing: float = 0.25, margin: int = 4, label: int = TUMOR) -> Slice2D:
    """Circular tumour centred at the origin of a square slice."""
    n = int(np.ceil(2 * radius_mm / spacing)) + 2 * margin + 1
    o = -(n - 1) / 2 * spacing
    x = o + np.arange(n) * spacing
    X, Y = np.meshgrid(x, x, indexing="ij")
    lab = np.where(X**2 + Y**2 <= radius_mm**2, label, OUTSIDE).astype(np.uint8)
    return Slice2D(lab, (spacing, spacing), (o, o))


def slice_to_labels(sl: Slice2D) -> LabelGrid3:
    return LabelGrid3(sl.values[:, :, None], (*sl.spacing_mm, 1.0), (*sl.origin_mm, 0.0))


@pytest.fixture(scope="session")
def standard_phantom():
    from dwibiopsy.simulate import generate_phantom

    return generate_phantom()


@pytest.fixture(scope="session")
def standard_setup(standard_phantom):
    """Phantom, superpixel partition and a planner with every path table built."""
    from dwibiopsy.simulate import phantom_partition, phantom_planner

    part = phantom_partition(standard_phantom)
    planner = phantom_planner(standard_phantom, partition=part)
    for a in range(planner.n_access):
        planner.table(a)
    return standard_phantom, part, planner
