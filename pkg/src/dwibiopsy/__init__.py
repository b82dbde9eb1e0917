"""DWI-guided biopsy planning: D-maps, superpixel targets, needle paths and cellularity."""

from .config import PipelineConfig, load_config
from .density import (
    CancerFractionModel,
    DensityModel2d,
    DensityModel3d,
    DensityScale,
    cell_load,
    chow_test,
    density_map_3d,
    density_maps,
    fit_linear,
    pearson,
    prediction_interval,
)
from .errors import BiopsyError
from .grid import (
    Histogram,
    LabelGrid3,
    ROIRect2,
    ScalarGrid3,
    Slice2D,
    boundary_contour,
    distance_to_boundary,
    fd_bin_width,
    histogram,
    kl_convergence,
    kl_divergence,
    resample_bicubic,
    roi_mean_d,
    shared_histograms,
)
from .gridio import load_grid, save_grid
from .ivim import IVIMParams, IVIMSignal, build_dmap, fit_ivim, forward_ivim
from .needle import (
    Intervention,
    NeedleConstraints,
    NeedlePlanner,
    enumerate_interventions,
    guided_search,
    plan_guided,
    random_intervention,
    tip_roi,
)
from .partition import (
    OptimalDTargets,
    Region,
    SuperpixelPartition,
    optimal_d_values,
    select_candidates,
    superpixels_2d,
    supervoxels_3d,
)
from .report import emit_histogram_svg
from .simulate import (
    Phantom,
    PhantomSpec,
    StrategyReport,
    compare_report,
    generate_phantom,
    run_strategy,
    sample_stats,
    synthesize_density_map,
)

__version__ = "0.1.0"
