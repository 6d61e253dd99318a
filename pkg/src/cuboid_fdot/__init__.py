"""Cuboid-target reconstruction for time-domain fluorescence diffuse optical tomography."""

__version__ = "0.1.0"

from .forward import (  # noqa: E402
    Cuboid,
    CuboidOperator,
    MeasurementSet,
    QuadConfig,
    SourceDetectorPair,
    TimeWindow,
    VoxelField,
    forward_cuboid,
    forward_voxelized,
    select_window,
    simulate_timeseries,
    topography_integrals,
)
from .inversion import (  # noqa: E402
    BoundsBox,
    CubicParams,
    CuboidParams,
    LMConfig,
    PipelineConfig,
    ReconstructionResult,
    lm_solve,
    reconstruct,
    stage1_topography,
    stage2_cubic,
    stage3_cuboid,
)
from .kernel import InstrumentResponse, OpticalMedium, capital_Q, derive_medium, greens_function  # noqa: E402
from .phantom import (  # noqa: E402
    PAPER_ELLIPSOID,
    EllipsoidTarget,
    NoiseSpec,
    add_noise,
    layout_beef16,
    layout_paper32,
    voxelize_ellipsoid,
)
