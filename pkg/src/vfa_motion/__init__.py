"""Inter-scan motion correction for variable flip angle R1 mapping.

Estimates relative receive-sensitivity fields between head positions from
rapid calibration images, either by smoothed image ratios or by fitting a
generative image model, and removes the differential modulation they cause
in two-point R1 maps. Includes a forward simulator and masked evaluation
metrics for end-to-end validation.
"""

__version__ = "0.1.0"

from .bending import BendingOperator
from .errors import (
    ConfigError,
    FitError,
    GeometryError,
    GridMismatchError,
    SolverError,
    VfaMotionError,
)
from .estimators import GenerativeSensitivity, RatioSensitivity
from .evaluate import MaeReport, condition_table, mae, reference_map
from .genmodel import FitConfig, GenModelState, SensitivityField
from .ratio import CalibrationImage, ratio_relative_sensitivity, upsample_delta
from .signal import (
    B1Map,
    TissueParams,
    VfaAcquisition,
    apply_relative_sensitivity,
    r1_vfa,
    spgr_signal,
    spgr_signal_smallfa,
)
from .solver import DiagPlusBending, solve
from .volume import (
    Grid,
    RigidTransform,
    Volume,
    barycentre_grid,
    coarsen_grid,
    gaussian_smooth,
    load_volume,
    reslice,
    save_volume,
)

__all__ = [
    "__version__",
    "BendingOperator",
    "B1Map",
    "CalibrationImage",
    "ConfigError",
    "DiagPlusBending",
    "FitConfig",
    "FitError",
    "GenModelState",
    "GenerativeSensitivity",
    "GeometryError",
    "Grid",
    "GridMismatchError",
    "MaeReport",
    "RatioSensitivity",
    "RigidTransform",
    "SensitivityField",
    "SolverError",
    "TissueParams",
    "VfaAcquisition",
    "VfaMotionError",
    "Volume",
    "apply_relative_sensitivity",
    "barycentre_grid",
    "coarsen_grid",
    "condition_table",
    "gaussian_smooth",
    "load_volume",
    "mae",
    "r1_vfa",
    "ratio_relative_sensitivity",
    "reference_map",
    "reslice",
    "save_volume",
    "solve",
    "spgr_signal",
    "spgr_signal_smallfa",
    "upsample_delta",
]
