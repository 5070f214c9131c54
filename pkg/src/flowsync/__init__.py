"""Flow-matching lip synchronization on a procedural talking-face domain.

The package is a desk-scale study rig: every quantity the pipeline produces
(mouth aperture, identity texture, audio features) has an analytic oracle,
so training, guidance, and sampling behavior can be asserted rather than
eyeballed.
"""

from .errors import (
    ConfigError,
    ContractError,
    DataIOError,
    FlowsyncError,
    GeometryError,
    NumericError,
    ShapeError,
)
from .flowcore import TimeGrid, fm_add, make_time_grid, velocity_target
from .guidance import GuidanceConfig, apply_dscfg, spatial_profile, temporal_weight
from .numerics import Grid2D, RngStream
from .sampler import SamplerConfig, sample_clip, sample_frame
from .training import TrainConfig, cfm_step, pick_pool, train
from .velocity_models import (
    ConditionBundle,
    GaussianOracleModel,
    LearnedVelocityModel,
    load_checkpoint,
    oracle_velocity,
    predict_velocity,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataIOError",
    "FlowsyncError",
    "GeometryError",
    "NumericError",
    "ShapeError",
    "TimeGrid",
    "fm_add",
    "make_time_grid",
    "velocity_target",
    "GuidanceConfig",
    "apply_dscfg",
    "spatial_profile",
    "temporal_weight",
    "Grid2D",
    "RngStream",
    "SamplerConfig",
    "sample_clip",
    "sample_frame",
    "TrainConfig",
    "cfm_step",
    "pick_pool",
    "train",
    "ConditionBundle",
    "GaussianOracleModel",
    "LearnedVelocityModel",
    "load_checkpoint",
    "oracle_velocity",
    "predict_velocity",
    "save_checkpoint",
    "__version__",
]
