"""crowngen: coarse-to-fine dental crown generation.

Point clouds are voxelized, a pluggable coarse predictor proposes a crown
in volume form, per-point offsets and normals refine it, a differentiable
spectral Poisson solve turns the oriented points into an indicator grid,
and marching cubes extracts the final mesh. Training combines a voxel BCE
loss with a curvature/margin-weighted chamfer loss and a normal MSE.
"""

from .config import PipelineConfig, apply_overrides, load_config
from .dpsr import DpsrConfig, DpsrGradients, dpsr_backward, dpsr_forward, sample_trilinear
from .errors import (
    ConfigError,
    CrownGenError,
    DataError,
    EmptyCloud,
    EmptyVolume,
    NoSurface,
    NonFiniteLoss,
    NormalsMissing,
    OutOfBounds,
    PointOutsideGrid,
    ShapeMismatch,
    StageError,
    TooFewPoints,
    UnknownLabel,
    WeightLengthMismatch,
)
from .losses import (
    CmplWeights,
    MetricReport,
    bce_loss,
    chamfer_l2,
    cmpl,
    compute_metrics,
    f_score,
    fidelity,
    normals_loss,
    total_loss,
)
from .meshops import (
    CurvatureField,
    Mesh,
    estimate_curvature,
    estimate_normals,
    extract_margin_line,
    marching_cubes,
)
from .pipeline import (
    evaluate_cases,
    margin_one_sided,
    prepare_training_case,
    run_ablation,
    run_inference,
    train_pipeline,
)
from .refiner import (
    FdiLabel,
    FeatureVolume,
    OracleCoarsePredictor,
    OracleNoise,
    RefinerParams,
    TrainableCoarsePredictor,
    fuse_tp_prompt,
    gather_features,
    load_checkpoint,
    refine,
    save_checkpoint,
    train_step,
)
from .synthetic import SyntheticCase, generate_synthetic_case
from .voxelgrid import (
    GridSpec,
    PointCloud,
    VoxelVolume,
    devoxelize,
    threshold_logits,
    voxelize,
)

__version__ = "0.1.0"
