"""Multi-planar co-training for volumetric semi-supervised segmentation.

Per-plane 2D softmax segmenters trained by SGD, a cross-plane fusion rule
(two-plane agreement with a max-confidence fallback), and an iterative
teacher/student loop that pseudo-labels unlabeled volumes between rounds.
Ships with a synthetic phantom generator, DSC + paired-significance
metrics, binary volume/mask/weights formats and a CLI.
"""

from .backbone import (
    PatchFeatureSpec,
    SoftmaxSegmenter,
    TrainConfig,
    TrainingDivergedError,
    WeightsFormatError,
    featurize,
    load_model,
    save_model,
    train_segmenter,
)
from .config import ConfigError, ExperimentConfig, format_config, load_config, parse_config
from .core_volume import (
    DEFAULT_WINDOWS,
    BadMagicError,
    DimsError,
    FileFormatError,
    LabelMask,
    LabelRangeError,
    TruncatedFileError,
    Volume,
    WindowSpec,
    channelize,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    window_rescale,
    windowed_channels,
)
from .cotrain import (
    MODES,
    CotrainAborted,
    CotrainSettings,
    Dataset,
    PlaneModelBundle,
    RunLog,
    RunLogEvent,
    generate_pseudo_labels,
    run_dmpct,
    run_dmpct_confident,
    run_mode,
    run_spsl,
    run_supervised,
    select_confident_slices,
    slice_confidence,
    train_teacher,
)
from .fusion import (
    FusedMask,
    FusionShapeError,
    PlanePrediction,
    fuse_volume,
    fuse_voxel,
    predict_plane,
    predict_volume,
)
from .metrics import (
    EvaluationResult,
    OrganReport,
    comparison_rows,
    dsc,
    evaluate_models,
    evaluate_predictions,
    paired_significance,
    write_report_csv,
    write_result_json,
)
from .phantom import (
    OrganTemplate,
    PhantomGenerationError,
    PhantomSpec,
    generate_case,
    generate_dataset,
    load_dataset,
    save_dataset,
    shifted,
)
from .planar import (
    PLANES,
    Plane,
    ReconstructionError,
    SliceStack,
    extract_slice,
    plane_extent,
    slice_axis,
    slice_field,
    stack_slices,
)
from .seeds import derive_seed

__version__ = "0.1.0"
