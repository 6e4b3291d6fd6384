"""Multi-view decision fusion for volumetric segmentation at desk scale."""

__version__ = "0.1.0"

from .errors import (
    AllZeroWeights,
    BadMagic,
    DimMismatch,
    EmptyStageList,
    InconsistentStack,
    IndivisibleInput,
    InfeasibleSpec,
    LengthMismatch,
    MVFusionError,
    NonFiniteGradient,
    NonFiniteLoss,
    ShrinkNotAllowed,
    TooFewViews,
    TruncatedFile,
    UnalignableBatches,
    UnsupportedDtype,
    UnsupportedShape,
    ZeroVariance,
)
from .fusion import (
    FusionWeights,
    Voting,
    VoteCountVolume,
    WeightedAveraging,
    blend_distributions,
    fuse_labels,
    fused_distribution,
    one_hot_argmax,
    vote_counts,
    vote_decide,
    vote_fuse,
    wa_fuse,
    weighted_average,
)
from .io import RunConfig, read_nifti, read_rawvol, write_rawvol
from .loss import (
    ClassWeights,
    LossBundle,
    LossConfig,
    class_weights,
    decision_loss,
    finite_diff_check,
    fused_field,
    grad_logits,
    multi_view_fusion_loss,
    multiview_objective,
    segmentation_loss,
    softmax,
    transition_loss,
    wce,
)
from .metrics import (
    COMPLETE,
    CORE,
    ENHANCING,
    REGIONS,
    DiceReport,
    RegionScore,
    RegionSpec,
    dice,
    evaluate,
    region_mask,
    write_report_csv,
)
from .model import (
    ArchSpec,
    EpochStats,
    StepPlan,
    ToySegmenter,
    TrainConfig,
    TrainResult,
    build_step_plan,
    forward,
    forward_logits,
    load_checkpoint,
    predict_volume,
    save_checkpoint,
    shape_check,
    train_multiview,
)
from .phantom import (
    BALANCED_RADII,
    NATURAL_RADII,
    PhantomSpec,
    generate_phantom,
    phantom_dataset,
)
from .volume import (
    IntensityVolume,
    LabelVolume,
    ProbVolume,
    SliceStack,
    ViewAxis,
    assemble_volume,
    extract_slices,
    one_hot,
    pad_to,
    slice_array,
    stack_modalities,
    unslice_array,
    zscore_normalize,
)

__all__ = [name for name in dir() if not name.startswith("_")]
