"""Postoperative glioma volumetry toolkit.

Volume I/O (NIfTI-1), affine geometry and resampling, atlas-grid
preprocessing with intensity-driven registration, multi-label
segmentation metrics, residual-volume resection classification,
cohort statistics and reports, plus a synthetic phantom generator
that exercises the whole chain without any trained model.
"""

from .errors import (
    BadMagic,
    ConstantImage,
    DegenerateMask,
    EmptyInput,
    EmptyMask,
    EorPipeError,
    GeometryMismatch,
    HeaderInconsistent,
    InputError,
    InvalidSpec,
    LabelOutOfRange,
    LossyConversion,
    MissingReferenceSequence,
    NegativeVolume,
    NonIntegerLabels,
    NotNormalized,
    ProcessingError,
    SingularTransform,
    TooFewCases,
    TruncatedData,
    UnmappedLabel,
    UnsupportedDatatype,
)
from .nifti import (
    LabelVolume,
    NiftiHeader,
    VoxelGrid,
    load_label_volume,
    load_volume,
    read_label_volume,
    read_nifti,
    save_label_volume,
    save_volume,
    write_label_volume,
    write_nifti,
)
from .geometry import (
    AffineTransform,
    matrix_to_params,
    nearest_sample,
    params_to_matrix,
    rigid_params_to_matrix,
    trilinear_sample,
)
from .metrics import (
    BinaryMask,
    MetricRecord,
    TARGET_LABELS,
    dice,
    evaluate_case,
    extract_mask,
    hausdorff95,
    jaccard,
    sensitivity_specificity,
    surface_mask,
    volume_cm3,
    volumetric_similarity,
)
from .eor import (
    ClassificationMetrics,
    EorClass,
    EorConfig,
    SubgroupTag,
    assign_subgroups,
    classification_metrics,
    classify_eor,
)
from .cohort import (
    CaseRecord,
    CohortSummary,
    LabelScheme,
    ManifestCase,
    build_report,
    evaluate_manifest,
    evaluate_record,
    harmonize,
    load_manifest,
    load_schemes,
    parse_metrics_csv,
    quartile_groups,
    read_metrics_csv,
    render_csv,
    render_json,
    render_markdown,
    save_manifest,
    summarize_mean_ci,
    summarize_median_iqr,
    write_metrics_csv,
)
from .preprocess import (
    AtlasGrid,
    BrainMask,
    PipelineResult,
    RegistrationConfig,
    RegistrationResult,
    default_atlas_grid,
    otsu_threshold,
    register,
    resample_labels_to_atlas,
    resample_to_atlas,
    run_pipeline,
    skull_strip_fallback,
    zscore_normalize,
)
from .phantom import (
    LesionSpec,
    PhantomSpec,
    SegmenterConfig,
    VariationRanges,
    baseline_segment,
    default_phantom_spec,
    generate_case,
    generate_cohort,
    load_spec,
    regenerate_cohort,
    save_spec,
    synthetic_atlas,
    write_cohort,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
