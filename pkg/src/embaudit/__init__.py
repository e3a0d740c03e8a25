"""Batch-effect audit toolkit for image-feature embeddings."""

__version__ = "0.1.0"

from .errors import (
    CapacityError,
    ConsistencyError,
    DataError,
    DegenerateStainError,
    DivergenceError,
    EmbAuditError,
    FormatError,
    IncompatibilityError,
    ParameterError,
    SplitError,
    TaskError,
)
from .geometry import (
    DistanceProfile,
    PcaModel,
    SeparabilityProfile,
    distance_profiles,
    fit_pca,
    ovo_auroc_oriented,
    project,
    reconstruct,
    reduced_knn_curve,
    separability_profile,
)
from .probes import (
    LinearProbe,
    LpConfig,
    NccModel,
    ProbeReport,
    knn_predict,
    lp_predict,
    lp_train,
    ncc_fit,
    ncc_predict,
    run_bias_experiment,
    run_site_prediction,
)
from .splits import (
    BiasSpec,
    GroupedSplit,
    build_bias_splits,
    patient_split,
    save_split_ids,
    subsample_per_site,
)
from .stainproc import (
    MacenkoTarget,
    PipelineConfig,
    ReinhardTarget,
    RgbPatch,
    macenko_apply,
    macenko_fit,
    otsu_threshold,
    patch_std_filter,
    reinhard_apply,
    reinhard_fit,
    run_patch_pipeline,
    tissue_mask,
)
from .synthgen import SynthConfig, generate, generate_with_truth
from .table import (
    EmbeddingTable,
    LabelCodebook,
    PatchMeta,
    concat_tables,
    load_table,
    save_table,
)
