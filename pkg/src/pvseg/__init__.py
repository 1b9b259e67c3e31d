"""Perivascular space segmentation toolkit.

Library layout:

- ``volume``: Volume/LabelMap containers, spacing policy, intensity utilities
- ``nifti``: minimal NIfTI-1 reader/writer
- ``clusters``: connected-component statistics
- ``annotation``: label schemes, sparse slice annotation, region filtering
- ``enhance``: denoising and contrast enhancement
- ``network``: residual 3D U-Net as a flat parameter vector, losses, gradients
- ``augment``: spatial and intensity augmentation
- ``training``: Adam loop, LR schedule, patch sampling, checkpoints
- ``inference``: sliding-window prediction, pseudo-label rounds
- ``evaluation``: voxel/cluster metrics, agreement statistics, fold splits
- ``phantom``: synthetic tubular cohorts with exact reference statistics
- ``manifest`` / ``config``: dataset and pipeline configuration on disk
- ``cli``: command-line workflow
"""

from .annotation import (
    BG_PVS,
    IGNORE,
    WM_PVS,
    WMH,
    LabelScheme,
    SparseAnnotation,
    apply_sparse_ignore,
    merge_wmh,
    roi_retain,
)
from .augment import AugmentConfig, augment, resample_pair
from .clusters import ClusterStats, cluster_count_vector, connected_components
from .config import EvalConfig, PipelineConfig
from .enhance import EnhanceConfig, adaptive_hist_eq, enhance_pipeline, estimate_sigma, nlm_filter
from .evaluation import (
    AgreementStats,
    ConfusionCounts,
    FoldAssignment,
    agreement_stats,
    aggregate_report,
    bland_altman,
    confusion,
    dsc_sen_ppv,
    lin_ccc,
    report_csv,
    spearman,
    stratified_kfold,
)
from .inference import infer, infer_channels, merge_training_set, pseudo_label_round
from .manifest import (
    Manifest,
    ManifestCase,
    canonical_json,
    config_fingerprint,
    load_manifest,
    save_manifest,
)
from .network import (
    LossInputs,
    NetConfig,
    NetModel,
    build_model,
    cross_entropy_loss,
    dice_loss,
    forward,
    gradients,
    load_checkpoint,
    loss_and_gradients,
    loss_inputs,
    param_count,
    param_index,
    save_checkpoint,
    softmax_probs,
    total_loss,
)
from .nifti import read_nifti, read_nifti_header, write_nifti
from .phantom import PhantomConfig, compartment_masks, generate_phantom, phantom_cohort, wmh_blob_probability
from .training import (
    AdamState,
    LRState,
    TrainConfig,
    TrainingCase,
    adam_step,
    lr_update,
    sample_patch,
    train,
)
from .volume import (
    LabelMap,
    SpacingPolicy,
    Volume,
    clip_zscore,
    otsu_foreground,
    rescale_unit,
    resample,
)

__version__ = "0.1.0"
