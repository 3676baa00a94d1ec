"""Instance-identity similarity over precomputed embedding bundles.

The package covers the full pipeline: binary bundle IO, entropic
optimal-transport patch similarity, contrastive losses with analytic
gradients, a trainable dual-head projection with hand-rolled AdamW,
balanced triplet curation, retrieval/verification/correlation
protocols, and edit-grid sensitivity analysis. Everything is numpy
end to end and deterministic given a seed.
"""
from ._version import __version__
from .bundle import EmbeddingBundle, make_bundle, read_bundle, write_bundle
from .curation import (
    aggregate_votes,
    apply_filters,
    assign_splits,
    balanced_allocate,
    build_triplets,
    load_inventory,
    mine_hard_negatives,
    sample_instances,
)
from .errors import (
    CorruptBundle,
    DuplicateId,
    Error,
    FormatError,
    InsufficientInventory,
    InvalidInput,
    IoError,
    MissingItem,
    NoCandidates,
    ShapeError,
    SingularDesign,
    UndefinedMetric,
)
from .heads import (
    DualHead,
    apply_head,
    forward,
    identity_dual_head,
    init_dual_head,
    load_head,
    save_head,
)
from .losses import (
    BatchScores,
    LossConfig,
    bce_loss,
    cls_loss,
    hinge_loss,
    infonce_grad,
    infonce_loss,
    patch_loss,
    total_loss,
)
from .metrics import (
    average_precision,
    cosine_similarity,
    kendall_tau_b,
    ndcg_score,
    rank_correlations,
    roc_auc,
    spearman_rho,
    triplet_correct,
)
from .protocols import (
    RetrievalTask,
    TripletTask,
    mean_average_precision,
    run_protocol,
    similarity,
    triplet_accuracy,
)
from .records import (
    ImageManifest,
    PairLabel,
    Triplet,
    VoteRecord,
    load_manifest,
    load_pair_labels,
    load_triplets,
    load_votes,
    save_manifest,
    save_triplets,
    validate_triplets,
)
from .reporting import canonical_json, config_hash, write_json_report
from .rng import derived_rng, shuffled
from .sensitivity import (
    EditGrid,
    GridPoint,
    analyze_grids,
    bootstrap_aggregate,
    fit_instance,
    load_grids,
    similarity_trend,
)
from .sinkhorn import (
    SinkhornConfig,
    divergence_grad,
    sim_patch,
    sinkhorn_divergence,
    subsample_tokens,
)
from .trainer import TrainConfig, TrainResult, train, train_step

__all__ = [
    "__version__",
    "EmbeddingBundle",
    "make_bundle",
    "read_bundle",
    "write_bundle",
    "aggregate_votes",
    "apply_filters",
    "assign_splits",
    "balanced_allocate",
    "build_triplets",
    "load_inventory",
    "mine_hard_negatives",
    "sample_instances",
    "Error",
    "FormatError",
    "CorruptBundle",
    "InvalidInput",
    "IoError",
    "DuplicateId",
    "MissingItem",
    "ShapeError",
    "NoCandidates",
    "InsufficientInventory",
    "SingularDesign",
    "UndefinedMetric",
    "DualHead",
    "apply_head",
    "forward",
    "identity_dual_head",
    "init_dual_head",
    "load_head",
    "save_head",
    "BatchScores",
    "LossConfig",
    "bce_loss",
    "cls_loss",
    "hinge_loss",
    "infonce_grad",
    "infonce_loss",
    "patch_loss",
    "total_loss",
    "average_precision",
    "cosine_similarity",
    "kendall_tau_b",
    "ndcg_score",
    "rank_correlations",
    "roc_auc",
    "spearman_rho",
    "triplet_correct",
    "RetrievalTask",
    "TripletTask",
    "mean_average_precision",
    "run_protocol",
    "similarity",
    "triplet_accuracy",
    "ImageManifest",
    "PairLabel",
    "Triplet",
    "VoteRecord",
    "load_manifest",
    "load_pair_labels",
    "load_triplets",
    "load_votes",
    "save_manifest",
    "save_triplets",
    "validate_triplets",
    "canonical_json",
    "config_hash",
    "write_json_report",
    "derived_rng",
    "shuffled",
    "EditGrid",
    "GridPoint",
    "analyze_grids",
    "bootstrap_aggregate",
    "fit_instance",
    "load_grids",
    "similarity_trend",
    "SinkhornConfig",
    "divergence_grad",
    "sim_patch",
    "sinkhorn_divergence",
    "subsample_tokens",
    "TrainConfig",
    "TrainResult",
    "train",
    "train_step",
]
