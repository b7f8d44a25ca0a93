"""Selective retrieval for replay-based continual learning."""

from replaysel.buffer import (
    BufferSample,
    BufferSelectionConfig,
    ReplayBuffer,
    class_membership,
    compute_prototypes,
    select_buffer,
    select_buffer_from_sources,
)
from replaysel.class_selection import (
    BalancedCursor,
    BatchContext,
    BatchImage,
    SwilConfig,
    balanced_next,
    swil_distribution,
    swil_select,
)
from replaysel.engine import (
    AlgorithmSpec,
    DedupSchedule,
    DedupState,
    RetrievalEngine,
    RetrievalPlan,
    adaptive_route,
    advance_window,
    dedup_mask,
    retrieve,
)
from replaysel.loss_adapt import LossAdaptConfig, combined_loss, replay_budget
from replaysel.sample_selection import (
    AsvConfig,
    GraspConfig,
    KnnSvTable,
    LeftTerm,
    asv_scores,
    asv_select,
    grasp_sample,
    grasp_scores,
    knn_sv,
    knn_sv_table,
    precompute_left_term,
    uniform_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AlgorithmSpec",
    "AsvConfig",
    "BalancedCursor",
    "BatchContext",
    "BatchImage",
    "BufferSample",
    "BufferSelectionConfig",
    "DedupSchedule",
    "DedupState",
    "GraspConfig",
    "KnnSvTable",
    "LeftTerm",
    "LossAdaptConfig",
    "ReplayBuffer",
    "RetrievalEngine",
    "RetrievalPlan",
    "SwilConfig",
    "adaptive_route",
    "advance_window",
    "asv_scores",
    "asv_select",
    "balanced_next",
    "class_membership",
    "combined_loss",
    "compute_prototypes",
    "dedup_mask",
    "grasp_sample",
    "grasp_scores",
    "knn_sv",
    "knn_sv_table",
    "precompute_left_term",
    "replay_budget",
    "retrieve",
    "select_buffer",
    "select_buffer_from_sources",
    "swil_distribution",
    "swil_select",
    "uniform_sample",
]
