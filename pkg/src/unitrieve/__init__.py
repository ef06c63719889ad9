"""Cross-modal retrieval toolkit: consensus curation, angular-margin identity
learning, nearest-neighbor score normalization and Rank-k/mAP evaluation."""

__version__ = "0.1.0"

from .curation import CurationMask, ExpertScorer, RetentionReport, curate, rank_of_ground_truth, retention_by_source, retention_curve
from .datagen import GenSpec, GroundTruth, generate, make_imperfect_expert, make_oracle_expert
from .embedding import (
    EmbeddingRecord,
    Pair,
    PairedDataset,
    cosine_similarity,
    l2_normalize,
    similarity_matrix,
    top_k_indices,
)
from .evaluation import RetrievalResult, mean_average_precision, rank_k_accuracy, run_protocol
from .losses import (
    LossOutput,
    MarginConfig,
    alignment_loss,
    ma_id_backward,
    ma_id_forward,
    multimodal_ma_id,
    target_margin_cosine,
)
from .nnn import NnnConfig, compute_bias, normalize_scores
from .trainer import EncoderParams, SeparationMetrics, TrainConfig, project_2d, separation_metrics, train
