"""Semantic-partitioned contrastive pre-training at desk scale.

Tokenize a grayscale image, mask a fraction of the patch tokens, split the
survivors into two disjoint views, encode both with one shared transformer,
and maximize their agreement under a T-distributed spherical contrastive
objective.  Ships with frozen-feature probes, an analytic compute-cost
model, deterministic training with checkpoint resume, and an sklearn-style
estimator layer.
"""

from .encoder import EncoderConfig, EncoderParams, forward_cls, forward_full, forward_pair, init_params
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DegenerateEmbeddingError,
    GraphError,
    MaskRatioError,
    NumericError,
    PlanError,
    ShapeError,
    SpclError,
)
from .estimators import KNNProbe, LinearProbe, SPCLPretrainer
from .flops import CostReport, brute_force_count, encoder_forward_cost, spcl_step_cost
from .gradcheck import finite_diff_check
from .loss import (
    BatchLossReport,
    LossParams,
    batch_loss,
    similarity_matrix,
    tsp_from_cosine,
    tsp_similarity,
)
from .partition import (
    PartitionPlan,
    apply_partition,
    coverage_histogram,
    effective_branch_ratio,
    sample_partition,
)
from .patching import ImageGray, TokenSequence, embed_tokens, extract_patches, sincos_pos_embed
from .probes import LabeledEmbeddings, embed_dataset, knn_probe, linear_probe
from .rng import Streams
from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, TrainState, lr_at, pretrain, run_training, train_step

__version__ = "0.1.0"

__all__ = [
    "BatchLossReport",
    "ConfigError",
    "ContractError",
    "CostReport",
    "DataFormatError",
    "DegenerateEmbeddingError",
    "EncoderConfig",
    "EncoderParams",
    "GraphError",
    "ImageGray",
    "KNNProbe",
    "LabeledEmbeddings",
    "LinearProbe",
    "LossParams",
    "MaskRatioError",
    "NumericError",
    "PartitionPlan",
    "PlanError",
    "SPCLPretrainer",
    "ShapeError",
    "SpclError",
    "Streams",
    "Tensor",
    "TokenSequence",
    "TrainConfig",
    "TrainState",
    "apply_partition",
    "backward",
    "batch_loss",
    "brute_force_count",
    "coverage_histogram",
    "effective_branch_ratio",
    "embed_dataset",
    "embed_tokens",
    "encoder_forward_cost",
    "extract_patches",
    "finite_diff_check",
    "forward_cls",
    "forward_full",
    "forward_pair",
    "init_params",
    "knn_probe",
    "linear_probe",
    "lr_at",
    "no_grad",
    "pretrain",
    "run_training",
    "sample_partition",
    "similarity_matrix",
    "sincos_pos_embed",
    "spcl_step_cost",
    "train_step",
    "tsp_from_cosine",
    "tsp_similarity",
]
