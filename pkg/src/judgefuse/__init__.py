"""Learn a dialogue-quality scorer from noisy multi-judge pairwise preferences."""
from judgefuse.core import (
    ALL_HEADS,
    DIMENSIONS,
    OVERALL,
    DimensionError,
    EmbeddedItem,
    EvaluatorModel,
    JudgefuseError,
    JudgeLabel,
    JudgePanel,
    ModelFormatError,
    PreferenceRecord,
    QualityHead,
    load_model,
    normal_cdf,
    preference_probability,
    quality_score,
    save_model,
)
from judgefuse.datapipe import (
    DialogueRecord,
    EmbeddingStore,
    balance_labels,
    length_diff_filter,
    load_preference_dataset,
    parse_annotation,
    position_swap_filter,
    read_embedding_store,
    read_labels,
    write_embedding_store,
    write_labels,
)
from judgefuse.likelihood import batch_nll, compute_gradients, pair_log_likelihood, reliability_values
from judgefuse.metrics import (
    PairDecision,
    decide_pairwise,
    dimension_accuracy,
    normalize_score,
    pairwise_accuracy,
    pearson,
    spearman,
)
from judgefuse.training import TrainConfig, TrainingError, TrainTrace, train

__version__ = "0.1.0"
