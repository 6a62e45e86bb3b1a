from .objective import (
    context_pairs,
    corpus_log_likelihood,
    full_softmax_prob,
    log_sigmoid,
    pair_gradients,
    pair_loss,
    sigmoid,
)
from .sampling import NegativeTable
from .space import EmbeddingSpace, load_binary, load_text, save_binary, save_text
from .trainer import TrainConfig, TrainingDiverged, negative_table_for, train

__all__ = [
    "EmbeddingSpace",
    "NegativeTable",
    "TrainConfig",
    "TrainingDiverged",
    "context_pairs",
    "corpus_log_likelihood",
    "full_softmax_prob",
    "load_binary",
    "load_text",
    "log_sigmoid",
    "negative_table_for",
    "pair_gradients",
    "pair_loss",
    "save_binary",
    "save_text",
    "sigmoid",
    "train",
]
