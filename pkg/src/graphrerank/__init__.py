"""Test-time graph-convolution re-ranking for click-through-rate rankers."""
from .data import LabeledPairs, Vocab, binarize, build_matrix, load_interactions, sample_negatives, split
from .evaluation import EvalReport, evaluate, rank_users
from .exceptions import DataError, DataWarning, FormatError, NumericalError
from .graphenc import graph_encode_mode, propagate
from .model import DCNRanker, fit_grid, score_batch
from .rerank import GraphConvReranker, rerank_scores
from .similarity import SimilarityIndex, build_index

__version__ = "0.1.0"

__all__ = [
    "DCNRanker", "DataError", "DataWarning", "EvalReport", "FormatError", "GraphConvReranker", "LabeledPairs",
    "NumericalError", "SimilarityIndex", "Vocab", "binarize", "build_index", "build_matrix", "evaluate",
    "fit_grid", "graph_encode_mode", "load_interactions", "propagate", "rank_users", "rerank_scores",
    "sample_negatives", "score_batch", "split",
]
