"""Exact cosine retrieval with similarity coverage analysis."""

from ._core import (
    CovsearchError,
    assignment,
    contrastive_loss,
    generate_synthetic,
    l2_normalize,
    match_loss,
    recall_at_k,
    resolve,
    similarity_matrix,
    top_k,
    train_adapter,
)

__all__ = [
    "CovsearchError",
    "assignment",
    "contrastive_loss",
    "generate_synthetic",
    "l2_normalize",
    "match_loss",
    "recall_at_k",
    "resolve",
    "similarity_matrix",
    "top_k",
    "train_adapter",
]
