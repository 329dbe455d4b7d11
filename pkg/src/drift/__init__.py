"""Federated implicit-feedback recommendation with block-based pairwise SGD."""
from drift.blocks import Block, BlockBuffer
from drift.model import EmbeddingStore, GradientBundle, apply_gradients, init_embeddings, recommend_top_k, score_items

__all__ = [
    "Block",
    "BlockBuffer",
    "EmbeddingStore",
    "GradientBundle",
    "apply_gradients",
    "init_embeddings",
    "recommend_top_k",
    "score_items",
]
