"""Text-based knowledge-graph completion with predictive descriptions."""
from .augment import BACKWARD, FORWARD, InverseRegistry, Query, load_inverse_registry, symmetrize
from .describe import (DescriptionCache, HTTPGenerationClient, PromptTemplate, StubClient,
                       describe_queries, render_prompt)
from .encoder import EncoderModel, Featurizer, Vocabulary, load_checkpoint, save_checkpoint
from .estimator import KermitLinkPredictor
from .evaluate import Metrics, evaluate_split, predict_topk
from .kg import KnowledgeGraph, build_filter_index, generate_synthetic_kg, load_dataset
from .train import EncoderConfig, LossConfig, TrainConfig, fit, info_nce_loss

__version__ = "0.1.0"

__all__ = [
    "BACKWARD", "FORWARD", "DescriptionCache", "EncoderConfig", "EncoderModel", "Featurizer",
    "HTTPGenerationClient", "InverseRegistry", "KermitLinkPredictor", "KnowledgeGraph",
    "LossConfig", "Metrics", "PromptTemplate", "Query", "StubClient", "TrainConfig",
    "Vocabulary", "build_filter_index", "describe_queries", "evaluate_split", "fit",
    "generate_synthetic_kg", "info_nce_loss", "load_checkpoint", "load_dataset",
    "load_inverse_registry", "predict_topk", "render_prompt", "save_checkpoint", "symmetrize",
]
