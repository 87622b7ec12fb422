"""Stochastic answer network for extractive reading comprehension, built on a
small numpy autograd engine."""
from .answer import VARIANTS, DecodedSpan, SpanDistributions, decode_span, kbest_spans
from .data import AnnotatedExample, SyntheticConfig, Vocab, generate_synthetic, load_corpus
from .evaluate import MetricsReport, exact_match, f1_score, normalize_answer
from .model import ForwardOptions, ModelConfig, SANModel
from .tensor import Graph, Tensor
from .train import TrainConfig, run_ablation, seed_robustness

__all__ = [
    "VARIANTS", "DecodedSpan", "SpanDistributions", "decode_span", "kbest_spans",
    "AnnotatedExample", "SyntheticConfig", "Vocab", "generate_synthetic", "load_corpus",
    "MetricsReport", "exact_match", "f1_score", "normalize_answer",
    "ForwardOptions", "ModelConfig", "SANModel", "Graph", "Tensor",
    "TrainConfig", "run_ablation", "seed_robustness",
]
