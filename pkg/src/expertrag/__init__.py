"""Gated retrieval over a sparse mixture-of-experts generator, with exact cost accounting."""
from .config import ModelConfig, RunConfig, TaskConfig, TrainConfig, load_config
from .costs import CostParams, expected_cost, savings_ratio, validate_against_measurement
from .evaluation import EvalMetrics, corpus_update_probe, evaluate
from .pipeline import ExpertRAG, infer, instrumented_infer, marginal_likelihood
from .retrieval import Corpus, search_top_k, update_corpus
from .task import gen_task
from .training import train
from .vocab import Vocab

__all__ = [
    "Corpus",
    "CostParams",
    "EvalMetrics",
    "ExpertRAG",
    "ModelConfig",
    "RunConfig",
    "TaskConfig",
    "TrainConfig",
    "Vocab",
    "corpus_update_probe",
    "evaluate",
    "expected_cost",
    "gen_task",
    "infer",
    "instrumented_infer",
    "load_config",
    "marginal_likelihood",
    "savings_ratio",
    "search_top_k",
    "train",
    "update_corpus",
    "validate_against_measurement",
]
