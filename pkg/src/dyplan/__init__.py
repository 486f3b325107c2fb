"""Dynamic strategy planning for question answering.

A model can answer a question directly, decompose it, reason it out, or
retrieve evidence first; these cost very different amounts. This package runs
those strategies individually, runs a planner that picks (and, with
verification, revises) a strategy per question, derives fine-tuning data from
recorded outcomes, and analyzes how close a planner gets to the
cheapest-correct policy.
"""

from .backends import (
    BackendConfig,
    ChatMessage,
    Generation,
    GenerationClient,
    ResponseCache,
    cached_generate,
    generate,
    make_backend,
)
from .datasets import DatasetRecord, load_dataset
from .metrics import (
    CostWeights,
    EvalReport,
    GoldAnswerSet,
    aggregate_report,
    exact_match,
    f1_score,
    normalize_answer,
    weighted_cost,
)
from .pipeline import PipelineTrace, RoundRecord, run_dyplan_base, run_dyplan_verify
from .retrieval import Bm25Index, Passage, chunk_corpus
from .strategies import (
    CorrectnessTable,
    StrategyOutcome,
    StrategyRegistry,
    StrategySpec,
    run_fixed,
    run_fixed_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BackendConfig",
    "Bm25Index",
    "ChatMessage",
    "CorrectnessTable",
    "CostWeights",
    "DatasetRecord",
    "EvalReport",
    "Generation",
    "GenerationClient",
    "GoldAnswerSet",
    "Passage",
    "PipelineTrace",
    "ResponseCache",
    "RoundRecord",
    "StrategyOutcome",
    "StrategyRegistry",
    "StrategySpec",
    "aggregate_report",
    "cached_generate",
    "chunk_corpus",
    "exact_match",
    "f1_score",
    "generate",
    "load_dataset",
    "make_backend",
    "normalize_answer",
    "run_dyplan_base",
    "run_dyplan_verify",
    "run_fixed",
    "run_fixed_dataset",
    "weighted_cost",
]
