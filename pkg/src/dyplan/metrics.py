"""Answer scoring and cost accounting.

Predictions are scored with the usual reading-comprehension pair of metrics:
exact match and token-level F1, both computed on normalized strings and taken
as the max over all reference answers. Aggregation adds the two efficiency
axes tracked everywhere in this project: generated tokens and retrieval calls.
"""

from __future__ import annotations

import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

__all__ = [
    "GoldAnswerSet",
    "EvalReport",
    "CostWeights",
    "normalize_answer",
    "strip_punctuation",
    "exact_match",
    "f1_score",
    "aggregate_report",
    "report_from_rows",
    "weighted_cost",
    "report_to_dict",
    "report_to_json",
]

_ARTICLES = re.compile(r"\b(a|an|the)\b")


@lru_cache(maxsize=8192)
def _is_punctuation(char: str) -> bool:
    return unicodedata.category(char).startswith("P")


def strip_punctuation(text: str) -> str:
    """Delete every Unicode punctuation character (category P*) without inserting spaces."""
    return "".join(ch for ch in text if not _is_punctuation(ch))


def normalize_answer(text: str) -> str:
    """Canonical answer form: lowercase, no punctuation, no articles, single spaces.

    The steps run in exactly this order; punctuation removal happens before
    article removal so that e.g. ``"The Apple!"`` normalizes to ``"apple"``.
    """
    text = strip_punctuation(text.lower())
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


@dataclass(frozen=True)
class GoldAnswerSet:
    """Verbatim reference answers for one question; normalization happens at scoring time."""

    question_id: str
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise ValueError(f"gold answer set for {self.question_id!r} is empty")


def exact_match(prediction: str, golds: GoldAnswerSet) -> int:
    """1 if the normalized prediction equals any normalized gold answer, else 0."""
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(gold) for gold in golds.answers))


def _f1_single(pred_tokens: Sequence[str], gold_tokens: Sequence[str]) -> float:
    # Both empty after normalization counts as a match; exactly one empty scores 0.
    if not pred_tokens or not gold_tokens:
        return float(list(pred_tokens) == list(gold_tokens))
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, golds: GoldAnswerSet) -> float:
    """Multiset token overlap F1 on normalized strings, max over the gold answers."""
    pred_tokens = normalize_answer(prediction).split()
    return max(
        _f1_single(pred_tokens, normalize_answer(gold).split())
        for gold in golds.answers
    )


@dataclass(frozen=True)
class EvalReport:
    """Dataset-level means: answer quality plus per-question inference spend."""

    em: float
    f1: float
    tokens_mean: float
    retrievals_mean: float
    n: int


@dataclass(frozen=True)
class CostWeights:
    """Relative prices of one generated token and one retrieval call."""

    w_token: float = 1.0
    w_retrieval: float = 100.0

    def __post_init__(self) -> None:
        for name in ("w_token", "w_retrieval"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")


def aggregate_report(
    items: Sequence[tuple[str, GoldAnswerSet, int, int]],
) -> EvalReport:
    """Score and average (prediction, golds, gen_tokens, retrievals) rows.

    Token and retrieval counts must already be totals across every generation
    turn the item consumed, including any decision or verification turns.
    """
    if not items:
        raise ValueError("cannot aggregate an empty result set")
    n = len(items)
    em = sum(exact_match(pred, golds) for pred, golds, _, _ in items) / n
    f1 = sum(f1_score(pred, golds) for pred, golds, _, _ in items) / n
    tokens = sum(tok for _, _, tok, _ in items) / n
    retrievals = sum(ret for _, _, _, ret in items) / n
    return EvalReport(em=em, f1=f1, tokens_mean=tokens, retrievals_mean=retrievals, n=n)


def report_from_rows(rows: Sequence[tuple[float, float, int, int]]) -> EvalReport:
    """Average already-scored (em, f1, gen_tokens, retrievals) rows."""
    if not rows:
        raise ValueError("cannot aggregate an empty result set")
    n = len(rows)
    return EvalReport(
        em=sum(r[0] for r in rows) / n,
        f1=sum(r[1] for r in rows) / n,
        tokens_mean=sum(r[2] for r in rows) / n,
        retrievals_mean=sum(r[3] for r in rows) / n,
        n=n,
    )


def weighted_cost(report: EvalReport, weights: CostWeights) -> float:
    """Scalar cost of a run: weighted sum of mean tokens and mean retrievals."""
    return weights.w_token * report.tokens_mean + weights.w_retrieval * report.retrievals_mean


def report_to_dict(report: EvalReport, weights: CostWeights) -> dict:
    return {
        "em": report.em,
        "f1": report.f1,
        "tokens_mean": report.tokens_mean,
        "retrievals_mean": report.retrievals_mean,
        "n": report.n,
        "weighted_cost": weighted_cost(report, weights),
    }


def report_to_json(report: EvalReport, weights: CostWeights) -> str:
    """Deterministic JSON rendering (sorted keys, no whitespace variation)."""
    return json.dumps(report_to_dict(report, weights), sort_keys=True)
