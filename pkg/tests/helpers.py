"""Shared construction helpers for the test suite.

Planted correctness tables follow one convention so cross-checks stay easy:
the gold answer for question ``q`` is ``"gold q"``, a correct cell's answer
is exactly that, and a wrong cell's answer is ``"wrong <strategy> q"``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

from dyplan.datasets import DatasetRecord
from dyplan.strategies import CorrectnessTable, StrategyOutcome


def gold_answer(question_id: str) -> str:
    return f"gold {question_id}"


def make_record(question_id: str) -> DatasetRecord:
    return DatasetRecord(
        id=question_id,
        question=f"What is the answer to {question_id}?",
        answers=(gold_answer(question_id),),
    )


def make_outcome(
    question_id: str,
    strategy: str,
    em: int,
    f1: float | None = None,
    gen_tokens: int = 10,
    retrievals: int = 0,
    answer: str | None = None,
    raw_generation: str | None = None,
) -> StrategyOutcome:
    if answer is None:
        answer = gold_answer(question_id) if em else f"wrong {strategy} {question_id}"
    if f1 is None:
        f1 = 1.0 if em else 0.0
    if raw_generation is None:
        raw_generation = f'Final answer: "{answer}"'
    return StrategyOutcome(
        question_id=question_id,
        strategy=strategy,
        raw_generation=raw_generation,
        answer=answer,
        em=em,
        f1=f1,
        gen_tokens=gen_tokens,
        retrievals=retrievals,
        forced_decode_used=False,
    )


def make_table(
    order: Sequence[str],
    em_rows: Mapping[str, Sequence[int]],
    f1_overrides: Mapping[tuple[str, str], float] | None = None,
    gen_tokens: Mapping[str, int] | None = None,
) -> CorrectnessTable:
    """Build a complete table from per-question EM bit rows aligned with ``order``.

    ``f1_overrides`` adjusts individual cells (typically to give a wrong cell
    partial credit); ``gen_tokens`` sets a per-strategy token cost.
    """
    outcomes: dict[tuple[str, str], StrategyOutcome] = {}
    for question_id, bits in em_rows.items():
        if len(bits) != len(order):
            raise ValueError(f"row {question_id!r} has {len(bits)} bits for {len(order)} strategies")
        for strategy, bit in zip(order, bits):
            f1 = None
            if f1_overrides and (question_id, strategy) in f1_overrides:
                f1 = f1_overrides[(question_id, strategy)]
            outcomes[(question_id, strategy)] = make_outcome(
                question_id,
                strategy,
                em=int(bit),
                f1=f1,
                gen_tokens=(gen_tokens or {}).get(strategy, 10),
                retrievals=1 if strategy == "retrieval" else 0,
            )
    return CorrectnessTable(
        order=list(order),
        question_ids=list(em_rows),
        outcomes=outcomes,
    )


def records_for(table: CorrectnessTable) -> list[DatasetRecord]:
    return [make_record(question_id) for question_id in table.question_ids]
