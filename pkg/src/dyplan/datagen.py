"""Fine-tuning data built from recorded per-strategy outcomes.

Given the correctness table of a base model, the cheapest-correct strategy per
question defines an optimal policy. Four instance kinds are derived from it:
decision (question to best strategy), execution (a strategy's own successful
generations), verification (yes/no on recorded answers), and multiround (a
failed first round, a rejection, then a successful second round). Instances
are chat transcripts with a loss mask selecting exactly the final assistant
message.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backends import ChatMessage, assistant, user
from .datasets import DatasetRecord
from .pipeline import render_decision_prompt, render_verification_turn
from .strategies import (
    CorrectnessTable,
    StrategyOutcome,
    StrategySpec,
    TemplateSet,
    render_execution_turn,
)

__all__ = [
    "TrainingInstance",
    "KINDS",
    "optimal_policy",
    "build_decision_data",
    "build_execution_data",
    "build_verification_data",
    "build_multiround_data",
    "emit_training_jsonl",
    "mix_combined",
    "DEFAULT_TOTAL_CAP",
]

KINDS = ("decision", "execution", "verification", "multiround")
DEFAULT_TOTAL_CAP = 20000


def optimal_policy(
    table: CorrectnessTable,
    order: Sequence[str] | None = None,
    f1_threshold: float | None = None,
) -> dict[str, str]:
    """Cheapest-correct strategy per question; the last strategy when none succeed."""
    table.validate_complete()
    names = list(order) if order is not None else list(table.order)
    if not names:
        raise ValueError("policy needs a non-empty strategy order")
    policy: dict[str, str] = {}
    for question_id in table.question_ids:
        chosen = names[-1]
        for name in names:
            if table.correct(question_id, name, f1_threshold):
                chosen = name
                break
        policy[question_id] = chosen
    return policy


@dataclass(frozen=True)
class TrainingInstance:
    """One chat transcript plus the loss mask for supervised fine-tuning."""

    kind: str
    source_question_id: str
    source_strategies: tuple[str, ...]
    messages: tuple[ChatMessage, ...]
    train_mask: tuple[bool, ...]

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown training kind {self.kind!r}")
        if len(self.messages) != len(self.train_mask):
            raise ValueError("train_mask length must match messages length")
        if sum(self.train_mask) != 1 or not self.train_mask[-1]:
            raise ValueError("exactly the final message must be marked trainable")
        if self.messages[-1].role != "assistant":
            raise ValueError("the trainable message must be an assistant turn")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "question_id": self.source_question_id,
            "messages": [m.to_dict() for m in self.messages],
            "train_mask": list(self.train_mask),
        }


def _masked(messages: Sequence[ChatMessage]) -> tuple[bool, ...]:
    return tuple([False] * (len(messages) - 1) + [True])


def _records_by_id(records: Sequence[DatasetRecord]) -> dict[str, DatasetRecord]:
    return {record.id: record for record in records}


def _require_record(
    by_id: Mapping[str, DatasetRecord], question_id: str
) -> DatasetRecord:
    record = by_id.get(question_id)
    if record is None:
        raise ValueError(f"table references question {question_id!r} missing from dataset")
    return record


def _execution_exchange(
    record: DatasetRecord,
    spec: StrategySpec,
    outcome: StrategyOutcome,
    templates: TemplateSet,
) -> list[ChatMessage]:
    """The (user execution turn, assistant raw generation) pair for one outcome."""
    passages = outcome.passages if spec.needs_retrieval else None
    turn = render_execution_turn(record.question, spec, passages, templates)
    return [turn, assistant(outcome.raw_generation)]


def build_decision_data(
    table: CorrectnessTable,
    policy: Mapping[str, str],
    records: Sequence[DatasetRecord],
    specs: Sequence[StrategySpec],
    templates: TemplateSet | None = None,
) -> list[TrainingInstance]:
    """One instance per question: the decision prompt answered with the optimal strategy."""
    templates = templates or TemplateSet()
    by_id = _records_by_id(records)
    instances = []
    for question_id in table.question_ids:
        record = _require_record(by_id, question_id)
        target = policy[question_id]
        messages = render_decision_prompt(
            record.question, list(specs), templates=templates
        ) + [assistant(target)]
        instances.append(
            TrainingInstance(
                kind="decision",
                source_question_id=question_id,
                source_strategies=(target,),
                messages=tuple(messages),
                train_mask=_masked(messages),
            )
        )
    return instances


def build_execution_data(
    table: CorrectnessTable,
    records: Sequence[DatasetRecord],
    specs: Sequence[StrategySpec],
    templates: TemplateSet | None = None,
    f1_threshold: float | None = None,
) -> list[TrainingInstance]:
    """Per strategy, its successful questions only, supervising the recorded generation.

    The transcript replays a decision turn that picks the strategy, then the
    execution turn; only the execution generation is trainable.
    """
    templates = templates or TemplateSet()
    by_id = _records_by_id(records)
    instances = []
    for spec in specs:
        for question_id in table.positives(spec.name, f1_threshold):
            record = _require_record(by_id, question_id)
            outcome = table.outcome(question_id, spec.name)
            messages = (
                render_decision_prompt(record.question, list(specs), templates=templates)
                + [assistant(spec.name)]
                + _execution_exchange(record, spec, outcome, templates)
            )
            instances.append(
                TrainingInstance(
                    kind="execution",
                    source_question_id=question_id,
                    source_strategies=(spec.name,),
                    messages=tuple(messages),
                    train_mask=_masked(messages),
                )
            )
    return instances


def build_verification_data(
    table: CorrectnessTable,
    records: Sequence[DatasetRecord],
    specs: Sequence[StrategySpec],
    templates: TemplateSet | None = None,
) -> list[TrainingInstance]:
    """Every (question, strategy) cell, labeled "yes" or "no" by its exact-match bit."""
    templates = templates or TemplateSet()
    by_id = _records_by_id(records)
    instances = []
    for spec in specs:
        for question_id in table.question_ids:
            record = _require_record(by_id, question_id)
            outcome = table.outcome(question_id, spec.name)
            label = "yes" if outcome.em == 1 else "no"
            messages = (
                render_decision_prompt(record.question, list(specs), templates=templates)
                + [assistant(spec.name)]
                + _execution_exchange(record, spec, outcome, templates)
                + [
                    render_verification_turn(record.question, outcome.answer, templates),
                    assistant(label),
                ]
            )
            instances.append(
                TrainingInstance(
                    kind="verification",
                    source_question_id=question_id,
                    source_strategies=(spec.name,),
                    messages=tuple(messages),
                    train_mask=_masked(messages),
                )
            )
    return instances


def build_multiround_data(
    table: CorrectnessTable,
    records: Sequence[DatasetRecord],
    specs: Sequence[StrategySpec],
    templates: TemplateSet | None = None,
    pair_budget: int | None = None,
) -> list[TrainingInstance]:
    """Recovery transcripts: strategy s1 fails, gets rejected, s2 succeeds.

    For every ordered strategy pair (s1, s2) the eligible questions are those
    where s1 missed and s2 hit (by exact match); ``pair_budget`` caps each
    pair's contribution, taking questions in dataset order.
    """
    templates = templates or TemplateSet()
    if pair_budget is not None and pair_budget < 1:
        raise ValueError(f"pair_budget must be >= 1, got {pair_budget}")
    by_id = _records_by_id(records)
    instances = []
    for first in specs:
        for second in specs:
            if first.name == second.name:
                continue
            eligible = [
                qid
                for qid in table.question_ids
                if table.outcome(qid, first.name).em == 0
                and table.outcome(qid, second.name).em == 1
            ]
            if pair_budget is not None:
                eligible = eligible[:pair_budget]
            remaining = [s for s in specs if s.name != first.name]
            for question_id in eligible:
                record = _require_record(by_id, question_id)
                first_outcome = table.outcome(question_id, first.name)
                second_outcome = table.outcome(question_id, second.name)
                transcript = (
                    render_decision_prompt(record.question, list(specs), templates=templates)
                    + [assistant(first.name)]
                    + _execution_exchange(record, first, first_outcome, templates)
                    + [
                        render_verification_turn(
                            record.question, first_outcome.answer, templates
                        ),
                        assistant("no"),
                    ]
                )
                transcript = (
                    render_decision_prompt(
                        record.question,
                        remaining,
                        history=transcript,
                        templates=templates,
                    )
                    + [assistant(second.name)]
                    + _execution_exchange(record, second, second_outcome, templates)
                )
                instances.append(
                    TrainingInstance(
                        kind="multiround",
                        source_question_id=question_id,
                        source_strategies=(first.name, second.name),
                        messages=tuple(transcript),
                        train_mask=_masked(transcript),
                    )
                )
    return instances


def _stratified_shares(counts: Mapping[str, int], cap: int) -> dict[str, int]:
    """Largest-remainder apportionment of ``cap`` across kinds, proportional to counts.

    Every kind's share is within one of its exact proportional entitlement;
    remainder ties break by kind name so the split is reproducible.
    """
    total = sum(counts.values())
    exact = {kind: cap * count / total for kind, count in counts.items()}
    shares = {kind: math.floor(value) for kind, value in exact.items()}
    leftover = cap - sum(shares.values())
    by_remainder = sorted(
        counts, key=lambda kind: (-(exact[kind] - shares[kind]), kind)
    )
    for kind in by_remainder[:leftover]:
        shares[kind] += 1
    return shares


def emit_training_jsonl(
    instances: Sequence[TrainingInstance],
    path: str | Path,
    shuffle_seed: int = 0,
    total_cap: int = DEFAULT_TOTAL_CAP,
) -> dict[str, int]:
    """Write instances as JSONL, capped with stratified sampling across kinds.

    Sampling within a kind and the final global order are driven entirely by
    ``shuffle_seed``. Returns the per-kind counts actually written.
    """
    if not instances:
        raise ValueError("no training instances to emit")
    if total_cap < 1:
        raise ValueError(f"total_cap must be >= 1, got {total_cap}")
    rng = random.Random(shuffle_seed)
    by_kind: dict[str, list[TrainingInstance]] = {}
    for instance in instances:
        by_kind.setdefault(instance.kind, []).append(instance)
    if len(instances) <= total_cap:
        shares = {kind: len(group) for kind, group in by_kind.items()}
    else:
        shares = _stratified_shares(
            {kind: len(group) for kind, group in by_kind.items()}, total_cap
        )
    selected: list[TrainingInstance] = []
    for kind in sorted(by_kind):
        group = list(by_kind[kind])
        rng.shuffle(group)
        selected.extend(group[: shares[kind]])
    rng.shuffle(selected)
    with open(path, "w", encoding="utf-8") as fh:
        for instance in selected:
            fh.write(json.dumps(instance.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    written: dict[str, int] = {}
    for instance in selected:
        written[instance.kind] = written.get(instance.kind, 0) + 1
    return written


def mix_combined(
    datasets: Sequence[Sequence[TrainingInstance]],
    total: int,
    names: Sequence[str] | None = None,
) -> list[TrainingInstance]:
    """Equal-share mixture of several datasets' instances summing exactly to ``total``.

    The remainder after integer division goes to the earliest datasets, so
    three datasets at 20000 give shares (6667, 6667, 6666). A dataset too
    small for its share is an error naming it.
    """
    if len(datasets) < 2:
        raise ValueError("need at least two datasets to mix")
    if total < len(datasets):
        raise ValueError(f"total {total} is smaller than the number of datasets")
    count = len(datasets)
    base = total // count
    remainder = total - base * count
    shares = [base + (1 if position < remainder else 0) for position in range(count)]
    labels = list(names) if names is not None else [str(i) for i in range(count)]
    mixed: list[TrainingInstance] = []
    for position, (dataset, share) in enumerate(zip(datasets, shares)):
        if len(dataset) < share:
            raise ValueError(
                f"dataset {labels[position]} has {len(dataset)} instances, needs {share}"
            )
        mixed.extend(dataset[:share])
    return mixed
