"""Answering strategies: registry, prompt assembly, and fixed-strategy runs.

Four strategies ship by default, ordered cheapest-first: answer directly,
decompose into sub-questions, reason step by step, or retrieve passages and
then reason. Each has a prompt template and exemplar shots on disk; a fixed
run executes one strategy for every question and records the outcome, and the
full rectangle of (question, strategy) outcomes forms the correctness table
that drives data generation and the oracle analyses.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .backends import ANSWER_MARKER, ChatMessage, Generation, assistant, system, user
from .datasets import DatasetRecord
from .metrics import exact_match, f1_score
from .retrieval import Bm25Index, Passage

__all__ = [
    "StrategySpec",
    "StrategyRegistry",
    "Exemplar",
    "TemplateSet",
    "StrategyOutcome",
    "CorrectnessTable",
    "PromptError",
    "TableIncompleteError",
    "DEFAULT_ORDER",
    "N_RETRIEVED_PASSAGES",
    "FORCED_DECODE_MAX_TOKENS",
    "render_fixed_prompt",
    "render_execution_turn",
    "format_passages",
    "parse_marked_answer",
    "extract_final_answer",
    "run_fixed",
    "run_fixed_dataset",
]

N_RETRIEVED_PASSAGES = 3
FORCED_DECODE_MAX_TOKENS = 20

_PACKAGE_DIR = Path(__file__).resolve().parent


class PromptError(ValueError):
    """Prompt assembly got inconsistent inputs (wrong shot count, missing passages, ...)."""


class TableIncompleteError(ValueError):
    """A correctness table is missing (question, strategy) cells."""


@dataclass(frozen=True)
class StrategySpec:
    """One answering strategy and its execution budget.

    ``preference_rank`` is 1-based and cheapest-first; lower rank means the
    planner should prefer it when it suffices.
    """

    name: str
    description: str
    preference_rank: int
    max_gen_tokens: int
    n_shot: int
    needs_retrieval: bool
    template_id: str

    def __post_init__(self) -> None:
        if self.preference_rank < 1:
            raise ValueError(f"preference_rank must be >= 1, got {self.preference_rank}")
        if self.max_gen_tokens < 1:
            raise ValueError(f"max_gen_tokens must be >= 1, got {self.max_gen_tokens}")
        if self.n_shot < 0:
            raise ValueError(f"n_shot must be >= 0, got {self.n_shot}")


DEFAULT_SPECS: tuple[StrategySpec, ...] = (
    StrategySpec(
        name="direct",
        description="Answer immediately with no intermediate reasoning; cheapest option.",
        preference_rank=1,
        max_gen_tokens=100,
        n_shot=8,
        needs_retrieval=False,
        template_id="direct",
    ),
    StrategySpec(
        name="plan",
        description="Break the question into follow-up sub-questions, answer them in order, then conclude.",
        preference_rank=2,
        max_gen_tokens=200,
        n_shot=4,
        needs_retrieval=False,
        template_id="plan",
    ),
    StrategySpec(
        name="reason",
        description="Reason step by step from memory before giving the answer.",
        preference_rank=3,
        max_gen_tokens=200,
        n_shot=8,
        needs_retrieval=False,
        template_id="reason",
    ),
    StrategySpec(
        name="retrieval",
        description="Read retrieved passages, reason over them, then answer; costs one retrieval call.",
        preference_rank=4,
        max_gen_tokens=200,
        n_shot=8,
        needs_retrieval=True,
        template_id="retrieval",
    ),
)

DEFAULT_ORDER: tuple[str, ...] = tuple(s.name for s in DEFAULT_SPECS)


class StrategyRegistry:
    """Known strategies plus derivation of run-specific preference orders."""

    def __init__(self, specs: Sequence[StrategySpec] = DEFAULT_SPECS) -> None:
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate strategy names in {names}")
        ranks = sorted(s.preference_rank for s in specs)
        if ranks != list(range(1, len(specs) + 1)):
            raise ValueError(f"preference ranks must be 1..{len(specs)}, got {ranks}")
        self._specs = {s.name: s for s in sorted(specs, key=lambda s: s.preference_rank)}

    def names(self) -> list[str]:
        return list(self._specs)

    def spec(self, name: str) -> StrategySpec:
        try:
            return self._specs[name]
        except KeyError:
            raise ValueError(
                f"unknown strategy {name!r}; known: {list(self._specs)}"
            ) from None

    def ordered(self, names: Sequence[str]) -> list[StrategySpec]:
        """Specs for a run's preference order, re-ranked by position.

        Any non-empty, duplicate-free subset of the registry is a legal order;
        runs over two or three strategies are common ablations.
        """
        if not names:
            raise ValueError("strategy order must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate strategies in order {list(names)}")
        return [
            replace(self.spec(name), preference_rank=position)
            for position, name in enumerate(names, 1)
        ]


@dataclass(frozen=True)
class Exemplar:
    """One in-context example: a question and the full desired response."""

    question: str
    response: str


class TemplateSet:
    """Prompt templates and exemplar shots from a directory (defaults ship in-package).

    A template file holds the system part, a line containing only ``---``, and
    the user part. Placeholders ``{question}``, ``{passages}``, ``{shots}``,
    ``{strategies}`` and ``{answer}`` are substituted literally, so braces in
    question or passage text are safe.
    """

    def __init__(
        self,
        template_dir: str | Path | None = None,
        shots_dir: str | Path | None = None,
    ) -> None:
        self.template_dir = Path(template_dir) if template_dir else _PACKAGE_DIR / "templates"
        self.shots_dir = Path(shots_dir) if shots_dir else _PACKAGE_DIR / "shots"
        self._templates: dict[str, tuple[str, str]] = {}
        self._shots: dict[str, list[Exemplar]] = {}

    def load(self, template_id: str) -> tuple[str, str]:
        """(system_text, user_text) for a template id; cached after first read."""
        cached = self._templates.get(template_id)
        if cached is not None:
            return cached
        path = self.template_dir / f"{template_id}.txt"
        if not path.exists():
            raise PromptError(f"no template {template_id!r} under {self.template_dir}")
        raw = path.read_text(encoding="utf-8")
        parts = raw.split("\n---\n", 1)
        if len(parts) != 2:
            raise PromptError(f"{path}: expected a '---' line separating system and user parts")
        loaded = (parts[0].strip("\n"), parts[1].strip("\n"))
        self._templates[template_id] = loaded
        return loaded

    def shots(self, name: str, n: int) -> list[Exemplar]:
        """First ``n`` exemplars from ``<shots_dir>/<name>.jsonl``."""
        if n == 0:
            return []
        if name not in self._shots:
            path = self.shots_dir / f"{name}.jsonl"
            if not path.exists():
                raise PromptError(f"no exemplar file {name!r} under {self.shots_dir}")
            exemplars = []
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = json.loads(line)
                        exemplars.append(
                            Exemplar(str(record["question"]), str(record["response"]))
                        )
                    except (ValueError, KeyError, TypeError) as exc:
                        raise PromptError(f"{path}:{lineno}: bad exemplar: {exc}") from exc
            self._shots[name] = exemplars
        available = self._shots[name]
        if len(available) < n:
            raise PromptError(
                f"exemplar file {name!r} has {len(available)} entries, need {n}"
            )
        return available[:n]


_DEFAULT_TEMPLATES = TemplateSet()


def format_passages(passages: Sequence[Passage]) -> str:
    """Numbered passage block, texts verbatim, in retrieval rank order."""
    return "\n".join(
        f"[{pos}] {p.doc_title}: {p.text}" for pos, p in enumerate(passages, 1)
    )


def _format_shots(shots: Sequence[Exemplar]) -> str:
    if not shots:
        return ""
    return "".join(f"Question: {s.question}\n{s.response}\n\n" for s in shots)


def _fill(template: str, values: Mapping[str, str]) -> str:
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


def render_fixed_prompt(
    question: str,
    spec: StrategySpec,
    shots: Sequence[Exemplar],
    passages: Sequence[Passage] | None = None,
    templates: TemplateSet | None = None,
) -> list[ChatMessage]:
    """Two-message prompt (system + user) for running one strategy standalone.

    Passages must be supplied exactly when the strategy retrieves; the shot
    count must match the spec so prompt shape never drifts silently.
    """
    templates = templates or _DEFAULT_TEMPLATES
    if spec.needs_retrieval and passages is None:
        raise PromptError(f"strategy {spec.name!r} requires retrieved passages")
    if not spec.needs_retrieval and passages:
        raise PromptError(f"strategy {spec.name!r} does not take passages")
    if len(shots) != spec.n_shot:
        raise PromptError(
            f"strategy {spec.name!r} expects {spec.n_shot} shots, got {len(shots)}"
        )
    system_text, user_template = templates.load(spec.template_id)
    body = _fill(
        user_template,
        {
            "shots": _format_shots(shots),
            "passages": format_passages(passages or []),
            "question": question,
        },
    )
    return [system(system_text), user(body)]


def render_execution_turn(
    question: str,
    spec: StrategySpec,
    passages: Sequence[Passage] | None = None,
    templates: TemplateSet | None = None,
) -> ChatMessage:
    """The user turn asking for one strategy's execution inside a longer chat.

    Zero-shot by design: mid-conversation turns rely on the transcript, not
    on exemplars, and the system part of the template is not repeated.
    """
    templates = templates or _DEFAULT_TEMPLATES
    if spec.needs_retrieval and passages is None:
        raise PromptError(f"strategy {spec.name!r} requires retrieved passages")
    _, user_template = templates.load(spec.template_id)
    body = _fill(
        user_template,
        {
            "shots": "",
            "passages": format_passages(passages or []),
            "question": question,
        },
    )
    return user(body)


_MARKER_RE = re.compile(re.escape(ANSWER_MARKER), re.IGNORECASE)


def _clean_answer(raw: str) -> str:
    """Trim whitespace, one trailing period, and one layer of matched quotes."""
    text = raw.strip()
    if text.endswith("."):
        text = text[:-1].rstrip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
        if text.endswith("."):
            text = text[:-1].rstrip()
    return text


def parse_marked_answer(text: str) -> str | None:
    """Answer after the last (case-insensitive) marker, or None if no marker."""
    matches = list(_MARKER_RE.finditer(text))
    if not matches:
        return None
    tail = text[matches[-1].end() :]
    return _clean_answer(tail.split("\n", 1)[0])


def extract_final_answer(
    generation: Generation,
    client,
    messages: Sequence[ChatMessage],
    request_id: str | None = None,
) -> tuple[str, int, bool]:
    """(answer, extra_tokens, forced) from a generation.

    When the marker is absent, exactly one forced continuation is issued: the
    assistant turn is reseeded with the original text plus the marker, and the
    continuation (budget ``FORCED_DECODE_MAX_TOKENS``, newline-stopped) is
    taken as the answer. An empty continuation yields ``""``, which scores as
    wrong.
    """
    parsed = parse_marked_answer(generation.text)
    if parsed is not None:
        return parsed, 0, False
    prefix = generation.text + "\n" if generation.text else ""
    continuation_messages = list(messages) + [assistant(prefix + ANSWER_MARKER)]
    continuation = client.generate(
        continuation_messages,
        FORCED_DECODE_MAX_TOKENS,
        stop_sequences=("\n",),
        request_id=f"{request_id}|force" if request_id else None,
    )
    answer = parse_marked_answer(continuation.text)
    if answer is None:
        answer = _clean_answer(continuation.text)
    return answer, continuation.gen_tokens, True


@dataclass(frozen=True)
class StrategyOutcome:
    """One (question, strategy) execution: raw generation, parsed answer, scores, spend."""

    question_id: str
    strategy: str
    raw_generation: str
    answer: str
    em: int
    f1: float
    gen_tokens: int
    retrievals: int
    forced_decode_used: bool
    passages: tuple[Passage, ...] | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        record = {
            "question_id": self.question_id,
            "strategy": self.strategy,
            "raw_generation": self.raw_generation,
            "answer": self.answer,
            "em": self.em,
            "f1": self.f1,
            "gen_tokens": self.gen_tokens,
            "retrievals": self.retrievals,
            "forced_decode_used": self.forced_decode_used,
            "passages": None
            if self.passages is None
            else [
                {
                    "passage_id": p.passage_id,
                    "doc_title": p.doc_title,
                    "text": p.text,
                    "token_count": p.token_count,
                }
                for p in self.passages
            ],
            "error": self.error,
        }
        return record

    @classmethod
    def from_dict(cls, record: Mapping) -> "StrategyOutcome":
        passages = record.get("passages")
        return cls(
            question_id=str(record["question_id"]),
            strategy=str(record["strategy"]),
            raw_generation=str(record["raw_generation"]),
            answer=str(record["answer"]),
            em=int(record["em"]),
            f1=float(record["f1"]),
            gen_tokens=int(record["gen_tokens"]),
            retrievals=int(record["retrievals"]),
            forced_decode_used=bool(record["forced_decode_used"]),
            passages=None
            if passages is None
            else tuple(Passage(**p) for p in passages),
            error=record.get("error"),
        )


def run_fixed(
    record: DatasetRecord,
    spec: StrategySpec,
    client,
    retriever: Bm25Index | None = None,
    templates: TemplateSet | None = None,
    shots: Sequence[Exemplar] | None = None,
) -> StrategyOutcome:
    """Execute one strategy on one question and score the extracted answer.

    Retrieval strategies count exactly one retrieval event regardless of how
    many passages come back; token spend includes any forced continuation.
    """
    templates = templates or _DEFAULT_TEMPLATES
    if spec.needs_retrieval and retriever is None:
        raise ValueError(f"strategy {spec.name!r} needs a retriever")
    passages = (
        tuple(retriever.retrieve(record.question, N_RETRIEVED_PASSAGES))
        if spec.needs_retrieval
        else None
    )
    if shots is None:
        shots = templates.shots(spec.name, spec.n_shot)
    messages = render_fixed_prompt(record.question, spec, shots, passages, templates)
    request_id = f"{record.id}|fixed|execution|{spec.name}"
    generation = client.generate(
        messages, spec.max_gen_tokens, request_id=request_id
    )
    answer, extra_tokens, forced = extract_final_answer(
        generation, client, messages, request_id=request_id
    )
    golds = record.golds()
    return StrategyOutcome(
        question_id=record.id,
        strategy=spec.name,
        raw_generation=generation.text,
        answer=answer,
        em=exact_match(answer, golds),
        f1=f1_score(answer, golds),
        gen_tokens=generation.gen_tokens + extra_tokens,
        retrievals=1 if spec.needs_retrieval else 0,
        forced_decode_used=forced,
        passages=passages,
    )


def _failure_outcome(record: DatasetRecord, spec: StrategySpec, error: Exception) -> StrategyOutcome:
    return StrategyOutcome(
        question_id=record.id,
        strategy=spec.name,
        raw_generation="",
        answer="",
        em=0,
        f1=0.0,
        gen_tokens=0,
        retrievals=0,
        forced_decode_used=False,
        error=f"{type(error).__name__}: {error}",
    )


@dataclass
class CorrectnessTable:
    """The full rectangle of per-strategy outcomes over a dataset.

    Question and strategy order are preserved so iteration, serialization,
    and downstream sampling are all deterministic.
    """

    order: list[str]
    question_ids: list[str]
    outcomes: dict[tuple[str, str], StrategyOutcome]

    def outcome(self, question_id: str, strategy: str) -> StrategyOutcome:
        try:
            return self.outcomes[(question_id, strategy)]
        except KeyError:
            raise TableIncompleteError(
                f"no outcome for ({question_id!r}, {strategy!r})"
            ) from None

    def correct(
        self, question_id: str, strategy: str, f1_threshold: float | None = None
    ) -> bool:
        """Success test for one cell: exact match, or F1 at/above the threshold."""
        outcome = self.outcome(question_id, strategy)
        if outcome.em == 1:
            return True
        return f1_threshold is not None and outcome.f1 >= f1_threshold

    def positives(self, strategy: str, f1_threshold: float | None = None) -> list[str]:
        return [
            qid for qid in self.question_ids if self.correct(qid, strategy, f1_threshold)
        ]

    def negatives(self, strategy: str, f1_threshold: float | None = None) -> list[str]:
        return [
            qid
            for qid in self.question_ids
            if not self.correct(qid, strategy, f1_threshold)
        ]

    def validate_complete(self) -> None:
        missing = [
            (qid, strategy)
            for qid in self.question_ids
            for strategy in self.order
            if (qid, strategy) not in self.outcomes
        ]
        if missing:
            shown = ", ".join(f"({q!r}, {s!r})" for q, s in missing[:5])
            raise TableIncompleteError(
                f"{len(missing)} missing (question, strategy) cells, e.g. {shown}"
            )

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for qid in self.question_ids:
                for strategy in self.order:
                    fh.write(
                        json.dumps(
                            self.outcome(qid, strategy).to_dict(),
                            ensure_ascii=False,
                            sort_keys=True,
                        )
                        + "\n"
                    )

    @classmethod
    def load_jsonl(cls, path: str | Path, order: Sequence[str]) -> "CorrectnessTable":
        outcomes: dict[tuple[str, str], StrategyOutcome] = {}
        question_ids: list[str] = []
        seen_ids: set[str] = set()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    outcome = StrategyOutcome.from_dict(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad outcome: {exc}") from exc
                if outcome.question_id not in seen_ids:
                    seen_ids.add(outcome.question_id)
                    question_ids.append(outcome.question_id)
                outcomes[(outcome.question_id, outcome.strategy)] = outcome
        table = cls(order=list(order), question_ids=question_ids, outcomes=outcomes)
        table.validate_complete()
        return table


def run_fixed_dataset(
    records: Sequence[DatasetRecord],
    specs: Sequence[StrategySpec],
    client,
    retriever: Bm25Index | None = None,
    templates: TemplateSet | None = None,
    parallelism: int = 1,
    on_outcome: Callable[[StrategyOutcome], None] | None = None,
) -> CorrectnessTable:
    """Run every strategy on every question, producing a complete table.

    Per-question failures become marker outcomes (``error`` set, zero scores)
    so the rectangle stays complete. Questions run concurrently up to
    ``parallelism``; results are collected in dataset order by one thread.
    """
    if not records:
        raise ValueError("no questions to run")
    templates = templates or _DEFAULT_TEMPLATES
    shot_cache = {spec.name: templates.shots(spec.name, spec.n_shot) for spec in specs}

    def run_question(record: DatasetRecord) -> list[StrategyOutcome]:
        outcomes = []
        for spec in specs:
            try:
                outcomes.append(
                    run_fixed(
                        record,
                        spec,
                        client,
                        retriever=retriever,
                        templates=templates,
                        shots=shot_cache[spec.name],
                    )
                )
            except Exception as exc:  # noqa: BLE001 - per-cell isolation is the point
                outcomes.append(_failure_outcome(record, spec, exc))
        return outcomes

    if parallelism <= 1:
        per_question = [run_question(record) for record in records]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            per_question = list(pool.map(run_question, records))

    table = CorrectnessTable(
        order=[spec.name for spec in specs],
        question_ids=[record.id for record in records],
        outcomes={},
    )
    for outcomes in per_question:
        for outcome in outcomes:
            table.outcomes[(outcome.question_id, outcome.strategy)] = outcome
            if on_outcome is not None:
                on_outcome(outcome)
    table.validate_complete()
    return table
