"""The dynamic-strategy answering pipeline.

One question runs as a single growing chat. Each round asks the model to pick
a strategy from the remaining pool (decision), executes that strategy
(execution), and, in verifying mode, asks the model whether its own answer is
correct (verification). A "yes" verdict ends the run; a "no" removes the used
strategy from the pool and starts another round, up to a round budget. The
base mode is the one-round, no-verification special case.

Every turn's token spend is recorded per round so trace totals are auditable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .backends import ChatMessage, assistant, system, user
from .datasets import DatasetRecord
from .metrics import exact_match, f1_score, strip_punctuation
from .retrieval import Bm25Index
from .strategies import (
    N_RETRIEVED_PASSAGES,
    Exemplar,
    StrategyOutcome,
    StrategySpec,
    TemplateSet,
    extract_final_answer,
    render_execution_turn,
)

__all__ = [
    "DECISION_MAX_TOKENS",
    "VERIFICATION_MAX_TOKENS",
    "DEFAULT_MAX_ROUNDS",
    "RoundRecord",
    "PipelineTrace",
    "PipelineError",
    "render_decision_prompt",
    "render_verification_turn",
    "parse_decision",
    "parse_verdict",
    "run_dyplan_base",
    "run_dyplan_verify",
    "load_traces",
    "save_traces",
]

DECISION_MAX_TOKENS = 10
VERIFICATION_MAX_TOKENS = 10
DEFAULT_MAX_ROUNDS = 2


class PipelineError(RuntimeError):
    """A pipeline run could not proceed (missing retriever, empty pool, ...)."""


def _strategy_menu(offered: Sequence[StrategySpec]) -> str:
    return "\n".join(f"- {spec.name}: {spec.description}" for spec in offered)


def _format_decision_shots(shots: Sequence[Exemplar]) -> str:
    if not shots:
        return ""
    return "".join(f"Question: {s.question}\n{s.response}\n\n" for s in shots)


def render_decision_prompt(
    question: str,
    offered: Sequence[StrategySpec],
    history: Sequence[ChatMessage] = (),
    templates: TemplateSet | None = None,
    shots: Sequence[Exemplar] = (),
) -> list[ChatMessage]:
    """Messages asking the model to pick one strategy from ``offered``.

    With empty history this opens the chat (system + user); with history the
    prior transcript precedes a retry turn that lists only the remaining
    strategies.
    """
    if not offered:
        raise PipelineError("decision prompt needs a non-empty strategy pool")
    templates = templates or TemplateSet()
    template_id = "decision_retry" if history else "decision"
    system_text, user_template = templates.load(template_id)
    body = user_template
    for key, value in (
        ("shots", _format_decision_shots(shots)),
        ("strategies", _strategy_menu(offered)),
        ("question", question),
    ):
        body = body.replace("{" + key + "}", value)
    if history:
        return list(history) + [user(body)]
    return [system(system_text), user(body)]


def render_verification_turn(
    question: str, answer: str, templates: TemplateSet | None = None
) -> ChatMessage:
    templates = templates or TemplateSet()
    _, user_template = templates.load("verification")
    body = user_template.replace("{question}", question).replace("{answer}", answer)
    return user(body)


def parse_decision(
    text: str,
    offered: Sequence[StrategySpec],
    fallback: str | None = None,
) -> tuple[str, bool]:
    """Map raw decision text to a strategy in the offered pool.

    The first offered-strategy name appearing in the text wins (longest name
    first on equal positions, so overlapping names resolve predictably). When
    nothing matches, the fallback applies: the configured name, or the least
    preferred offered strategy by default, flagged so callers can count it.
    """
    if not offered:
        raise PipelineError("cannot parse a decision against an empty pool")
    lowered = text.lower()
    best: tuple[int, int, str] | None = None
    for spec in offered:
        position = lowered.find(spec.name.lower())
        if position == -1:
            continue
        key = (position, -len(spec.name))
        if best is None or key < (best[0], best[1]):
            best = (position, -len(spec.name), spec.name)
    if best is not None:
        return best[2], False
    fallback_name = fallback if fallback is not None else offered[-1].name
    if fallback_name not in {spec.name for spec in offered}:
        raise PipelineError(
            f"decision fallback {fallback_name!r} is not in the offered pool"
        )
    return fallback_name, True


def parse_verdict(text: str) -> tuple[str, bool]:
    """Map raw verification text to ("yes"|"no", unparseable_flag).

    Only the first whitespace token counts, case-insensitive, punctuation
    ignored. Anything else defaults to "yes" (accept) with the flag set;
    defaulting to "no" would let a broken verifier burn every round budget.
    """
    stripped = text.strip()
    token = strip_punctuation(stripped.split()[0].lower()) if stripped else ""
    if token == "no":
        return "no", False
    if token == "yes":
        return "yes", False
    return "yes", True


@dataclass(frozen=True)
class RoundRecord:
    """Everything one round did: pool, decision, execution outcome, optional verdict."""

    round_index: int
    offered_strategies: tuple[str, ...]
    decision_raw: str
    decision: str
    decision_fallback_used: bool
    decision_gen_tokens: int
    execution: StrategyOutcome
    verification_raw: str | None = None
    verdict: str | None = None
    verdict_unparseable: bool = False
    verification_gen_tokens: int = 0

    def __post_init__(self) -> None:
        if self.decision not in self.offered_strategies:
            raise ValueError(
                f"decision {self.decision!r} not in offered pool {self.offered_strategies}"
            )
        if self.verdict is not None and self.verdict not in ("yes", "no"):
            raise ValueError(f"illegal verdict {self.verdict!r}")

    @property
    def gen_tokens(self) -> int:
        return (
            self.decision_gen_tokens
            + self.execution.gen_tokens
            + self.verification_gen_tokens
        )

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "offered_strategies": list(self.offered_strategies),
            "decision_raw": self.decision_raw,
            "decision": self.decision,
            "decision_fallback_used": self.decision_fallback_used,
            "decision_gen_tokens": self.decision_gen_tokens,
            "execution": self.execution.to_dict(),
            "verification_raw": self.verification_raw,
            "verdict": self.verdict,
            "verdict_unparseable": self.verdict_unparseable,
            "verification_gen_tokens": self.verification_gen_tokens,
        }

    @classmethod
    def from_dict(cls, record: Mapping) -> "RoundRecord":
        return cls(
            round_index=int(record["round_index"]),
            offered_strategies=tuple(record["offered_strategies"]),
            decision_raw=str(record["decision_raw"]),
            decision=str(record["decision"]),
            decision_fallback_used=bool(record["decision_fallback_used"]),
            decision_gen_tokens=int(record["decision_gen_tokens"]),
            execution=StrategyOutcome.from_dict(record["execution"]),
            verification_raw=record.get("verification_raw"),
            verdict=record.get("verdict"),
            verdict_unparseable=bool(record.get("verdict_unparseable", False)),
            verification_gen_tokens=int(record.get("verification_gen_tokens", 0)),
        )


@dataclass(frozen=True)
class PipelineTrace:
    """A full pipeline run for one question, including the final transcript."""

    question_id: str
    mode: str
    rounds: tuple[RoundRecord, ...]
    final_answer: str
    total_gen_tokens: int
    total_retrievals: int
    messages: tuple[ChatMessage, ...]

    def __post_init__(self) -> None:
        if self.mode not in ("base", "verify"):
            raise ValueError(f"illegal pipeline mode {self.mode!r}")
        if not self.rounds:
            raise ValueError("a trace needs at least one round")

    def validate(self) -> None:
        """Check the structural invariants; raises ValueError on violation."""
        if self.mode == "base":
            if len(self.rounds) != 1:
                raise ValueError("base mode must run exactly one round")
            if any(r.verdict is not None for r in self.rounds):
                raise ValueError("base mode must not carry verdicts")
        else:
            if any(r.verdict is None for r in self.rounds):
                raise ValueError("verify mode requires a verdict every round")
        for earlier, later in zip(self.rounds, self.rounds[1:]):
            expected = tuple(
                s for s in earlier.offered_strategies if s != earlier.decision
            )
            if later.offered_strategies != expected:
                raise ValueError(
                    f"round {later.round_index} pool {later.offered_strategies} "
                    f"!= prior pool minus decision {expected}"
                )
        if self.total_gen_tokens != sum(r.gen_tokens for r in self.rounds):
            raise ValueError("total_gen_tokens does not equal the per-round sum")
        if self.total_retrievals != sum(r.execution.retrievals for r in self.rounds):
            raise ValueError("total_retrievals does not equal the per-round sum")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "mode": self.mode,
            "rounds": [r.to_dict() for r in self.rounds],
            "final_answer": self.final_answer,
            "total_gen_tokens": self.total_gen_tokens,
            "total_retrievals": self.total_retrievals,
            "messages": [m.to_dict() for m in self.messages],
        }

    @classmethod
    def from_dict(cls, record: Mapping) -> "PipelineTrace":
        return cls(
            question_id=str(record["question_id"]),
            mode=str(record["mode"]),
            rounds=tuple(RoundRecord.from_dict(r) for r in record["rounds"]),
            final_answer=str(record["final_answer"]),
            total_gen_tokens=int(record["total_gen_tokens"]),
            total_retrievals=int(record["total_retrievals"]),
            messages=tuple(ChatMessage.from_dict(m) for m in record["messages"]),
        )


def _run_round(
    record: DatasetRecord,
    offered: Sequence[StrategySpec],
    client,
    retriever: Bm25Index | None,
    templates: TemplateSet,
    round_index: int,
    transcript: list[ChatMessage],
    verify: bool,
    decision_shots: Sequence[Exemplar],
    decision_fallback: str | None,
) -> tuple[RoundRecord, list[ChatMessage]]:
    request_base = f"{record.id}|round{round_index}"
    decision_messages = render_decision_prompt(
        record.question,
        offered,
        history=transcript,
        templates=templates,
        shots=decision_shots if round_index == 1 else (),
    )
    decision_gen = client.generate(
        decision_messages, DECISION_MAX_TOKENS, request_id=f"{request_base}|decision"
    )
    decision, fallback_used = parse_decision(
        decision_gen.text, offered, fallback=decision_fallback
    )
    transcript = decision_messages + [assistant(decision_gen.text)]
    spec = next(s for s in offered if s.name == decision)

    if spec.needs_retrieval and retriever is None:
        raise PipelineError(
            f"decision picked {spec.name!r} but no retrieval index is configured"
        )
    passages = (
        tuple(retriever.retrieve(record.question, N_RETRIEVED_PASSAGES))
        if spec.needs_retrieval
        else None
    )
    execution_messages = transcript + [
        render_execution_turn(record.question, spec, passages, templates)
    ]
    execution_id = f"{request_base}|execution|{spec.name}"
    execution_gen = client.generate(
        execution_messages, spec.max_gen_tokens, request_id=execution_id
    )
    answer, extra_tokens, forced = extract_final_answer(
        execution_gen, client, execution_messages, request_id=execution_id
    )
    transcript = execution_messages + [assistant(execution_gen.text)]
    golds = record.golds()
    outcome = StrategyOutcome(
        question_id=record.id,
        strategy=spec.name,
        raw_generation=execution_gen.text,
        answer=answer,
        em=exact_match(answer, golds),
        f1=f1_score(answer, golds),
        gen_tokens=execution_gen.gen_tokens + extra_tokens,
        retrievals=1 if spec.needs_retrieval else 0,
        forced_decode_used=forced,
        passages=passages,
    )

    verification_raw = None
    verdict = None
    unparseable = False
    verification_tokens = 0
    if verify:
        verification_messages = transcript + [
            render_verification_turn(record.question, answer, templates)
        ]
        verification_gen = client.generate(
            verification_messages,
            VERIFICATION_MAX_TOKENS,
            request_id=f"{request_base}|verification",
        )
        verdict, unparseable = parse_verdict(verification_gen.text)
        verification_raw = verification_gen.text
        verification_tokens = verification_gen.gen_tokens
        transcript = verification_messages + [assistant(verification_gen.text)]

    round_record = RoundRecord(
        round_index=round_index,
        offered_strategies=tuple(s.name for s in offered),
        decision_raw=decision_gen.text,
        decision=decision,
        decision_fallback_used=fallback_used,
        decision_gen_tokens=decision_gen.gen_tokens,
        execution=outcome,
        verification_raw=verification_raw,
        verdict=verdict,
        verdict_unparseable=unparseable,
        verification_gen_tokens=verification_tokens,
    )
    return round_record, transcript


def _finish(
    record: DatasetRecord,
    mode: str,
    rounds: list[RoundRecord],
    transcript: list[ChatMessage],
) -> PipelineTrace:
    trace = PipelineTrace(
        question_id=record.id,
        mode=mode,
        rounds=tuple(rounds),
        final_answer=rounds[-1].execution.answer,
        total_gen_tokens=sum(r.gen_tokens for r in rounds),
        total_retrievals=sum(r.execution.retrievals for r in rounds),
        messages=tuple(transcript),
    )
    trace.validate()
    return trace


def run_dyplan_base(
    record: DatasetRecord,
    specs: Sequence[StrategySpec],
    client,
    retriever: Bm25Index | None = None,
    templates: TemplateSet | None = None,
    decision_shots: Sequence[Exemplar] = (),
    decision_fallback: str | None = None,
) -> PipelineTrace:
    """One decision, one execution, no second chances."""
    templates = templates or TemplateSet()
    round_record, transcript = _run_round(
        record,
        list(specs),
        client,
        retriever,
        templates,
        round_index=1,
        transcript=[],
        verify=False,
        decision_shots=decision_shots,
        decision_fallback=decision_fallback,
    )
    return _finish(record, "base", [round_record], transcript)


def run_dyplan_verify(
    record: DatasetRecord,
    specs: Sequence[StrategySpec],
    client,
    retriever: Bm25Index | None = None,
    templates: TemplateSet | None = None,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    decision_shots: Sequence[Exemplar] = (),
    decision_fallback: str | None = None,
) -> PipelineTrace:
    """Decision/execution/verification rounds until acceptance or exhaustion.

    The pool shrinks by the used strategy after each rejection; when the round
    budget or the pool runs out, the last round's answer stands even though it
    was rejected.
    """
    if max_rounds < 1:
        raise PipelineError(f"max_rounds must be >= 1, got {max_rounds}")
    templates = templates or TemplateSet()
    offered = list(specs)
    transcript: list[ChatMessage] = []
    rounds: list[RoundRecord] = []
    for round_index in range(1, max_rounds + 1):
        if not offered:
            break
        round_record, transcript = _run_round(
            record,
            offered,
            client,
            retriever,
            templates,
            round_index=round_index,
            transcript=transcript,
            verify=True,
            decision_shots=decision_shots,
            decision_fallback=decision_fallback,
        )
        rounds.append(round_record)
        offered = [s for s in offered if s.name != round_record.decision]
        if round_record.verdict == "yes":
            break
    return _finish(record, "verify", rounds, transcript)


def save_traces(traces: Sequence[PipelineTrace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def load_traces(path: str | Path) -> list[PipelineTrace]:
    traces = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                traces.append(PipelineTrace.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace: {exc}") from exc
    return traces
