"""Post-hoc analyses over correctness tables and pipeline traces.

Covers the calibration questions this project keeps asking: how a planner's
strategy usage compares to the optimal policy (distributions, KL, accuracy),
what verification buys (pre/post divergence, rejection precision), the
oracle-policy upper bound, a majority-vote ensemble baseline, and the
per-subset success masses that show how often the strategy hierarchy is
violated.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

from .metrics import EvalReport, GoldAnswerSet, exact_match, normalize_answer, report_from_rows
from .pipeline import PipelineTrace
from .strategies import CorrectnessTable

__all__ = [
    "DEFAULT_KL_EPS",
    "usage_distribution",
    "kl_divergence",
    "decision_accuracy",
    "round1_choices",
    "final_choices",
    "VerificationStats",
    "verification_stats",
    "upper_bound",
    "majority_ensemble",
    "CombinationContribution",
    "hierarchy_violations",
]

DEFAULT_KL_EPS = 1e-9


def usage_distribution(
    choices: Sequence[str], order: Sequence[str]
) -> dict[str, float]:
    """Fraction of choices per strategy, keyed in preference order, zeros included."""
    if not choices:
        raise ValueError("cannot compute a distribution over zero choices")
    counts = Counter(choices)
    unknown = sorted(set(counts) - set(order))
    if unknown:
        raise ValueError(f"choices mention strategies outside the order: {unknown}")
    n = len(choices)
    return {name: counts.get(name, 0) / n for name in order}


def kl_divergence(
    p: Mapping[str, float], q: Mapping[str, float], eps: float = DEFAULT_KL_EPS
) -> float:
    """KL(p || q) in nats after additive-epsilon smoothing and renormalization.

    Smoothing puts both distributions on the union support so zero cells in
    either argument stay finite; the result is clamped at 0 to absorb float
    residue on identical inputs.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    support = sorted(set(p) | set(q))
    if not support:
        raise ValueError("cannot compute KL over empty distributions")

    def smooth(dist: Mapping[str, float]) -> list[float]:
        raw = [dist.get(key, 0.0) + eps for key in support]
        total = sum(raw)
        return [value / total for value in raw]

    p_s = smooth(p)
    q_s = smooth(q)
    divergence = sum(pv * math.log(pv / qv) for pv, qv in zip(p_s, q_s))
    return max(divergence, 0.0)


def decision_accuracy(
    choices: Mapping[str, str], policy: Mapping[str, str]
) -> float:
    """Fraction of questions whose chosen strategy equals the optimal policy's."""
    if not choices:
        raise ValueError("cannot score zero decisions")
    missing = sorted(qid for qid in choices if qid not in policy)
    if missing:
        raise ValueError(f"choices cover questions absent from the policy: {missing[:5]}")
    hits = sum(1 for qid, name in choices.items() if policy[qid] == name)
    return hits / len(choices)


def round1_choices(traces: Sequence[PipelineTrace]) -> dict[str, str]:
    return {trace.question_id: trace.rounds[0].decision for trace in traces}


def final_choices(traces: Sequence[PipelineTrace]) -> dict[str, str]:
    return {trace.question_id: trace.rounds[-1].decision for trace in traces}


@dataclass(frozen=True)
class VerificationStats:
    """What verification changed: divergence from the optimal policy before and
    after retries, how often answers were rejected, and how often rejections
    were deserved. ``precision_no`` is None when nothing was rejected."""

    kl_pre: float
    kl_post: float
    reject_pct: float
    precision_no: float | None
    n: int


def verification_stats(
    traces: Sequence[PipelineTrace],
    golds: Mapping[str, GoldAnswerSet],
    policy: Mapping[str, str],
    order: Sequence[str],
    eps: float = DEFAULT_KL_EPS,
) -> VerificationStats:
    """Verification effect over a set of verify-mode traces.

    ``kl_pre`` compares round-1 strategy usage to the optimal policy's usage
    on the same questions; ``kl_post`` compares final-round usage. Rejection
    precision recomputes exact match from the recorded answer and the gold
    set rather than trusting stored scores.
    """
    if not traces:
        raise ValueError("cannot analyze zero traces")
    bad_mode = [t.question_id for t in traces if t.mode != "verify"]
    if bad_mode:
        raise ValueError(f"verification stats need verify-mode traces; got {bad_mode[:5]}")
    missing = sorted(t.question_id for t in traces if t.question_id not in policy)
    if missing:
        raise ValueError(f"traces cover questions absent from the policy: {missing[:5]}")
    question_ids = [trace.question_id for trace in traces]
    policy_dist = usage_distribution([policy[qid] for qid in question_ids], order)
    pre = usage_distribution(
        [trace.rounds[0].decision for trace in traces], order
    )
    post = usage_distribution(
        [trace.rounds[-1].decision for trace in traces], order
    )
    rejected_traces = 0
    no_events = 0
    justified_no = 0
    for trace in traces:
        saw_no = False
        for round_record in trace.rounds:
            if round_record.verdict != "no":
                continue
            saw_no = True
            no_events += 1
            gold = golds.get(trace.question_id)
            if gold is None:
                raise ValueError(f"no gold answers for question {trace.question_id!r}")
            if exact_match(round_record.execution.answer, gold) == 0:
                justified_no += 1
        if saw_no:
            rejected_traces += 1
    return VerificationStats(
        kl_pre=kl_divergence(pre, policy_dist, eps),
        kl_post=kl_divergence(post, policy_dist, eps),
        reject_pct=rejected_traces / len(traces),
        precision_no=None if no_events == 0 else justified_no / no_events,
        n=len(traces),
    )


def upper_bound(table: CorrectnessTable, policy: Mapping[str, str]) -> EvalReport:
    """Score the run that always uses the policy's strategy, from recorded outcomes."""
    table.validate_complete()
    rows = []
    for question_id in table.question_ids:
        strategy = policy.get(question_id)
        if strategy is None:
            raise ValueError(f"policy covers no strategy for question {question_id!r}")
        outcome = table.outcome(question_id, strategy)
        rows.append((outcome.em, outcome.f1, outcome.gen_tokens, outcome.retrievals))
    return report_from_rows(rows)


def majority_ensemble(
    table: CorrectnessTable, order: Sequence[str]
) -> tuple[dict[str, str], EvalReport]:
    """Plurality vote over every strategy's answer, paying for all of them.

    Answers are grouped by normalized form. Ties go to the group containing
    the highest-ranked strategy in the hierarchy (the most capable one), and
    that member's raw answer represents the group. Tokens and retrievals sum
    over all members because the ensemble runs every strategy.
    """
    if len(order) < 2:
        raise ValueError("an ensemble needs at least two strategies")
    table.validate_complete()
    answers: dict[str, str] = {}
    rows = []
    for question_id in table.question_ids:
        outcomes = [table.outcome(question_id, name) for name in order]
        groups: dict[str, list[int]] = {}
        for position, outcome in enumerate(outcomes):
            groups.setdefault(normalize_answer(outcome.answer), []).append(position)
        winning_key = max(groups, key=lambda key: (len(groups[key]), max(groups[key])))
        winner = outcomes[max(groups[winning_key])]
        answers[question_id] = winner.answer
        rows.append(
            (
                winner.em,
                winner.f1,
                sum(o.gen_tokens for o in outcomes),
                sum(o.retrievals for o in outcomes),
            )
        )
    return answers, report_from_rows(rows)


def _is_preference_suffix(subset: tuple[str, ...], order: Sequence[str]) -> bool:
    """True when the subset is exactly the k least-preferred strategies for some k >= 1."""
    if not subset:
        return False
    members = set(subset)
    for start in range(len(order)):
        if members == set(order[start:]):
            return True
    return False


@dataclass(frozen=True)
class CombinationContribution:
    """F1 mass of every success-set subset, plus which subsets break the hierarchy.

    A question lands in the subset of strategies that answered it exactly
    right and contributes its best F1 among them; questions no strategy
    solved land in the empty subset with their best overall F1. A non-empty
    subset is a violation unless it is a suffix of the preference order,
    because a clean hierarchy means success at rank r implies success at
    every rank above r.
    """

    order: tuple[str, ...]
    masses: dict[tuple[str, ...], float]

    def violation(self, subset: tuple[str, ...]) -> bool:
        return bool(subset) and not _is_preference_suffix(subset, self.order)

    @property
    def violation_mass(self) -> float:
        return sum(
            mass for subset, mass in self.masses.items() if self.violation(subset)
        )

    @property
    def total_mass(self) -> float:
        return sum(self.masses.values())

    def to_csv_rows(self) -> list[tuple[str, str, float, bool]]:
        """(bitmask, members, mass, violation) rows; bit i of the mask is order[i]."""
        rows = []
        for code in range(2 ** len(self.order)):
            subset = tuple(
                name for position, name in enumerate(self.order) if code >> position & 1
            )
            bitmask = "".join(
                "1" if code >> position & 1 else "0" for position in range(len(self.order))
            )
            rows.append(
                (
                    bitmask,
                    "+".join(subset),
                    self.masses.get(subset, 0.0),
                    self.violation(subset),
                )
            )
        return rows


def hierarchy_violations(
    table: CorrectnessTable, order: Sequence[str]
) -> CombinationContribution:
    """Per-subset F1 masses over the dataset; every subset of ``order`` gets a row."""
    if not order:
        raise ValueError("hierarchy analysis needs a non-empty order")
    table.validate_complete()
    names = tuple(order)
    masses: dict[tuple[str, ...], float] = {}
    for code in range(2 ** len(names)):
        subset = tuple(
            name for position, name in enumerate(names) if code >> position & 1
        )
        masses[subset] = 0.0
    n = len(table.question_ids)
    for question_id in table.question_ids:
        outcomes = {name: table.outcome(question_id, name) for name in names}
        solved = tuple(name for name in names if outcomes[name].em == 1)
        if solved:
            contribution = max(outcomes[name].f1 for name in solved)
        else:
            contribution = max(outcomes[name].f1 for name in names)
        masses[solved] += contribution / n
    return CombinationContribution(order=names, masses=masses)
