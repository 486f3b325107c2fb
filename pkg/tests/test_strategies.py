"""Strategy registry, prompt rendering, answer extraction, fixed-run tests."""

from __future__ import annotations

import json

import pytest

from dyplan.backends import Generation, ScriptedBackend, user
from dyplan.datasets import DatasetRecord
from dyplan.retrieval import Bm25Index, chunk_corpus
from dyplan.strategies import (
    DEFAULT_ORDER,
    FORCED_DECODE_MAX_TOKENS,
    CorrectnessTable,
    Exemplar,
    PromptError,
    StrategyOutcome,
    StrategyRegistry,
    StrategySpec,
    TableIncompleteError,
    TemplateSet,
    extract_final_answer,
    format_passages,
    parse_marked_answer,
    render_execution_turn,
    render_fixed_prompt,
    run_fixed,
    run_fixed_dataset,
)

from helpers import make_outcome

REGISTRY = StrategyRegistry()


# --- registry and specs -----------------------------------------------------


def test_default_specs_frozen():
    by_name = {name: REGISTRY.spec(name) for name in REGISTRY.names()}
    assert DEFAULT_ORDER == ("direct", "plan", "reason", "retrieval")
    assert [by_name[n].preference_rank for n in DEFAULT_ORDER] == [1, 2, 3, 4]
    assert by_name["direct"].max_gen_tokens == 100
    assert by_name["plan"].max_gen_tokens == 200
    assert by_name["reason"].max_gen_tokens == 200
    assert by_name["retrieval"].max_gen_tokens == 200
    assert by_name["direct"].n_shot == 8
    assert by_name["plan"].n_shot == 4
    assert by_name["reason"].n_shot == 8
    assert by_name["retrieval"].n_shot == 8
    assert [by_name[n].needs_retrieval for n in DEFAULT_ORDER] == [False, False, False, True]


def test_ordered_reranks_by_position():
    specs = REGISTRY.ordered(["reason", "direct"])
    assert [s.name for s in specs] == ["reason", "direct"]
    assert [s.preference_rank for s in specs] == [1, 2]


def test_ordered_validation():
    with pytest.raises(ValueError, match="unknown strategy"):
        REGISTRY.ordered(["direct", "mystery"])
    with pytest.raises(ValueError, match="duplicate"):
        REGISTRY.ordered(["direct", "direct"])
    with pytest.raises(ValueError):
        REGISTRY.ordered([])


def test_registry_rejects_bad_rank_sets():
    specs = [
        StrategySpec("a", "d", 1, 10, 0, False, "direct"),
        StrategySpec("b", "d", 3, 10, 0, False, "direct"),
    ]
    with pytest.raises(ValueError, match="ranks"):
        StrategyRegistry(specs)


# --- templates and shots ----------------------------------------------------


def test_default_templates_load_and_split():
    templates = TemplateSet()
    for template_id in ["direct", "plan", "reason", "retrieval", "decision", "decision_retry", "verification"]:
        system_text, user_text = templates.load(template_id)
        assert system_text and user_text
    assert "{question}" in templates.load("direct")[1]
    assert "{passages}" in templates.load("retrieval")[1]
    assert "{strategies}" in templates.load("decision")[1]


def test_missing_template_errors():
    with pytest.raises(PromptError, match="no template"):
        TemplateSet().load("nonexistent")


def test_shots_counts_and_cap():
    templates = TemplateSet()
    assert len(templates.shots("direct", 8)) == 8
    assert len(templates.shots("plan", 4)) == 4
    assert len(templates.shots("decision", 16)) == 16
    assert templates.shots("direct", 0) == []
    with pytest.raises(PromptError, match="entries"):
        templates.shots("plan", 5)


def test_custom_template_dir(tmp_path):
    (tmp_path / "direct.txt").write_text("SYS\n---\nQ: {question}\n", encoding="utf-8")
    templates = TemplateSet(template_dir=tmp_path)
    assert templates.load("direct") == ("SYS", "Q: {question}")


def test_render_fixed_prompt_shape():
    spec = REGISTRY.spec("direct")
    shots = TemplateSet().shots("direct", 8)
    messages = render_fixed_prompt("Who wrote Hamlet?", spec, shots)
    assert [m.role for m in messages] == ["system", "user"]
    assert "Who wrote Hamlet?" in messages[1].content
    assert shots[0].question in messages[1].content
    zero_shot = StrategySpec("direct", "d", 1, 100, 0, False, "direct")
    assert len(render_fixed_prompt("Q?", zero_shot, [])) == 2


def test_render_fixed_prompt_validation():
    spec = REGISTRY.spec("direct")
    with pytest.raises(PromptError, match="shots"):
        render_fixed_prompt("Q?", spec, [])
    retrieval = REGISTRY.spec("retrieval")
    shots = TemplateSet().shots("retrieval", 8)
    with pytest.raises(PromptError, match="passages"):
        render_fixed_prompt("Q?", retrieval, shots, passages=None)
    passages = chunk_corpus([("d", "some text")], window=10)
    with pytest.raises(PromptError, match="passages"):
        render_fixed_prompt("Q?", spec, TemplateSet().shots("direct", 8), passages=passages)


def test_passages_rendered_verbatim_in_rank_order():
    passages = chunk_corpus([("t1", "alpha beta gamma"), ("t2", "delta epsilon")], window=10)
    block = format_passages(passages)
    assert block.index("alpha beta gamma") < block.index("delta epsilon")
    assert "[1] t1: alpha beta gamma" in block
    retrieval = REGISTRY.spec("retrieval")
    messages = render_fixed_prompt(
        "Q?", retrieval, TemplateSet().shots("retrieval", 8), passages=passages
    )
    assert "alpha beta gamma" in messages[1].content


def test_braces_in_inputs_survive_rendering():
    spec = StrategySpec("direct", "d", 1, 100, 0, False, "direct")
    messages = render_fixed_prompt("What does {x} mean?", spec, [])
    assert "{x}" in messages[1].content


def test_execution_turn_is_zero_shot_user_message():
    turn = render_execution_turn("Q?", REGISTRY.spec("reason"))
    assert turn.role == "user"
    assert "Q?" in turn.content
    assert "Question:" in turn.content


# --- answer extraction ------------------------------------------------------


def test_parse_marked_answer_cases():
    assert parse_marked_answer('Final answer: "Henry Scheffe"') == "Henry Scheffe"
    assert parse_marked_answer("Final answer: Paris.") == "Paris"
    assert parse_marked_answer("final ANSWER: 'Rome'.") == "Rome"
    assert parse_marked_answer('So... Final answer: "first" no wait Final answer: "second"') == "second"
    assert parse_marked_answer('Final answer: "Washington, D.C."') == "Washington, D.C"
    assert parse_marked_answer("Final answer: x\nmore lines ignored") == "x"
    assert parse_marked_answer("nothing here") is None
    assert parse_marked_answer("Final answer:") == ""


def test_quote_stripping_one_layer_only():
    assert parse_marked_answer("Final answer: \"'nested'\"") == "'nested'"
    assert parse_marked_answer('Final answer: "unbalanced') == '"unbalanced'


def test_extract_with_marker_present():
    client = ScriptedBackend.from_mapping({})
    generation = Generation('Step one. Final answer: "42".', 6, "scripted")
    answer, extra, forced = extract_final_answer(generation, client, [user("q")])
    assert (answer, extra, forced) == ("42", 0, False)
    assert client.call_count == 0


def test_forced_decode_single_continuation():
    client = ScriptedBackend.from_mapping({"rid|force": {"text": ' "Rome".', "gen_tokens": 2}})
    generation = Generation("I think it is Rome", 4, "scripted")
    answer, extra, forced = extract_final_answer(
        generation, client, [user("q")], request_id="rid"
    )
    assert answer == "Rome"
    assert extra == 2
    assert forced is True
    assert client.call_count == 1


def test_forced_decode_continuation_prompt_shape():
    captured = {}

    class Recorder:
        def generate(self, messages, max_tokens, stop_sequences=(), request_id=None):
            captured["messages"] = list(messages)
            captured["max_tokens"] = max_tokens
            captured["stop"] = tuple(stop_sequences)
            return Generation("X", 1, "scripted")

    generation = Generation("no marker text", 3, "scripted")
    prompt = [user("the question")]
    answer, extra, forced = extract_final_answer(generation, Recorder(), prompt)
    assert answer == "X"
    assert forced
    assert captured["max_tokens"] == FORCED_DECODE_MAX_TOKENS
    seeded = captured["messages"][-1]
    assert seeded.role == "assistant"
    assert seeded.content == "no marker text\nFinal answer:"
    assert captured["messages"][:-1] == prompt


def test_forced_decode_empty_continuation_scores_wrong():
    client = ScriptedBackend.from_mapping({"rid|force": {"text": "", "gen_tokens": 0}})
    generation = Generation("rambling with no marker", 4, "scripted")
    answer, extra, forced = extract_final_answer(
        generation, client, [user("q")], request_id="rid"
    )
    assert (answer, extra, forced) == ("", 0, True)


# --- fixed runs -------------------------------------------------------------


_RECORD = DatasetRecord(id="q1", question="Who wrote Hamlet?", answers=("William Shakespeare",))


def test_run_fixed_scores_and_accounts():
    backend = ScriptedBackend.from_mapping(
        {
            "q1|fixed|execution|direct": {
                "text": 'Final answer: "William Shakespeare"',
                "gen_tokens": 5,
            }
        }
    )
    outcome = run_fixed(_RECORD, REGISTRY.spec("direct"), backend)
    assert outcome.em == 1
    assert outcome.f1 == pytest.approx(1.0)
    assert outcome.gen_tokens == 5
    assert outcome.retrievals == 0
    assert not outcome.forced_decode_used
    assert outcome.passages is None


def test_run_fixed_forced_decode_adds_tokens():
    backend = ScriptedBackend.from_mapping(
        {
            "q1|fixed|execution|direct": {"text": "It was the Bard himself", "gen_tokens": 5},
            "q1|fixed|execution|direct|force": {"text": '"William Shakespeare"', "gen_tokens": 2},
        }
    )
    outcome = run_fixed(_RECORD, REGISTRY.spec("direct"), backend)
    assert outcome.em == 1
    assert outcome.forced_decode_used
    assert outcome.gen_tokens == 7


def test_run_fixed_retrieval_counts_one_event():
    index = Bm25Index(
        chunk_corpus(
            [
                ("hamlet", "Hamlet is a tragedy written by William Shakespeare around 1600"),
                ("cooking", "bread rises when yeast ferments the dough"),
            ],
            window=50,
        )
    )
    backend = ScriptedBackend.from_mapping(
        {
            "q1|fixed|execution|retrieval": {
                "text": 'The passage says so. Final answer: "William Shakespeare"',
                "gen_tokens": 9,
            }
        }
    )
    outcome = run_fixed(_RECORD, REGISTRY.spec("retrieval"), backend, retriever=index)
    assert outcome.retrievals == 1
    assert outcome.em == 1
    assert outcome.passages is not None and len(outcome.passages) > 0
    assert "Shakespeare" in outcome.passages[0].text


def test_run_fixed_requires_retriever():
    backend = ScriptedBackend.from_mapping({})
    with pytest.raises(ValueError, match="retriever"):
        run_fixed(_RECORD, REGISTRY.spec("retrieval"), backend)


def _dataset(n: int) -> list[DatasetRecord]:
    return [
        DatasetRecord(id=f"q{i}", question=f"Question number {i}?", answers=(f"ans{i}",))
        for i in range(n)
    ]


def _script_for(records, specs, correct=lambda qid, s: True):
    entries = {}
    for record in records:
        for spec in specs:
            text = (
                f'Final answer: "ans{record.id[1:]}"'
                if correct(record.id, spec.name)
                else 'Final answer: "nope"'
            )
            entries[f"{record.id}|fixed|execution|{spec.name}"] = {
                "text": text,
                "gen_tokens": 4,
            }
    return entries


def test_run_fixed_dataset_complete_rectangle():
    records = _dataset(5)
    specs = REGISTRY.ordered(["direct", "reason"])
    backend = ScriptedBackend.from_mapping(_script_for(records, specs))
    table = run_fixed_dataset(records, specs, backend)
    table.validate_complete()
    assert table.question_ids == [r.id for r in records]
    assert table.order == ["direct", "reason"]
    assert all(table.outcome(r.id, s.name).em == 1 for r in records for s in specs)


def test_run_fixed_dataset_failure_markers_keep_rectangle():
    records = _dataset(3)
    specs = REGISTRY.ordered(["direct"])
    entries = _script_for(records, specs)
    del entries["q1|fixed|execution|direct"]  # q1 will fail with a missing script key
    backend = ScriptedBackend.from_mapping(entries)
    table = run_fixed_dataset(records, specs, backend)
    table.validate_complete()
    failed = table.outcome("q1", "direct")
    assert failed.error is not None and "ScriptKeyError" in failed.error
    assert failed.em == 0 and failed.gen_tokens == 0
    assert table.outcome("q0", "direct").em == 1


def test_run_fixed_dataset_parallel_matches_sequential():
    records = _dataset(8)
    specs = REGISTRY.ordered(["direct", "reason"])
    backend_a = ScriptedBackend.from_mapping(_script_for(records, specs))
    backend_b = ScriptedBackend.from_mapping(_script_for(records, specs))
    sequential = run_fixed_dataset(records, specs, backend_a, parallelism=1)
    parallel = run_fixed_dataset(records, specs, backend_b, parallelism=4)
    seq = {k: v.to_dict() for k, v in sequential.outcomes.items()}
    par = {k: v.to_dict() for k, v in parallel.outcomes.items()}
    assert seq == par


# --- correctness table ------------------------------------------------------


def test_table_positives_negatives_partition():
    table = CorrectnessTable(
        order=["direct"],
        question_ids=["a", "b", "c"],
        outcomes={
            ("a", "direct"): make_outcome("a", "direct", em=1),
            ("b", "direct"): make_outcome("b", "direct", em=0, f1=0.7),
            ("c", "direct"): make_outcome("c", "direct", em=0, f1=0.2),
        },
    )
    assert table.positives("direct") == ["a"]
    assert table.negatives("direct") == ["b", "c"]
    # F1 threshold widens the positive set
    assert table.positives("direct", f1_threshold=0.5) == ["a", "b"]
    assert set(table.positives("direct")) | set(table.negatives("direct")) == {"a", "b", "c"}
    assert not set(table.positives("direct")) & set(table.negatives("direct"))


def test_table_validate_complete_reports_missing():
    table = CorrectnessTable(
        order=["direct", "reason"],
        question_ids=["a"],
        outcomes={("a", "direct"): make_outcome("a", "direct", em=1)},
    )
    with pytest.raises(TableIncompleteError, match="reason"):
        table.validate_complete()


def test_table_jsonl_roundtrip(tmp_path):
    records = _dataset(3)
    specs = REGISTRY.ordered(["direct", "reason"])
    backend = ScriptedBackend.from_mapping(
        _script_for(records, specs, correct=lambda qid, s: qid != "q1")
    )
    table = run_fixed_dataset(records, specs, backend)
    path = tmp_path / "outcomes.jsonl"
    table.save_jsonl(path)
    loaded = CorrectnessTable.load_jsonl(path, ["direct", "reason"])
    assert loaded.question_ids == table.question_ids
    assert {k: v.to_dict() for k, v in loaded.outcomes.items()} == {
        k: v.to_dict() for k, v in table.outcomes.items()
    }
    # one StrategyOutcome per line, question-major order
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [(l["question_id"], l["strategy"]) for l in lines] == [
        (r.id, s.name) for r in records for s in specs
    ]


def test_outcome_dict_roundtrip_with_passages():
    passages = tuple(chunk_corpus([("t", "alpha beta")], window=10))
    rich = StrategyOutcome(
        question_id="q1",
        strategy="retrieval",
        raw_generation="raw",
        answer="alpha",
        em=0,
        f1=0.5,
        gen_tokens=7,
        retrievals=1,
        forced_decode_used=True,
        passages=passages,
        error=None,
    )
    assert StrategyOutcome.from_dict(rich.to_dict()) == rich
