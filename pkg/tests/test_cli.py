"""End-to-end CLI tests driving the real subcommands against scripted backends."""

from __future__ import annotations

import json

import pytest

from dyplan.cli import main
from dyplan.pipeline import load_traces
from dyplan.retrieval import Bm25Index
from helpers import make_table

ORDER2 = ["direct", "plan"]


def _write_dataset(path, qids):
    rows = [
        {"id": qid, "question": f"What is the answer to {qid}?", "answers": [f"gold {qid}"]}
        for qid in qids
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def _write_script(path, entries):
    lines = []
    for key, text in entries.items():
        lines.append(json.dumps({"key": key, "text": text}))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _fixed_script(tmp_path):
    # q1: direct right, plan wrong; q2: direct wrong, plan right
    return _write_script(
        tmp_path / "script.jsonl",
        {
            "q1|fixed|execution|direct": 'Final answer: "gold q1"',
            "q1|fixed|execution|plan": 'Final answer: "wrong plan q1"',
            "q2|fixed|execution|direct": 'Final answer: "wrong direct q2"',
            "q2|fixed|execution|plan": 'Final answer: "gold q2"',
        },
    )


def _verify_script(tmp_path):
    # q1 accepted in round 1; q2 rejected once, recovered by plan
    return _write_script(
        tmp_path / "verify_script.jsonl",
        {
            "q1|round1|decision": "direct",
            "q1|round1|execution|direct": 'Final answer: "gold q1"',
            "q1|round1|verification": "yes",
            "q2|round1|decision": "direct",
            "q2|round1|execution|direct": 'Final answer: "wrong direct q2"',
            "q2|round1|verification": "no",
            "q2|round2|decision": "plan",
            "q2|round2|execution|plan": 'Final answer: "gold q2"',
            "q2|round2|verification": "yes",
        },
    )


def _run_fixed(tmp_path, out_name="fixed_out"):
    dataset = _write_dataset(tmp_path / "data.jsonl", ["q1", "q2"])
    script = _fixed_script(tmp_path)
    out = tmp_path / out_name
    code = main(
        [
            "run",
            "--dataset",
            str(dataset),
            "--mode",
            "fixed",
            "--strategies",
            "direct,plan",
            "--out",
            str(out),
            "--backend",
            f"scripted:{script}",
        ]
    )
    return code, out, dataset


def _run_verify(tmp_path, out_name="verify_out"):
    dataset = _write_dataset(tmp_path / "data.jsonl", ["q1", "q2"])
    script = _verify_script(tmp_path)
    out = tmp_path / out_name
    code = main(
        [
            "run",
            "--dataset",
            str(dataset),
            "--mode",
            "dyplan-verify",
            "--strategies",
            "direct,plan",
            "--rounds",
            "2",
            "--out",
            str(out),
            "--backend",
            f"scripted:{script}",
        ]
    )
    return code, out, dataset


# --- index ------------------------------------------------------------------


def test_index_cli_builds_loadable_index(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "alpha.txt").write_text(" ".join(f"alpha{i}" for i in range(60)), encoding="utf-8")
    (corpus / "beta.txt").write_text(" ".join(f"beta{i}" for i in range(30)), encoding="utf-8")
    out = tmp_path / "index.json"
    assert main(["index", "--corpus", str(corpus), "--out", str(out), "--window", "50"]) == 0
    message = capsys.readouterr().out
    assert "indexed 3 passages from 2 documents" in message
    index = Bm25Index.load(out)
    (top,) = index.search("alpha7", k=1)
    assert top[0].startswith("000000:")


# --- run: fixed mode --------------------------------------------------------


def test_run_fixed_e2e(tmp_path):
    code, out, _ = _run_fixed(tmp_path)
    assert code == 0
    lines = (out / "outcomes.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 4
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert set(report) == {"direct", "plan"}
    assert report["direct"]["em"] == 0.5
    assert report["plan"]["em"] == 0.5
    assert "weighted_cost" in report["direct"]
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["mode"] == "fixed"
    assert manifest["n_questions"] == 2
    assert manifest["n_failures"] == 0


def test_run_fixed_missing_script_key_fails_but_completes(tmp_path):
    dataset = _write_dataset(tmp_path / "data.jsonl", ["q1"])
    script = _write_script(
        tmp_path / "script.jsonl",
        {"q1|fixed|execution|direct": 'Final answer: "gold q1"'},
    )
    out = tmp_path / "out"
    code = main(
        [
            "run",
            "--dataset",
            str(dataset),
            "--mode",
            "fixed",
            "--strategies",
            "direct,plan",
            "--out",
            str(out),
            "--backend",
            f"scripted:{script}",
        ]
    )
    assert code == 1
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["n_failures"] == 1
    assert manifest["failures"][0]["strategy"] == "plan"
    assert "ScriptKeyError" in manifest["failures"][0]["error"]
    # the rectangle is still complete and reportable
    lines = (out / "outcomes.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["plan"]["em"] == 0.0


# --- run: pipeline mode with config file ------------------------------------


def test_run_verify_config_interpolation_and_flag_override(tmp_path, monkeypatch):
    _write_dataset(tmp_path / "data.jsonl", ["q1", "q2"])
    _verify_script(tmp_path)
    monkeypatch.setenv("DYPLAN_DATA", str(tmp_path))
    config = tmp_path / "run.conf"
    config.write_text(
        "\n".join(
            [
                "# pipeline smoke config",
                "mode = dyplan-verify",
                "dataset = ${DYPLAN_DATA}/data.jsonl",
                "dataset_format = canonical",
                "strategies = direct,plan",
                "backend_kind = scripted",
                "script = ${DYPLAN_DATA}/verify_script.jsonl",
                "rounds = 1",
                "parallelism = 2",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    out = tmp_path / "out"
    code = main(["run", "--config", str(config), "--out", str(out), "--rounds", "2"])
    assert code == 0
    traces = load_traces(out / "traces.jsonl")
    by_id = {t.question_id: t for t in traces}
    assert len(by_id["q1"].rounds) == 1
    # the --rounds flag must beat the file's rounds = 1
    assert len(by_id["q2"].rounds) == 2
    assert by_id["q2"].final_answer == "gold q2"
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["em"] == 1.0
    assert report["n"] == 2


def test_run_missing_env_var_is_config_error(tmp_path, capsys):
    config = tmp_path / "run.conf"
    config.write_text("dataset = ${DYPLAN_UNSET_VAR_XYZ}/d.jsonl\n", encoding="utf-8")
    assert main(["run", "--config", str(config)]) == 2
    assert "DYPLAN_UNSET_VAR_XYZ" in capsys.readouterr().err


def test_run_retrieval_without_index_is_config_error(tmp_path, capsys):
    dataset = _write_dataset(tmp_path / "data.jsonl", ["q1"])
    script = _write_script(tmp_path / "s.jsonl", {})
    out = tmp_path / "never"
    code = main(
        [
            "run",
            "--dataset",
            str(dataset),
            "--mode",
            "dyplan-base",
            "--strategies",
            "direct,retrieval",
            "--out",
            str(out),
            "--backend",
            f"scripted:{script}",
        ]
    )
    assert code == 2
    assert "index" in capsys.readouterr().err
    assert not out.exists()  # rejected before any run artifacts


def test_run_bad_backend_shorthand(tmp_path, capsys):
    assert main(["run", "--backend", "scripted"]) == 2
    assert "kind:target" in capsys.readouterr().err


# --- determinism and report regeneration ------------------------------------


def test_rerun_is_byte_identical_outside_manifest(tmp_path):
    code1, out1, _ = _run_verify(tmp_path, "out1")
    code2, out2, _ = _run_verify(tmp_path, "out2")
    assert code1 == code2 == 0
    assert (out1 / "traces.jsonl").read_bytes() == (out2 / "traces.jsonl").read_bytes()
    assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    first = json.loads((out1 / "manifest.json").read_text(encoding="utf-8"))
    second = json.loads((out2 / "manifest.json").read_text(encoding="utf-8"))
    for key in ("started_at", "finished_at"):
        first.pop(key)
        second.pop(key)
    assert first == second


def test_report_rebuilds_trace_report_byte_identical(tmp_path):
    _, out, dataset = _run_verify(tmp_path)
    regen = tmp_path / "regen.json"
    code = main(
        [
            "report",
            "--traces",
            str(out / "traces.jsonl"),
            "--dataset",
            str(dataset),
            "--out",
            str(regen),
        ]
    )
    assert code == 0
    assert regen.read_bytes() == (out / "report.json").read_bytes()


def test_report_rebuilds_fixed_report_byte_identical(tmp_path):
    _, out, _ = _run_fixed(tmp_path)
    regen = tmp_path / "regen.json"
    code = main(
        [
            "report",
            "--outcomes",
            str(out / "outcomes.jsonl"),
            "--order",
            "direct,plan",
            "--out",
            str(regen),
        ]
    )
    assert code == 0
    assert regen.read_bytes() == (out / "report.json").read_bytes()


def test_report_traces_requires_dataset(tmp_path):
    with pytest.raises(SystemExit):
        main(["report", "--traces", "t.jsonl", "--out", str(tmp_path / "r.json")])


# --- datagen ----------------------------------------------------------------


def test_datagen_cli(tmp_path, capsys):
    _, out, dataset = _run_fixed(tmp_path)
    train = tmp_path / "train.jsonl"
    code = main(
        [
            "datagen",
            "--outcomes",
            str(out / "outcomes.jsonl"),
            "--dataset",
            str(dataset),
            "--order",
            "direct,plan",
            "--kinds",
            "decision,verification",
            "--out",
            str(train),
        ]
    )
    assert code == 0
    assert "wrote 6 instances" in capsys.readouterr().out
    lines = train.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 6  # 2 decision + 4 verification
    kinds = {json.loads(line)["kind"] for line in lines}
    assert kinds == {"decision", "verification"}
    for line in lines:
        assert set(json.loads(line)) == {"kind", "question_id", "messages", "train_mask"}


def test_datagen_cli_rejects_unknown_kind(tmp_path, capsys):
    _, out, dataset = _run_fixed(tmp_path)
    code = main(
        [
            "datagen",
            "--outcomes",
            str(out / "outcomes.jsonl"),
            "--dataset",
            str(dataset),
            "--order",
            "direct,plan",
            "--kinds",
            "decision,mystery",
            "--out",
            str(tmp_path / "t.jsonl"),
        ]
    )
    assert code == 2
    assert "mystery" in capsys.readouterr().err


# --- analyze ----------------------------------------------------------------


def _outcomes_file(tmp_path):
    table = make_table(ORDER2, {"q1": [1, 0], "q2": [0, 1]})
    path = tmp_path / "outcomes.jsonl"
    table.save_jsonl(path)
    return path


def test_analyze_calibration_from_choices(tmp_path):
    outcomes = _outcomes_file(tmp_path)
    choices = tmp_path / "choices.jsonl"
    choices.write_text(
        json.dumps({"question_id": "q1", "strategy": "direct"})
        + "\n"
        + json.dumps({"question_id": "q2", "strategy": "direct"})
        + "\n",
        encoding="utf-8",
    )
    out = tmp_path / "calibration.json"
    code = main(
        [
            "analyze",
            "calibration",
            "--choices",
            str(choices),
            "--outcomes",
            str(outcomes),
            "--order",
            "direct,plan",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert payload["usage"] == {"direct": 1.0, "plan": 0.0}
    assert payload["optimal_usage"] == {"direct": 0.5, "plan": 0.5}
    assert payload["decision_accuracy"] == 0.5
    assert payload["kl_to_optimal"] > 0.0
    assert payload["n"] == 2


def test_analyze_calibration_from_traces_first_vs_final(tmp_path):
    _, out, _ = _run_verify(tmp_path)
    outcomes = _outcomes_file(tmp_path)
    first = tmp_path / "first.json"
    final = tmp_path / "final.json"
    for round_name, path in (("first", first), ("final", final)):
        code = main(
            [
                "analyze",
                "calibration",
                "--traces",
                str(out / "traces.jsonl"),
                "--round",
                round_name,
                "--outcomes",
                str(outcomes),
                "--order",
                "direct,plan",
                "--out",
                str(path),
            ]
        )
        assert code == 0
    assert json.loads(first.read_text())["usage"] == {"direct": 1.0, "plan": 0.0}
    assert json.loads(final.read_text())["usage"] == {"direct": 0.5, "plan": 0.5}
    assert json.loads(final.read_text())["decision_accuracy"] == 1.0


def test_analyze_verification_cli(tmp_path):
    _, out, dataset = _run_verify(tmp_path)
    outcomes = _outcomes_file(tmp_path)
    result = tmp_path / "verification.json"
    code = main(
        [
            "analyze",
            "verification",
            "--traces",
            str(out / "traces.jsonl"),
            "--outcomes",
            str(outcomes),
            "--dataset",
            str(dataset),
            "--order",
            "direct,plan",
            "--out",
            str(result),
        ]
    )
    assert code == 0
    payload = json.loads(result.read_text(encoding="utf-8"))
    assert payload["n"] == 2
    assert payload["reject_pct"] == 0.5
    assert payload["precision_no"] == 1.0
    assert payload["kl_post"] == 0.0


def test_analyze_upper_bound_cli(tmp_path):
    outcomes = _outcomes_file(tmp_path)
    result = tmp_path / "ub.json"
    code = main(
        [
            "analyze",
            "upper-bound",
            "--outcomes",
            str(outcomes),
            "--order",
            "direct,plan",
            "--out",
            str(result),
        ]
    )
    assert code == 0
    payload = json.loads(result.read_text(encoding="utf-8"))
    assert payload["em"] == 1.0
    assert payload["n"] == 2
    assert "weighted_cost" in payload


def test_analyze_ensemble_cli(tmp_path):
    outcomes = _outcomes_file(tmp_path)
    result = tmp_path / "ensemble.json"
    answers = tmp_path / "answers.jsonl"
    code = main(
        [
            "analyze",
            "ensemble",
            "--outcomes",
            str(outcomes),
            "--order",
            "direct,plan",
            "--out",
            str(result),
            "--answers",
            str(answers),
        ]
    )
    assert code == 0
    payload = json.loads(result.read_text(encoding="utf-8"))
    # two disagreeing strategies: the ensemble tracks the second one
    assert payload["em"] == 0.5
    rows = [json.loads(line) for line in answers.read_text().splitlines()]
    assert rows == [
        {"answer": "wrong plan q1", "question_id": "q1"},
        {"answer": "gold q2", "question_id": "q2"},
    ]


def test_analyze_violations_cli(tmp_path):
    outcomes = _outcomes_file(tmp_path)
    result = tmp_path / "violations.json"
    csv_path = tmp_path / "violations.csv"
    code = main(
        [
            "analyze",
            "violations",
            "--outcomes",
            str(outcomes),
            "--order",
            "direct,plan",
            "--out",
            str(result),
            "--csv",
            str(csv_path),
        ]
    )
    assert code == 0
    payload = json.loads(result.read_text(encoding="utf-8"))
    assert payload["order"] == ["direct", "plan"]
    assert len(payload["subsets"]) == 4
    # q1 solved only by direct (violation), q2 only by plan (suffix)
    assert payload["violation_mass"] == pytest.approx(0.5)
    assert payload["total_mass"] == pytest.approx(1.0)
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "bitmask,members,mass,violation"
    assert len(lines) == 5
    direct_row = next(line for line in lines if line.startswith("10,"))
    assert direct_row.endswith("true")
