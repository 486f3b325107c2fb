"""Run orchestration and artifact writing.

A run reads the dataset, executes it (fixed strategies or the pipeline),
streams one JSONL line per result to the output directory, and derives the
report from the written log so a later ``report`` invocation reproduces it
byte for byte. Questions execute concurrently up to the configured
parallelism; a single collector writes results in dataset order, so partial
logs from an interrupted run are always a clean prefix.

Failures of individual questions never abort the run: they are recorded in
the manifest, the exit code goes nonzero, and everything else completes.
Timestamps live only in the manifest, keeping every other artifact
byte-identical across reruns.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

from . import __version__
from .backends import GenerationClient, ResponseCache, make_backend
from .config import RunConfig
from .datasets import DatasetRecord, load_dataset
from .metrics import (
    CostWeights,
    EvalReport,
    aggregate_report,
    report_from_rows,
    report_to_dict,
)
from .pipeline import PipelineTrace, load_traces, run_dyplan_base, run_dyplan_verify
from .retrieval import Bm25Index
from .strategies import CorrectnessTable, StrategyOutcome, TemplateSet, run_fixed

__all__ = [
    "run_command",
    "report_for_traces",
    "report_for_fixed_outcomes",
    "write_json",
    "OUTCOME_LOG",
    "TRACE_LOG",
    "REPORT_FILE",
    "MANIFEST_FILE",
]

log = logging.getLogger(__name__)

OUTCOME_LOG = "outcomes.jsonl"
TRACE_LOG = "traces.jsonl"
REPORT_FILE = "report.json"
MANIFEST_FILE = "manifest.json"

T = TypeVar("T")
R = TypeVar("R")


def _map_ordered(
    worker: Callable[[T], R], items: Sequence[T], parallelism: int
) -> Iterator[R]:
    """Apply ``worker`` concurrently, yielding results in input order."""
    if parallelism <= 1:
        for item in items:
            yield worker(item)
        return
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        yield from pool.map(worker, items)


def write_json(path: Path, payload: dict) -> None:
    """Deterministic JSON file: sorted keys, two-space indent, trailing newline."""
    path.write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def report_for_traces(
    traces: Sequence[PipelineTrace],
    records: Sequence[DatasetRecord],
    weights: CostWeights,
) -> EvalReport:
    """Score trace final answers against the dataset golds and average."""
    by_id = {record.id: record for record in records}
    items = []
    for trace in traces:
        record = by_id.get(trace.question_id)
        if record is None:
            raise ValueError(f"trace question {trace.question_id!r} is not in the dataset")
        items.append(
            (
                trace.final_answer,
                record.golds(),
                trace.total_gen_tokens,
                trace.total_retrievals,
            )
        )
    return aggregate_report(items)


def report_for_fixed_outcomes(
    table: CorrectnessTable, weights: CostWeights
) -> dict[str, dict]:
    """Per-strategy report dicts from a complete outcome rectangle."""
    reports = {}
    for strategy in table.order:
        rows = [
            (o.em, o.f1, o.gen_tokens, o.retrievals)
            for qid in table.question_ids
            for o in [table.outcome(qid, strategy)]
        ]
        reports[strategy] = report_to_dict(report_from_rows(rows), weights)
    return reports


def _build_client(config: RunConfig) -> GenerationClient:
    backend = make_backend(config.backend)
    cache = ResponseCache(config.backend.cache_path) if config.backend.cache_path else None
    return GenerationClient(backend, cache)


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonl_writer(path: Path):
    fh = open(path, "w", encoding="utf-8")

    def write(payload: dict) -> None:
        fh.write(json.dumps(payload, ensure_ascii=False, sort_keys=True) + "\n")
        fh.flush()

    return fh, write


def run_command(config: RunConfig) -> int:
    """Execute one configured run; returns the process exit code."""
    records = load_dataset(config.dataset, config.dataset_format)
    templates = TemplateSet(config.template_dir, config.shots_dir)
    retriever = Bm25Index.load(config.index_path) if config.index_path else None
    client = _build_client(config)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _utc_now()

    if config.mode == "fixed":
        failures = _run_fixed(config, records, templates, retriever, client, out_dir)
    else:
        failures = _run_pipeline(config, records, templates, retriever, client, out_dir)

    manifest = {
        "command": "run",
        "mode": config.mode,
        "config_digest": config.digest(),
        "version": __version__,
        "started_at": started,
        "finished_at": _utc_now(),
        "n_questions": len(records),
        "n_failures": len(failures),
        "failures": failures,
        "seed": config.seed,
    }
    write_json(out_dir / MANIFEST_FILE, manifest)
    if failures:
        log.error("%d of %d questions failed", len(failures), len(records))
        return 1
    return 0


def _run_fixed(
    config: RunConfig,
    records: Sequence[DatasetRecord],
    templates: TemplateSet,
    retriever: Bm25Index | None,
    client: GenerationClient,
    out_dir: Path,
) -> list[dict]:
    shot_cache = {
        spec.name: templates.shots(spec.name, spec.n_shot) for spec in config.specs
    }

    def worker(record: DatasetRecord) -> list[StrategyOutcome]:
        outcomes = []
        for spec in config.specs:
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
            except Exception as exc:  # noqa: BLE001 - keep the rectangle complete
                outcomes.append(
                    StrategyOutcome(
                        question_id=record.id,
                        strategy=spec.name,
                        raw_generation="",
                        answer="",
                        em=0,
                        f1=0.0,
                        gen_tokens=0,
                        retrievals=0,
                        forced_decode_used=False,
                        error=f"{type(exc).__name__}: {exc}",
                    )
                )
        return outcomes

    failures: list[dict] = []
    fh, write = _jsonl_writer(out_dir / OUTCOME_LOG)
    try:
        for outcomes in _map_ordered(worker, records, config.parallelism):
            for outcome in outcomes:
                write(outcome.to_dict())
                if outcome.error is not None:
                    failures.append(
                        {
                            "question_id": outcome.question_id,
                            "strategy": outcome.strategy,
                            "error": outcome.error,
                        }
                    )
    finally:
        fh.close()

    table = CorrectnessTable.load_jsonl(out_dir / OUTCOME_LOG, list(config.strategies))
    write_json(
        out_dir / REPORT_FILE, report_for_fixed_outcomes(table, config.weights)
    )
    return failures


def _run_pipeline(
    config: RunConfig,
    records: Sequence[DatasetRecord],
    templates: TemplateSet,
    retriever: Bm25Index | None,
    client: GenerationClient,
    out_dir: Path,
) -> list[dict]:
    decision_shots = templates.shots("decision", config.decision_shots)

    def worker(record: DatasetRecord):
        try:
            if config.mode == "dyplan-base":
                trace = run_dyplan_base(
                    record,
                    config.specs,
                    client,
                    retriever=retriever,
                    templates=templates,
                    decision_shots=decision_shots,
                    decision_fallback=config.decision_fallback,
                )
            else:
                trace = run_dyplan_verify(
                    record,
                    config.specs,
                    client,
                    retriever=retriever,
                    templates=templates,
                    max_rounds=config.rounds,
                    decision_shots=decision_shots,
                    decision_fallback=config.decision_fallback,
                )
            return record.id, trace, None
        except Exception as exc:  # noqa: BLE001 - one question must not sink the run
            return record.id, None, f"{type(exc).__name__}: {exc}"

    failures: list[dict] = []
    fh, write = _jsonl_writer(out_dir / TRACE_LOG)
    try:
        for question_id, trace, error in _map_ordered(
            worker, records, config.parallelism
        ):
            if error is not None:
                failures.append({"question_id": question_id, "error": error})
                continue
            write(trace.to_dict())
    finally:
        fh.close()

    traces = load_traces(out_dir / TRACE_LOG)
    if traces:
        report = report_for_traces(traces, records, config.weights)
        write_json(out_dir / REPORT_FILE, report_to_dict(report, config.weights))
    else:
        log.error("no question succeeded; skipping %s", REPORT_FILE)
    return failures
