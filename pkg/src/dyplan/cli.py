"""Command-line interface.

Subcommands: ``index`` builds a retrieval index, ``run`` executes a dataset
(fixed strategy rectangle or the dynamic pipeline), ``datagen`` derives
fine-tuning data from an outcome log, ``analyze`` computes calibration,
verification, upper-bound, ensemble, and hierarchy-violation summaries, and
``report`` regenerates a report from logs. Flags override config-file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .analysis import (
    decision_accuracy,
    final_choices,
    hierarchy_violations,
    kl_divergence,
    majority_ensemble,
    round1_choices,
    upper_bound,
    usage_distribution,
    verification_stats,
)
from .backends import BackendError
from .config import ConfigError, build_run_config, parse_config_file
from .datagen import (
    DEFAULT_TOTAL_CAP,
    build_decision_data,
    build_execution_data,
    build_multiround_data,
    build_verification_data,
    emit_training_jsonl,
    optimal_policy,
)
from .datasets import DatasetFormatError, load_dataset
from .metrics import CostWeights, report_to_dict
from .pipeline import load_traces
from .retrieval import DEFAULT_WINDOW, Bm25Index, chunk_corpus, load_corpus
from .runner import report_for_fixed_outcomes, report_for_traces, run_command, write_json
from .strategies import DEFAULT_ORDER, CorrectnessTable, StrategyRegistry

__all__ = ["main"]

log = logging.getLogger(__name__)


def _split_order(raw: str) -> list[str]:
    names = [name.strip() for name in raw.split(",") if name.strip()]
    if not names:
        raise ConfigError(f"empty strategy order {raw!r}")
    return names


def _load_table(path: str, order_csv: str) -> CorrectnessTable:
    return CorrectnessTable.load_jsonl(path, _split_order(order_csv))


def _weights(args: argparse.Namespace) -> CostWeights:
    return CostWeights(w_token=args.w_token, w_retrieval=args.w_retrieval)


def _add_weight_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--w-token", type=float, default=1.0, help="cost per generated token")
    parser.add_argument("--w-retrieval", type=float, default=100.0, help="cost per retrieval call")


def _cmd_index(args: argparse.Namespace) -> int:
    documents = load_corpus(args.corpus)
    passages = chunk_corpus(documents, window=args.window)
    index = Bm25Index(passages, k1=args.k1, b=args.b)
    index.save(args.out)
    print(f"indexed {len(passages)} passages from {len(documents)} documents -> {args.out}")
    return 0


_BACKEND_SHORTHAND_KEYS = {"scripted": "script", "oracle": "table", "http": "endpoint"}


def _apply_backend_shorthand(values: dict[str, str], shorthand: str) -> None:
    kind, sep, rest = shorthand.partition(":")
    if kind not in _BACKEND_SHORTHAND_KEYS or not sep or not rest:
        raise ConfigError(
            f"--backend expects kind:target (e.g. scripted:replies.jsonl), got {shorthand!r}"
        )
    values["backend_kind"] = kind
    values[_BACKEND_SHORTHAND_KEYS[kind]] = rest


_RUN_OVERRIDES = (
    ("dataset", "dataset"),
    ("dataset_format", "dataset_format"),
    ("mode", "mode"),
    ("strategies", "strategies"),
    ("rounds", "rounds"),
    ("seed", "seed"),
    ("out", "out"),
    ("parallelism", "parallelism"),
    ("index", "index"),
    ("decision_shots", "decision_shots"),
    ("decision_fallback", "decision_fallback"),
    ("backend_kind", "backend_kind"),
    ("endpoint", "endpoint"),
    ("model", "model"),
    ("temperature", "temperature"),
    ("api_key_env", "api_key_env"),
    ("script", "script"),
    ("table", "table"),
    ("cache", "cache"),
    ("timeout", "timeout"),
    ("template_dir", "template_dir"),
    ("shots_dir", "shots_dir"),
    ("w_token", "w_token"),
    ("w_retrieval", "w_retrieval"),
)


def _cmd_run(args: argparse.Namespace) -> int:
    values: dict[str, str] = {}
    if args.config:
        values.update(parse_config_file(args.config))
    if args.backend:
        _apply_backend_shorthand(values, args.backend)
    for attr, key in _RUN_OVERRIDES:
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = str(value)
    config = build_run_config(values)
    return run_command(config)


def _cmd_datagen(args: argparse.Namespace) -> int:
    order = _split_order(args.order)
    table = _load_table(args.outcomes, args.order)
    records = load_dataset(args.dataset, args.dataset_format)
    registry = StrategyRegistry()
    specs = registry.ordered(order)
    kinds = _split_order(args.kinds)
    unknown = [k for k in kinds if k not in ("decision", "execution", "verification", "multiround")]
    if unknown:
        raise ConfigError(f"unknown datagen kinds {unknown}")
    policy = optimal_policy(table, order, f1_threshold=args.f1_threshold)
    instances = []
    if "decision" in kinds:
        instances.extend(build_decision_data(table, policy, records, specs))
    if "execution" in kinds:
        instances.extend(
            build_execution_data(table, records, specs, f1_threshold=args.f1_threshold)
        )
    if "verification" in kinds:
        instances.extend(build_verification_data(table, records, specs))
    if "multiround" in kinds:
        instances.extend(
            build_multiround_data(table, records, specs, pair_budget=args.pair_budget)
        )
    written = emit_training_jsonl(
        instances, args.out, shuffle_seed=args.seed, total_cap=args.cap
    )
    summary = " ".join(f"{kind}={count}" for kind, count in sorted(written.items()))
    print(f"wrote {sum(written.values())} instances ({summary}) -> {args.out}")
    return 0


def _load_choices(args: argparse.Namespace) -> dict[str, str]:
    if args.traces:
        traces = load_traces(args.traces)
        picker = round1_choices if args.round == "first" else final_choices
        return picker(traces)
    choices: dict[str, str] = {}
    with open(args.choices, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                choices[str(record["question_id"])] = str(record["strategy"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{args.choices}:{lineno}: bad choice record: {exc}") from exc
    if not choices:
        raise ConfigError(f"{args.choices}: no choices found")
    return choices


def _cmd_analyze_calibration(args: argparse.Namespace) -> int:
    order = _split_order(args.order)
    table = _load_table(args.outcomes, args.order)
    policy = optimal_policy(table, order, f1_threshold=args.f1_threshold)
    choices = _load_choices(args)
    missing = sorted(qid for qid in choices if qid not in policy)
    if missing:
        raise ConfigError(f"choices cover questions outside the outcome log: {missing[:5]}")
    usage = usage_distribution(list(choices.values()), order)
    optimal_usage = usage_distribution([policy[qid] for qid in choices], order)
    payload = {
        "usage": usage,
        "optimal_usage": optimal_usage,
        "kl_to_optimal": kl_divergence(usage, optimal_usage),
        "decision_accuracy": decision_accuracy(choices, policy),
        "n": len(choices),
    }
    write_json(Path(args.out), payload)
    return 0


def _cmd_analyze_verification(args: argparse.Namespace) -> int:
    order = _split_order(args.order)
    table = _load_table(args.outcomes, args.order)
    records = load_dataset(args.dataset, args.dataset_format)
    golds = {record.id: record.golds() for record in records}
    policy = optimal_policy(table, order, f1_threshold=args.f1_threshold)
    traces = load_traces(args.traces)
    stats = verification_stats(traces, golds, policy, order)
    payload = {
        "kl_pre": stats.kl_pre,
        "kl_post": stats.kl_post,
        "reject_pct": stats.reject_pct,
        "precision_no": stats.precision_no,
        "n": stats.n,
    }
    write_json(Path(args.out), payload)
    return 0


def _cmd_analyze_upper_bound(args: argparse.Namespace) -> int:
    order = _split_order(args.order)
    table = _load_table(args.outcomes, args.order)
    policy = optimal_policy(table, order, f1_threshold=args.f1_threshold)
    report = upper_bound(table, policy)
    write_json(Path(args.out), report_to_dict(report, _weights(args)))
    return 0


def _cmd_analyze_ensemble(args: argparse.Namespace) -> int:
    table = _load_table(args.outcomes, args.order)
    answers, report = majority_ensemble(table, _split_order(args.order))
    write_json(Path(args.out), report_to_dict(report, _weights(args)))
    if args.answers:
        with open(args.answers, "w", encoding="utf-8") as fh:
            for question_id, answer in answers.items():
                fh.write(
                    json.dumps(
                        {"question_id": question_id, "answer": answer},
                        ensure_ascii=False,
                        sort_keys=True,
                    )
                    + "\n"
                )
    return 0


def _cmd_analyze_violations(args: argparse.Namespace) -> int:
    order = _split_order(args.order)
    contribution = hierarchy_violations(_load_table(args.outcomes, args.order), order)
    payload = {
        "order": list(order),
        "violation_mass": contribution.violation_mass,
        "total_mass": contribution.total_mass,
        "subsets": [
            {"bitmask": bitmask, "members": members, "mass": mass, "violation": flag}
            for bitmask, members, mass, flag in contribution.to_csv_rows()
        ],
    }
    write_json(Path(args.out), payload)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bitmask", "members", "mass", "violation"])
            for bitmask, members, mass, flag in contribution.to_csv_rows():
                writer.writerow([bitmask, members, repr(mass), str(flag).lower()])
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    weights = _weights(args)
    if args.traces:
        records = load_dataset(args.dataset, args.dataset_format)
        traces = load_traces(args.traces)
        if not traces:
            raise ConfigError(f"{args.traces}: no traces to report on")
        report = report_for_traces(traces, records, weights)
        write_json(Path(args.out), report_to_dict(report, weights))
    else:
        table = _load_table(args.outcomes, args.order)
        write_json(Path(args.out), report_for_fixed_outcomes(table, weights))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyplan",
        description="Dynamic strategy planning for question answering: runs, data generation, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="chunk a corpus and build the retrieval index")
    p_index.add_argument("--corpus", required=True, help="directory of .txt files or a JSONL file")
    p_index.add_argument("--out", required=True, help="index JSON output path")
    p_index.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="tokens per passage")
    p_index.add_argument("--k1", type=float, default=1.2)
    p_index.add_argument("--b", type=float, default=0.75)
    p_index.set_defaults(func=_cmd_index)

    p_run = sub.add_parser("run", help="execute a dataset against a backend")
    p_run.add_argument("--config", help="key=value config file; flags override it")
    p_run.add_argument(
        "--backend",
        help="backend shorthand kind:target (scripted:replies.jsonl, oracle:table.json, http:URL)",
    )
    p_run.add_argument("--dataset")
    p_run.add_argument("--dataset-format", dest="dataset_format", choices=("canonical", "hotpotqa"))
    p_run.add_argument("--mode", choices=("fixed", "dyplan-base", "dyplan-verify"))
    p_run.add_argument("--strategies", help="comma-separated preference order")
    p_run.add_argument("--rounds", type=int)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    p_run.add_argument("--parallelism", type=int)
    p_run.add_argument("--index", help="retrieval index path")
    p_run.add_argument("--decision-shots", dest="decision_shots", type=int)
    p_run.add_argument("--decision-fallback", dest="decision_fallback")
    p_run.add_argument("--backend-kind", dest="backend_kind", choices=("http", "scripted", "oracle"))
    p_run.add_argument("--endpoint")
    p_run.add_argument("--model")
    p_run.add_argument("--temperature", type=float)
    p_run.add_argument("--api-key-env", dest="api_key_env")
    p_run.add_argument("--script", help="scripted backend replies JSONL")
    p_run.add_argument("--table", help="oracle backend table JSON")
    p_run.add_argument("--cache", help="response cache JSONL path")
    p_run.add_argument("--timeout", type=float)
    p_run.add_argument("--template-dir", dest="template_dir")
    p_run.add_argument("--shots-dir", dest="shots_dir")
    p_run.add_argument("--w-token", dest="w_token", type=float)
    p_run.add_argument("--w-retrieval", dest="w_retrieval", type=float)
    p_run.set_defaults(func=_cmd_run)

    p_datagen = sub.add_parser("datagen", help="build fine-tuning data from an outcome log")
    p_datagen.add_argument("--outcomes", required=True, help="outcome log JSONL")
    p_datagen.add_argument("--dataset", required=True)
    p_datagen.add_argument(
        "--dataset-format", dest="dataset_format", default="canonical",
        choices=("canonical", "hotpotqa"),
    )
    p_datagen.add_argument("--order", default=",".join(DEFAULT_ORDER))
    p_datagen.add_argument("--out", required=True)
    p_datagen.add_argument(
        "--kinds", default="decision,execution,verification,multiround",
        help="comma-separated instance kinds to build",
    )
    p_datagen.add_argument("--cap", type=int, default=DEFAULT_TOTAL_CAP)
    p_datagen.add_argument("--seed", type=int, default=0)
    p_datagen.add_argument("--pair-budget", dest="pair_budget", type=int)
    p_datagen.add_argument("--f1-threshold", dest="f1_threshold", type=float)
    p_datagen.set_defaults(func=_cmd_datagen)

    p_analyze = sub.add_parser("analyze", help="analytics over logs and traces")
    analyze_sub = p_analyze.add_subparsers(dest="analysis", required=True)

    p_cal = analyze_sub.add_parser("calibration", help="strategy usage vs the optimal policy")
    group = p_cal.add_mutually_exclusive_group(required=True)
    group.add_argument("--traces", help="pipeline trace JSONL")
    group.add_argument("--choices", help="JSONL of {question_id, strategy}")
    p_cal.add_argument("--round", choices=("first", "final"), default="first")
    p_cal.add_argument("--outcomes", required=True)
    p_cal.add_argument("--order", default=",".join(DEFAULT_ORDER))
    p_cal.add_argument("--f1-threshold", dest="f1_threshold", type=float)
    p_cal.add_argument("--out", required=True)
    p_cal.set_defaults(func=_cmd_analyze_calibration)

    p_ver = analyze_sub.add_parser("verification", help="what verification changed")
    p_ver.add_argument("--traces", required=True)
    p_ver.add_argument("--outcomes", required=True)
    p_ver.add_argument("--dataset", required=True)
    p_ver.add_argument(
        "--dataset-format", dest="dataset_format", default="canonical",
        choices=("canonical", "hotpotqa"),
    )
    p_ver.add_argument("--order", default=",".join(DEFAULT_ORDER))
    p_ver.add_argument("--f1-threshold", dest="f1_threshold", type=float)
    p_ver.add_argument("--out", required=True)
    p_ver.set_defaults(func=_cmd_analyze_verification)

    p_ub = analyze_sub.add_parser("upper-bound", help="score the optimal policy's outcomes")
    p_ub.add_argument("--outcomes", required=True)
    p_ub.add_argument("--order", default=",".join(DEFAULT_ORDER))
    p_ub.add_argument("--f1-threshold", dest="f1_threshold", type=float)
    p_ub.add_argument("--out", required=True)
    _add_weight_flags(p_ub)
    p_ub.set_defaults(func=_cmd_analyze_upper_bound)

    p_ens = analyze_sub.add_parser("ensemble", help="majority vote across strategies")
    p_ens.add_argument("--outcomes", required=True)
    p_ens.add_argument("--order", default=",".join(DEFAULT_ORDER))
    p_ens.add_argument("--out", required=True)
    p_ens.add_argument("--answers", help="optional JSONL of winning answers")
    _add_weight_flags(p_ens)
    p_ens.set_defaults(func=_cmd_analyze_ensemble)

    p_vio = analyze_sub.add_parser("violations", help="success-subset masses and hierarchy breaks")
    p_vio.add_argument("--outcomes", required=True)
    p_vio.add_argument("--order", default=",".join(DEFAULT_ORDER))
    p_vio.add_argument("--out", required=True)
    p_vio.add_argument("--csv", help="optional per-subset CSV for plotting")
    p_vio.set_defaults(func=_cmd_analyze_violations)

    p_report = sub.add_parser("report", help="regenerate a report from logs")
    source = p_report.add_mutually_exclusive_group(required=True)
    source.add_argument("--traces", help="pipeline trace JSONL")
    source.add_argument("--outcomes", help="fixed-run outcome JSONL")
    p_report.add_argument("--dataset", help="required with --traces")
    p_report.add_argument(
        "--dataset-format", dest="dataset_format", default="canonical",
        choices=("canonical", "hotpotqa"),
    )
    p_report.add_argument("--order", default=",".join(DEFAULT_ORDER))
    p_report.add_argument("--out", required=True)
    _add_weight_flags(p_report)
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is _cmd_report and args.traces and not args.dataset:
        parser.error("--traces requires --dataset")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BackendError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
