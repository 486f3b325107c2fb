"""Question-answering dataset ingestion.

The canonical on-disk form is JSONL with ``{"id", "question", "answers"}``
per line. A converter handles the public HotpotQA dev JSON (a single array
of ``{"_id", "question", "answer"}`` objects).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .metrics import GoldAnswerSet

__all__ = ["DatasetRecord", "DatasetFormatError", "load_dataset", "DATASET_FORMATS"]

DATASET_FORMATS = ("canonical", "hotpotqa")


class DatasetFormatError(ValueError):
    """A dataset file does not match its declared format."""


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    question: str
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.id:
            raise DatasetFormatError("dataset record has an empty id")
        if "|" in self.id:
            raise DatasetFormatError(f"question id {self.id!r} may not contain '|'")
        if not self.question:
            raise DatasetFormatError(f"question {self.id!r} has empty text")
        if not self.answers or any(not isinstance(a, str) for a in self.answers):
            raise DatasetFormatError(f"question {self.id!r} needs at least one string answer")

    def golds(self) -> GoldAnswerSet:
        return GoldAnswerSet(self.id, self.answers)


def _check_unique_ids(records: list[DatasetRecord], path: Path) -> list[DatasetRecord]:
    seen: set[str] = set()
    for record in records:
        if record.id in seen:
            raise DatasetFormatError(f"{path}: duplicate question id {record.id!r}")
        seen.add(record.id)
    if not records:
        raise DatasetFormatError(f"{path}: dataset is empty")
    return records


def _load_canonical(path: Path) -> list[DatasetRecord]:
    records: list[DatasetRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                records.append(
                    DatasetRecord(
                        id=str(raw["id"]),
                        question=str(raw["question"]),
                        answers=tuple(raw["answers"]),
                    )
                )
            except DatasetFormatError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: bad record: {exc}") from exc
    return _check_unique_ids(records, path)


def _load_hotpotqa(path: Path) -> list[DatasetRecord]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise DatasetFormatError(f"{path}: expected a top-level JSON array")
    records: list[DatasetRecord] = []
    for pos, item in enumerate(raw):
        try:
            records.append(
                DatasetRecord(
                    id=str(item["_id"]),
                    question=str(item["question"]),
                    answers=(str(item["answer"]),),
                )
            )
        except DatasetFormatError as exc:
            raise DatasetFormatError(f"{path}[{pos}]: {exc}") from exc
        except (KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}[{pos}]: bad record: {exc}") from exc
    return _check_unique_ids(records, path)


def load_dataset(path: str | Path, format: str = "canonical") -> list[DatasetRecord]:
    """Load a dataset, validating ids are unique and every record is complete."""
    if format not in DATASET_FORMATS:
        raise DatasetFormatError(
            f"unknown dataset format {format!r}; expected one of {DATASET_FORMATS}"
        )
    p = Path(path)
    if format == "canonical":
        return _load_canonical(p)
    return _load_hotpotqa(p)
