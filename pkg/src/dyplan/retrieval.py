"""Corpus chunking and a small Okapi BM25 index.

Documents are split into fixed-size whitespace-token windows, indexed in
memory, and persisted as JSON so a prebuilt index can be shipped next to a
scripted backend. Postings are rebuilt on load; only passages and parameters
are stored.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import strip_punctuation

__all__ = [
    "Passage",
    "Bm25Index",
    "tokenize",
    "chunk_corpus",
    "load_corpus",
    "INDEX_FORMAT_VERSION",
    "DEFAULT_WINDOW",
]

INDEX_FORMAT_VERSION = 1
DEFAULT_WINDOW = 200


def tokenize(text: str) -> list[str]:
    """Index-side normalization: lowercase, drop punctuation, split on whitespace.

    Articles are kept; dropping them is an answer-scoring concern, not an
    indexing one.
    """
    return strip_punctuation(text.lower()).split()


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_title: str
    text: str
    token_count: int


def chunk_corpus(
    documents: Sequence[tuple[str, str]], window: int = DEFAULT_WINDOW
) -> list[Passage]:
    """Split (title, body) documents into consecutive windows of at most ``window`` tokens.

    Tokens are whitespace tokens of the raw body; every token lands in exactly
    one passage and passage ids encode (document, chunk) position so ordering
    is reproducible.
    """
    if window < 1:
        raise ValueError(f"chunk window must be >= 1, got {window}")
    passages: list[Passage] = []
    for doc_pos, (title, body) in enumerate(documents):
        tokens = body.split()
        for chunk_pos, start in enumerate(range(0, len(tokens), window)):
            chunk = tokens[start : start + window]
            passages.append(
                Passage(
                    passage_id=f"{doc_pos:06d}:{chunk_pos:04d}",
                    doc_title=title,
                    text=" ".join(chunk),
                    token_count=len(chunk),
                )
            )
    return passages


def load_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Read a corpus as (title, body) pairs.

    Accepts either a directory of ``.txt`` files (title = file stem, read in
    sorted order) or a JSONL file with ``{"title", "text"}`` objects.
    """
    p = Path(path)
    if p.is_dir():
        docs = [(f.stem, f.read_text(encoding="utf-8")) for f in sorted(p.glob("*.txt"))]
        if not docs:
            raise ValueError(f"no .txt files found under {p}")
        return docs
    docs = []
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                docs.append((str(record["title"]), str(record["text"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{p}:{lineno}: bad corpus record: {exc}") from exc
    if not docs:
        raise ValueError(f"no corpus records found in {p}")
    return docs


class Bm25Index:
    """Okapi BM25 over chunked passages. Immutable once built; reads are thread-safe."""

    def __init__(
        self, passages: Sequence[Passage], k1: float = 1.2, b: float = 0.75
    ) -> None:
        if not passages:
            raise ValueError("cannot build an index over zero passages")
        if k1 <= 0 or b <= 0:
            raise ValueError(f"BM25 parameters must be positive, got k1={k1}, b={b}")
        self.k1 = float(k1)
        self.b = float(b)
        self.passages: dict[str, Passage] = {}
        for passage in passages:
            if passage.passage_id in self.passages:
                raise ValueError(f"duplicate passage id {passage.passage_id!r}")
            self.passages[passage.passage_id] = passage
        self.doc_lengths: dict[str, int] = {}
        self.postings: dict[str, list[tuple[str, int]]] = {}
        for passage in passages:
            tokens = tokenize(passage.text)
            self.doc_lengths[passage.passage_id] = len(tokens)
            for term, tf in Counter(tokens).items():
                self.postings.setdefault(term, []).append((passage.passage_id, tf))
        self.n_docs = len(passages)
        self.avg_doc_len = sum(self.doc_lengths.values()) / self.n_docs

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def search(self, query: str, k: int = 3) -> list[tuple[str, float]]:
        """Top-k (passage_id, score) pairs, score-descending, ties by ascending id.

        A query with no indexed terms scores every passage 0 and returns an
        empty list rather than an arbitrary k passages.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        terms = tokenize(query)
        scores: dict[str, float] = {}
        for term, query_tf in Counter(terms).items():
            postings = self.postings.get(term)
            if not postings:
                continue
            weight = query_tf * self.idf(term)
            for passage_id, tf in postings:
                length = self.doc_lengths[passage_id]
                denom = tf + self.k1 * (1 - self.b + self.b * length / self.avg_doc_len)
                scores[passage_id] = scores.get(passage_id, 0.0) + weight * tf * (self.k1 + 1) / denom
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        return ranked[:k]

    def retrieve(self, query: str, k: int = 3) -> list[Passage]:
        return [self.passages[pid] for pid, _ in self.search(query, k)]

    def save(self, path: str | Path) -> None:
        """Persist passages and parameters as JSON with an explicit format version."""
        payload = {
            "format_version": INDEX_FORMAT_VERSION,
            "k1": self.k1,
            "b": self.b,
            "passages": [
                {
                    "passage_id": p.passage_id,
                    "doc_title": p.doc_title,
                    "text": p.text,
                    "token_count": p.token_count,
                }
                for p in self.passages.values()
            ],
        }
        Path(path).write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "Bm25Index":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        version = payload.get("format_version")
        if version != INDEX_FORMAT_VERSION:
            raise ValueError(
                f"unsupported index format version {version!r} in {path} "
                f"(expected {INDEX_FORMAT_VERSION})"
            )
        passages = [Passage(**record) for record in payload["passages"]]
        return cls(passages, k1=payload["k1"], b=payload["b"])
