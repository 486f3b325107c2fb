"""Chat-generation backends behind one contract.

Three kinds share the ``generate`` interface: ``http`` talks to an
OpenAI-style chat-completions endpoint, ``scripted`` replays canned responses
from a file (for tests and offline replay), and ``oracle`` synthesizes
answers from a planted correctness table so whole studies can run without a
model. A persistent JSONL cache keyed by a request digest sits in front of
any backend.

Requests may carry an optional ``request_id`` (``"qid|phase|component[|strategy]"``)
used only by the deterministic backends for routing; it never enters the
cache key.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import requests

from .metrics import normalize_answer

__all__ = [
    "ROLES",
    "FINISH_REASONS",
    "ChatMessage",
    "Generation",
    "BackendConfig",
    "Backend",
    "HttpBackend",
    "ScriptedBackend",
    "OracleBackend",
    "ResponseCache",
    "GenerationClient",
    "BackendError",
    "TransportError",
    "ResponseParseError",
    "ScriptKeyError",
    "CacheCorruptionError",
    "system",
    "user",
    "assistant",
    "make_backend",
    "generate",
    "cached_generate",
    "request_digest",
    "approx_tokens",
    "truncate_at_stop",
]

ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "scripted")

ANSWER_MARKER = "Final answer:"


class BackendError(Exception):
    """Base class for generation failures."""


class TransportError(BackendError):
    """Network failure or non-2xx response; eligible for retry."""


class ResponseParseError(BackendError):
    """Response arrived but its body is not usable; never retried."""


class ScriptKeyError(BackendError):
    """A deterministic backend had no entry for the request."""


class CacheCorruptionError(BackendError):
    """The response cache contains an unreadable or invalid entry."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"illegal chat role {self.role!r}")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}

    @classmethod
    def from_dict(cls, record: Mapping) -> "ChatMessage":
        return cls(role=str(record["role"]), content=str(record["content"]))


def system(content: str) -> ChatMessage:
    return ChatMessage("system", content)


def user(content: str) -> ChatMessage:
    return ChatMessage("user", content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage("assistant", content)


@dataclass(frozen=True)
class Generation:
    """One completion: text already truncated at stop sequences, plus accounting."""

    text: str
    gen_tokens: int
    finish_reason: str

    def __post_init__(self) -> None:
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"illegal finish reason {self.finish_reason!r}")
        if self.gen_tokens < 0:
            raise ValueError(f"gen_tokens must be >= 0, got {self.gen_tokens}")


@dataclass(frozen=True)
class BackendConfig:
    """Which backend to build and how to reach it.

    ``endpoint``/``model`` apply to ``http``, ``script_path`` to ``scripted``,
    ``table_path`` to ``oracle``. The API key is read from the environment
    variable named by ``api_key_env``, never stored here.
    """

    kind: str
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.4
    api_key_env: str = "LLM_API_KEY"
    script_path: str | None = None
    table_path: str | None = None
    cache_path: str | None = None
    timeout: float = 60.0

    _REQUIRED = {
        "http": ("endpoint", "model"),
        "scripted": ("script_path",),
        "oracle": ("table_path",),
    }

    def __post_init__(self) -> None:
        if self.kind not in self._REQUIRED:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        for field_name in self._REQUIRED[self.kind]:
            if not getattr(self, field_name):
                raise ValueError(f"backend kind {self.kind!r} requires {field_name}")


def approx_tokens(text: str) -> int:
    """Whitespace-token count, the fallback when a backend reports no usage."""
    return len(text.split())


def truncate_at_stop(text: str, stop_sequences: Sequence[str]) -> str:
    """Cut at the earliest occurrence of any stop sequence (exclusive)."""
    cut = len(text)
    for stop in stop_sequences:
        if not stop:
            continue
        idx = text.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut]


def request_digest(
    kind: str,
    model: str | None,
    temperature: float,
    messages: Sequence[ChatMessage],
    max_tokens: int,
    stop_sequences: Sequence[str],
) -> str:
    """sha256 over the canonical JSON form of everything that determines a response."""
    payload = {
        "kind": kind,
        "model": model or "",
        "temperature": float(temperature),
        "messages": [m.to_dict() for m in messages],
        "max_tokens": int(max_tokens),
        "stop_sequences": list(stop_sequences),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend:
    """Shared request validation, stop handling, and token accounting."""

    kind = "abstract"

    def __init__(self, config: BackendConfig) -> None:
        self.config = config
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        """Number of generate() calls that reached this backend (cache misses only)."""
        return self._calls

    def generate(
        self,
        messages: Sequence[ChatMessage],
        max_tokens: int,
        stop_sequences: Sequence[str] = (),
        request_id: str | None = None,
    ) -> Generation:
        if not messages:
            raise ValueError("messages must be non-empty")
        if max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
        with self._lock:
            self._calls += 1
        raw_text, usage_tokens, finish_reason = self._generate(
            list(messages), int(max_tokens), tuple(stop_sequences), request_id
        )
        text = truncate_at_stop(raw_text, stop_sequences)
        # Backend-reported usage stays authoritative; only approximate from
        # the (truncated) text when usage is absent.
        tokens = usage_tokens if usage_tokens is not None else approx_tokens(text)
        return Generation(text=text, gen_tokens=tokens, finish_reason=finish_reason)

    def _generate(
        self,
        messages: list[ChatMessage],
        max_tokens: int,
        stop_sequences: tuple[str, ...],
        request_id: str | None,
    ) -> tuple[str, int | None, str]:
        raise NotImplementedError

    def _digest(
        self,
        messages: Sequence[ChatMessage],
        max_tokens: int,
        stop_sequences: Sequence[str],
    ) -> str:
        return request_digest(
            self.kind,
            self.config.model,
            self.config.temperature,
            messages,
            max_tokens,
            stop_sequences,
        )


class HttpBackend(Backend):
    """OpenAI-style chat completions over HTTP with bounded retries.

    Transport failures (connection errors, any non-2xx status) retry up to
    ``max_attempts`` with exponential backoff; malformed bodies raise
    immediately because retrying a parse error just repeats it.
    """

    kind = "http"
    max_attempts = 3
    backoff_base = 0.5

    def _generate(self, messages, max_tokens, stop_sequences, request_id):
        payload = {
            "model": self.config.model,
            "messages": [m.to_dict() for m in messages],
            "max_tokens": max_tokens,
            "temperature": self.config.temperature,
        }
        if stop_sequences:
            payload["stop"] = list(stop_sequences)
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_error: TransportError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                response = requests.post(
                    self.config.endpoint,
                    json=payload,
                    headers=headers,
                    timeout=self.config.timeout,
                )
            except requests.RequestException as exc:
                last_error = TransportError(
                    f"request to {self.config.endpoint} failed: {exc}"
                )
                continue
            if response.status_code // 100 != 2:
                last_error = TransportError(
                    f"{self.config.endpoint} returned HTTP {response.status_code}"
                )
                continue
            return self._parse(response)
        assert last_error is not None
        raise last_error

    @staticmethod
    def _parse(response) -> tuple[str, int | None, str]:
        try:
            body = response.json()
        except ValueError as exc:
            raise ResponseParseError(f"response body is not JSON: {exc}") from exc
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseParseError(
                f"response missing choices[0].message.content: {exc!r}"
            ) from exc
        if not isinstance(text, str):
            raise ResponseParseError(f"message content is not a string: {text!r}")
        usage = body.get("usage") or {}
        completion = usage.get("completion_tokens")
        tokens = completion if isinstance(completion, int) and completion >= 0 else None
        finish = choice.get("finish_reason") if isinstance(choice, dict) else None
        return text, tokens, "length" if finish == "length" else "stop"


def candidate_keys(request_id: str | None, digest: str) -> list[str]:
    """Lookup order for scripted entries: exact id, then id suffixes, then digest.

    Suffix keys let one script line answer a whole family of requests, e.g.
    key ``"verification"`` matches every ``"<qid>|<round>|verification"``.
    """
    keys: list[str] = []
    if request_id:
        keys.append(request_id)
        parts = request_id.split("|")
        keys.extend("|".join(parts[i:]) for i in range(1, len(parts)))
    keys.append(digest)
    # Preserve order while dropping duplicates from overlapping suffixes.
    seen: set[str] = set()
    unique = []
    for key in keys:
        if key not in seen:
            seen.add(key)
            unique.append(key)
    return unique


class ScriptedBackend(Backend):
    """Replays canned responses keyed by request id (or request digest).

    The script file is JSONL with ``{"key", "text", "gen_tokens"?}`` objects.
    A missing entry is a hard error naming every key that was tried; silent
    fallthrough would mask broken routing in replay runs.
    """

    kind = "scripted"

    def __init__(self, config: BackendConfig, entries: Mapping[str, Mapping] | None = None):
        super().__init__(config)
        if entries is not None:
            self._entries = {str(k): dict(v) for k, v in entries.items()}
        else:
            self._entries = self._load(config.script_path)

    @classmethod
    def from_mapping(
        cls, mapping: Mapping[str, Mapping], temperature: float = 0.0
    ) -> "ScriptedBackend":
        config = BackendConfig(
            kind="scripted", script_path=":memory:", temperature=temperature
        )
        return cls(config, entries=mapping)

    @staticmethod
    def _load(path: str | Path) -> dict[str, dict]:
        entries: dict[str, dict] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    key = str(record["key"])
                    entry = {"text": str(record["text"])}
                    if "gen_tokens" in record and record["gen_tokens"] is not None:
                        entry["gen_tokens"] = int(record["gen_tokens"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ScriptKeyError(f"{path}:{lineno}: bad script record: {exc}") from exc
                entries[key] = entry
        return entries

    def _generate(self, messages, max_tokens, stop_sequences, request_id):
        digest = self._digest(messages, max_tokens, stop_sequences)
        keys = candidate_keys(request_id, digest)
        for key in keys:
            entry = self._entries.get(key)
            if entry is not None:
                return entry["text"], entry.get("gen_tokens"), "scripted"
        raise ScriptKeyError(
            f"no scripted response for request id {request_id!r}; tried keys {keys}"
        )


def _distractor_answer(question_id: str, strategy: str, taboo: set[str]) -> str:
    """Deterministic wrong answer: hash-derived token guaranteed outside the gold set."""
    seed = f"{question_id}|{strategy}"
    digest = hashlib.sha256(seed.encode("utf-8")).hexdigest()
    width = 10
    while True:
        token = "zz" + digest[:width]
        if token not in taboo and not any(token in gold for gold in taboo):
            return token
        width += 2  # collision with a gold answer is astronomically unlikely


class OracleBackend(Backend):
    """Synthesizes generations from a planted per-question correctness table.

    The table file is JSON::

        {
          "gen_token_profile": {"direct": 10, "decision": 1, ...},
          "questions": {
            "<qid>": {
              "gold": "Paris",                    # or a list of golds
              "strategies": {"direct": {"correct": true,
                                        "answer": "...",      # optional
                                        "gen_tokens": 12}},   # optional
              "decision": "direct",               # served for decision turns
              "verdict": "yes"                    # served for verification turns
            }
          }
        }

    Correct strategies emit ``Final answer: "<gold>"``; incorrect ones emit a
    deterministic distractor that cannot match any gold. Routing relies on
    request ids, so this backend rejects requests without one.
    """

    kind = "oracle"

    def __init__(self, config: BackendConfig, table: Mapping | None = None):
        super().__init__(config)
        raw = table if table is not None else json.loads(
            Path(config.table_path).read_text(encoding="utf-8")
        )
        self._profile = {str(k): int(v) for k, v in (raw.get("gen_token_profile") or {}).items()}
        questions = raw.get("questions")
        if not isinstance(questions, dict) or not questions:
            raise ScriptKeyError("oracle table has no questions")
        self._questions = questions

    @classmethod
    def from_table(cls, table: Mapping, temperature: float = 0.0) -> "OracleBackend":
        config = BackendConfig(
            kind="oracle", table_path=":memory:", temperature=temperature
        )
        return cls(config, table=table)

    def _question(self, question_id: str) -> Mapping:
        record = self._questions.get(question_id)
        if record is None:
            raise ScriptKeyError(f"oracle table has no question {question_id!r}")
        return record

    def _tokens_for(self, component: str, override: int | None) -> int | None:
        if override is not None:
            return override
        return self._profile.get(component)

    def _generate(self, messages, max_tokens, stop_sequences, request_id):
        if not request_id:
            raise ScriptKeyError("oracle backend requires a request id for routing")
        parts = request_id.split("|")
        if "force" in parts:
            raise ScriptKeyError(
                f"oracle backend got a forced-decode continuation ({request_id!r}); "
                "oracle generations always contain the answer marker"
            )
        question_id = parts[0]
        record = self._question(question_id)
        if "decision" in parts:
            choice = record.get("decision")
            if choice is None:
                raise ScriptKeyError(f"oracle table has no decision for {question_id!r}")
            return str(choice), self._tokens_for("decision", None), "scripted"
        if "verification" in parts:
            verdict = str(record.get("verdict", "yes"))
            return verdict, self._tokens_for("verification", None), "scripted"
        if "execution" in parts:
            strategy = parts[parts.index("execution") + 1]
        else:
            strategy = parts[-1]
        strategies = record.get("strategies") or {}
        cell = strategies.get(strategy)
        if cell is None:
            raise ScriptKeyError(
                f"oracle table has no strategy {strategy!r} for question {question_id!r}"
            )
        tokens = self._tokens_for(strategy, cell.get("gen_tokens"))
        if cell.get("correct"):
            answer = cell.get("answer")
            if answer is None:
                gold = record.get("gold")
                if gold is None:
                    raise ScriptKeyError(
                        f"oracle table marks ({question_id!r}, {strategy!r}) correct "
                        "but provides neither an answer nor a gold"
                    )
                answer = gold[0] if isinstance(gold, list) else gold
        else:
            answer = cell.get("answer")
            if answer is None:
                gold = record.get("gold")
                golds = gold if isinstance(gold, list) else [gold] if gold else []
                taboo = {normalize_answer(str(g)) for g in golds}
                answer = _distractor_answer(question_id, strategy, taboo)
        return f'{ANSWER_MARKER} "{answer}"', tokens, "scripted"


class ResponseCache:
    """Append-only JSONL cache; the full file is validated at open time.

    Later lines win on duplicate keys, which makes concatenating two cache
    files equivalent to replaying them in order. Any unreadable line raises
    ``CacheCorruptionError`` immediately rather than silently regenerating.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, Generation] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = json.loads(line)
                        generation = Generation(
                            text=str(record["text"]),
                            gen_tokens=int(record["gen_tokens"]),
                            finish_reason=str(record["finish_reason"]),
                        )
                        key = str(record["key"])
                    except (ValueError, KeyError, TypeError) as exc:
                        raise CacheCorruptionError(
                            f"{self.path}:{lineno}: unreadable cache entry: {exc}"
                        ) from exc
                    self._entries[key] = generation

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Generation | None:
        return self._entries.get(key)

    def put(self, key: str, generation: Generation) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = generation
            record = {
                "key": key,
                "text": generation.text,
                "gen_tokens": generation.gen_tokens,
                "finish_reason": generation.finish_reason,
            }
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def make_backend(config: BackendConfig) -> Backend:
    cls = {"http": HttpBackend, "scripted": ScriptedBackend, "oracle": OracleBackend}[
        config.kind
    ]
    return cls(config)


def generate(
    config: BackendConfig,
    messages: Sequence[ChatMessage],
    max_tokens: int,
    stop_sequences: Sequence[str] = (),
    request_id: str | None = None,
) -> Generation:
    """One-shot convenience: build the backend from config and generate once."""
    return make_backend(config).generate(messages, max_tokens, stop_sequences, request_id)


def cached_generate(
    backend: Backend,
    cache: ResponseCache,
    messages: Sequence[ChatMessage],
    max_tokens: int,
    stop_sequences: Sequence[str] = (),
    request_id: str | None = None,
) -> Generation:
    """Serve from the cache when possible; otherwise generate and append.

    The key covers (kind, model, temperature, messages, max_tokens,
    stop_sequences) and nothing else, so replays hit regardless of request id.
    """
    key = request_digest(
        backend.kind,
        backend.config.model,
        backend.config.temperature,
        messages,
        max_tokens,
        stop_sequences,
    )
    hit = cache.get(key)
    if hit is not None:
        return hit
    generation = backend.generate(messages, max_tokens, stop_sequences, request_id)
    cache.put(key, generation)
    return generation


class GenerationClient:
    """A backend plus an optional persistent cache; what the runners call."""

    def __init__(self, backend: Backend, cache: ResponseCache | None = None) -> None:
        self.backend = backend
        self.cache = cache

    def generate(
        self,
        messages: Sequence[ChatMessage],
        max_tokens: int,
        stop_sequences: Sequence[str] = (),
        request_id: str | None = None,
    ) -> Generation:
        if self.cache is None:
            return self.backend.generate(messages, max_tokens, stop_sequences, request_id)
        return cached_generate(
            self.backend, self.cache, messages, max_tokens, stop_sequences, request_id
        )
