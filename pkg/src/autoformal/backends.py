"""Pluggable backends: compiler execution, chat models and text embeddings.

Every backend is a small protocol with two implementations: an HTTP client for
real services and a deterministic scripted mock. Nothing else in the package
names a concrete backend class; callers receive instances.
"""

from __future__ import annotations

import hashlib
import math
import os
import re
import threading
import time
import unicodedata
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

from .core import Diagnostic, Severity
from .errors import (
    BackendError,
    BackendTimeout,
    ConfigError,
    ModelRefusal,
    ProviderFailure,
    RateLimited,
    ServerError,
    TransportError,
    UnexpectedRequest,
)

Message = dict[str, str]


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str = ""
    timeout_s: float = 300.0
    max_retries: int = 1
    auth_env: str | None = None
    path: str = ""
    temperature: float | None = None
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EndpointConfig:
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown endpoint keys: {sorted(unknown)}")
        if "base_url" not in data:
            raise ConfigError("endpoint config needs base_url")
        return cls(**data)

    def headers(self) -> dict[str, str]:
        if not self.auth_env:
            return {}
        token = os.environ.get(self.auth_env)
        if token is None:
            raise ConfigError(f"environment variable {self.auth_env} is not set")
        return {"Authorization": f"Bearer {token}"}


# -- retry -----------------------------------------------------------------------


def call_with_retries(
    fn: Callable[[], Any],
    max_retries: int,
    *,
    sleep: Callable[[float], None] = time.sleep,
    base_delay: float = 0.5,
) -> Any:
    """Run ``fn`` retrying retryable :class:`BackendError` faults.

    Backoff doubles per attempt; ``sleep`` is injectable so tests stay instant.
    """
    attempt = 0
    while True:
        try:
            return fn()
        except BackendError as exc:
            if not exc.retryable or attempt >= max_retries:
                raise
            sleep(base_delay * (2**attempt))
            attempt += 1


# -- compiler execution ------------------------------------------------------------


class LeanClient(Protocol):
    def execute(self, code: str, timeout_s: float) -> list[Diagnostic]: ...


def lean_execute(client: LeanClient, code: str, timeout_s: float) -> list[Diagnostic]:
    return client.execute(code, timeout_s)


class HttpLeanClient:
    """Client for a Lean verification server.

    Request body ``{"code": ..., "timeout_s": ...}``; response
    ``{"diagnostics": [{"severity", "pos", "endPos", "data"}, ...]}``.
    """

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._client = httpx.Client(
            base_url=config.base_url,
            transport=transport,
            headers=config.headers(),
        )
        self._path = config.path or "/check"

    def execute(self, code: str, timeout_s: float) -> list[Diagnostic]:
        try:
            resp = self._client.post(
                self._path,
                json={"code": code, "timeout_s": timeout_s},
                timeout=timeout_s + 10.0,
            )
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"lean server timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransportError(f"lean server unreachable: {exc}") from exc
        if resp.status_code == 504 or resp.status_code == 408:
            raise BackendTimeout(f"lean server reported timeout ({resp.status_code})")
        if resp.status_code >= 500:
            raise ServerError(f"lean server error {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendError(f"lean server rejected request {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            return [Diagnostic.from_wire(d) for d in body.get("diagnostics", [])]
        except (ValueError, KeyError, TypeError) as exc:
            raise ServerError(f"malformed lean server response: {exc}") from exc

    def close(self) -> None:
        self._client.close()


@dataclass
class ScriptEntry:
    """One rule of a strict scripted mock.

    ``match`` is a predicate over the request; exactly one of ``respond`` and
    ``raise_`` is set. ``times`` limits how often the entry may fire (None =
    unlimited).
    """

    match: Callable[[Any], bool]
    respond: Any = None
    raise_: BaseException | None = None
    times: int | None = None
    used: int = 0

    def available(self) -> bool:
        return self.times is None or self.used < self.times


class ScriptedBehavior:
    """Ordered rule list; the first available matching entry answers."""

    def __init__(self, entries: Iterable[ScriptEntry]):
        self.entries = list(entries)
        self._lock = threading.Lock()
        self.requests: list[Any] = []

    def handle(self, request: Any) -> Any:
        with self._lock:
            self.requests.append(request)
            for entry in self.entries:
                if entry.available() and entry.match(request):
                    entry.used += 1
                    if entry.raise_ is not None:
                        raise entry.raise_
                    return entry.respond
        raise UnexpectedRequest(f"no scripted entry matches request: {str(request)[:120]!r}")


class ScriptedLeanClient:
    """Strict mock: answers from a :class:`ScriptedBehavior` keyed on the code."""

    def __init__(self, behavior: ScriptedBehavior):
        self.behavior = behavior
        self.calls = 0

    def execute(self, code: str, timeout_s: float) -> list[Diagnostic]:
        self.calls += 1
        response = self.behavior.handle(code)
        if callable(response):
            response = response(code)
        return list(response)


@dataclass(frozen=True)
class ParseErrorRule:
    """Report ``message`` wherever ``pattern`` matches.

    The pattern must define a group named ``tok``; the diagnostic runs from the
    end of the token preceding ``tok`` to the end of ``tok``, the way Lean
    positions parser errors.
    """

    pattern: str
    message: str


DEFAULT_RULES: tuple[ParseErrorRule, ...] = (
    ParseErrorRule(r"[∀∃]\s*\w+\s+\w+\s*(?P<tok>∈)", "unexpected token '∈'; expected ','"),
    ParseErrorRule(r"(?P<tok>\bsorry_bad\b)", "unknown identifier 'sorry_bad'"),
)

_DECL_START = re.compile(r"^\s*(theorem|lemma|example|def|abbrev|instance)\b")


class MockLeanCompiler:
    """Deterministic stand-in for a Lean server.

    Scans each declaration for the configured rules and reports the first match
    per declaration, mirroring how the real parser stops at the first error in a
    command. Optionally fails on code containing a trigger substring, which
    tests use to exercise timeouts and transport faults.
    """

    def __init__(
        self,
        rules: Sequence[ParseErrorRule] = DEFAULT_RULES,
        *,
        fail_when: Callable[[str], BaseException | None] | None = None,
    ):
        self.rules = [(re.compile(r.pattern), r.message) for r in rules]
        self.fail_when = fail_when
        self.calls = 0
        self._lock = threading.Lock()

    def execute(self, code: str, timeout_s: float) -> list[Diagnostic]:
        with self._lock:
            self.calls += 1
        if self.fail_when is not None:
            fault = self.fail_when(code)
            if fault is not None:
                raise fault
        lines = code.split("\n")
        diags: list[Diagnostic] = []
        reported_in_decl = False
        for lineno, line in enumerate(lines, 1):
            if _DECL_START.match(line):
                reported_in_decl = False
            if reported_in_decl:
                continue
            for rx, message in self.rules:
                m = rx.search(line)
                if m is None:
                    continue
                tok_start, tok_end = m.span("tok")
                prefix = line[:tok_start].rstrip()
                diags.append(
                    Diagnostic(Severity.ERROR, lineno, len(prefix), lineno, tok_end, message)
                )
                reported_in_decl = True
                break
        return diags


# -- chat models --------------------------------------------------------------------


class ChatClient(Protocol):
    def chat(self, messages: Sequence[Message], *, temperature: float, max_tokens: int) -> str: ...


def chat(client: ChatClient, messages: Sequence[Message], *, temperature: float, max_tokens: int) -> str:
    if not messages:
        raise ValueError("chat needs at least one message")
    return client.chat(messages, temperature=temperature, max_tokens=max_tokens)


class HttpChatClient:
    """OpenAI-style ``/chat/completions`` client."""

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._client = httpx.Client(
            base_url=config.base_url,
            transport=transport,
            headers=config.headers(),
            timeout=config.timeout_s,
        )
        self._path = config.path or "/chat/completions"

    def chat(self, messages: Sequence[Message], *, temperature: float, max_tokens: int) -> str:
        if not messages:
            raise ValueError("chat needs at least one message")
        if self.config.temperature is not None:
            temperature = self.config.temperature
        body = {
            "model": self.config.model_name,
            "messages": list(messages),
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        try:
            resp = self._client.post(self._path, json=body)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimited("rate limited")
        if resp.status_code >= 500:
            raise ServerError(f"chat server error {resp.status_code}")
        if resp.status_code >= 400:
            raise ModelRefusal(f"chat request rejected {resp.status_code}: {resp.text[:200]}")
        try:
            choice = resp.json()["choices"][0]
            content = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ServerError(f"malformed chat response: {exc}") from exc
        if choice.get("finish_reason") == "content_filter":
            raise ModelRefusal("completion withheld by content filter")
        return content or ""

    def close(self) -> None:
        self._client.close()


class ScriptedChatClient:
    """Replays canned turns in order; strict about running out.

    Entries are either strings (returned) or exceptions (raised). An optional
    ``expect`` callable sees each request and may raise to reject it.
    """

    def __init__(
        self,
        turns: Iterable[str | BaseException],
        *,
        expect: Callable[[Sequence[Message]], None] | None = None,
    ):
        self.turns = list(turns)
        self.expect = expect
        self.position = 0
        self.requests: list[list[Message]] = []

    def chat(self, messages: Sequence[Message], *, temperature: float, max_tokens: int) -> str:
        if not messages:
            raise ValueError("chat needs at least one message")
        self.requests.append([dict(m) for m in messages])
        if self.expect is not None:
            self.expect(messages)
        if self.position >= len(self.turns):
            raise UnexpectedRequest(f"script exhausted after {len(self.turns)} turns")
        turn = self.turns[self.position]
        self.position += 1
        if isinstance(turn, BaseException):
            raise turn
        return turn


class FunctionChatClient:
    """Wraps a pure ``messages -> text`` function; used for reactive mocks."""

    def __init__(self, fn: Callable[[Sequence[Message]], str]):
        self.fn = fn

    def chat(self, messages: Sequence[Message], *, temperature: float, max_tokens: int) -> str:
        if not messages:
            raise ValueError("chat needs at least one message")
        return self.fn(messages)


# -- embeddings --------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class HashingEmbedder:
    """Character n-gram feature hashing into a unit vector.

    Deterministic across runs and platforms (blake2b, no Python ``hash``).
    """

    def __init__(self, dim: int = 256, n: int = 3):
        if dim < 1 or n < 1:
            raise ValueError("dim and n must be positive")
        self.dim = dim
        self.n = n

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def embed_one(self, text: str) -> list[float]:
        text = unicodedata.normalize("NFC", text)
        vec = [0.0] * self.dim
        if len(text) < self.n:
            grams = [text] if text else []
        else:
            grams = [text[i : i + self.n] for i in range(len(text) - self.n + 1)]
        for gram in grams:
            vec[self._bucket(gram)] += 1.0
        norm = math.sqrt(sum(v * v for v in vec))
        if norm == 0.0:
            return vec
        return [v / norm for v in vec]

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [self.embed_one(t) for t in texts]


class ScriptedEmbedder:
    """Returns fixed vectors from a lookup table; unknown texts are a failure."""

    def __init__(self, table: dict[str, Sequence[float]]):
        self.table = {k: list(v) for k, v in table.items()}

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        missing = [i for i, t in enumerate(texts) if t not in self.table]
        if missing:
            raise ProviderFailure(f"no scripted vector for {len(missing)} text(s)", indices=missing)
        return [list(self.table[t]) for t in texts]


class HttpEmbedder:
    """OpenAI-style ``/embeddings`` client, batching requests."""

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._client = httpx.Client(
            base_url=config.base_url,
            transport=transport,
            headers=config.headers(),
            timeout=config.timeout_s,
        )
        self._path = config.path or "/embeddings"

    def _embed_batch(self, batch: Sequence[str], offset: int) -> list[list[float]]:
        indices = list(range(offset, offset + len(batch)))
        try:
            resp = self._client.post(self._path, json={"model": self.config.model_name, "input": list(batch)})
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            vectors = [list(map(float, d["embedding"])) for d in data]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise ProviderFailure(f"embedding request failed: {exc}", indices=indices) from exc
        if len(vectors) != len(batch):
            raise ProviderFailure("embedding count mismatch", indices=indices)
        return vectors

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out: list[list[float]] = []
        size = max(1, self.config.batch_size)
        for start in range(0, len(texts), size):
            out.extend(self._embed_batch(texts[start : start + size], start))
        return out


@dataclass
class CallCounter:
    """Thread-safe named counters; feeds run manifests."""

    counts: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, name: str, amount: int = 1) -> None:
        with self._lock:
            self.counts[name] = self.counts.get(name, 0) + amount

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(sorted(self.counts.items()))
