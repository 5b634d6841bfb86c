"""Single choke point for chat completions and embeddings.

Two backends exist: :class:`MockBackend` (deterministic, offline) and
:class:`HttpBackend` (an OpenAI-style ``/chat/completions`` + ``/embeddings``
server). Every call goes through :class:`Gateway`, which validates requests,
applies the retry policy and books usage into a :class:`UsageLedger`.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Protocol

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
MOCK_DIM = 256


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class ConfigurationError(ValueError):
    """Inconsistent settings, e.g. mixing embedding dimensions in one index."""


class TransportError(RuntimeError):
    """The backend could not be reached or refused the request."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    text: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    tag: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024

    @classmethod
    def build(cls, system: str, user: str, tag: str, **kwargs: Any) -> "ChatRequest":
        return cls(messages=(Message("system", system), Message("user", user)), tag=tag, **kwargs)

    def validate(self) -> None:
        if not self.messages:
            raise ContractViolation("chat request has no messages")
        for msg in self.messages:
            if msg.role not in ROLES:
                raise ContractViolation(f"unknown role {msg.role!r}")
            if not msg.text:
                raise ContractViolation(f"empty {msg.role} message")
        if self.temperature < 0:
            raise ContractViolation("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ContractViolation("max_tokens must be positive")

    @property
    def last_user_text(self) -> str:
        for msg in reversed(self.messages):
            if msg.role == "user":
                return msg.text
        return self.messages[-1].text

    @property
    def stage(self) -> str:
        return self.tag.split(":", 1)[0] if self.tag else "untagged"


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def count_tokens(text: str) -> int:
    """Rough token count used by the mock backend: one token per 4 characters."""
    return math.ceil(len(text) / 4)


_WS = re.compile(r"\s+")


def canonical_text(text: str) -> str:
    return _WS.sub(" ", text.strip().lower())


def trigram_embed(text: str, dim: int = MOCK_DIM) -> np.ndarray:
    """Hashed character-trigram embedding, L2-normalized.

    Text is lowercased, whitespace is collapsed and one space of padding is
    added on both sides so word boundaries form their own trigrams.
    """
    norm = canonical_text(text)
    if not norm:
        raise ContractViolation("cannot embed empty text")
    counts = kernels.trigram_counts(f" {norm} ", dim)
    return counts / np.linalg.norm(counts)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


class Backend(Protocol):
    name: str
    max_attempts: int
    backoff_base: float

    def chat(self, request: ChatRequest) -> ChatResponse: ...

    def embed(self, text: str) -> np.ndarray: ...


Responder = Callable[[ChatRequest], str]


class MockBackend:
    """Deterministic offline backend.

    Replies are resolved in order: exact ``tag`` in ``script``, then the
    responder registered under the longest prefix of ``tag``, then an echo of
    the last user message. Latency is simulated from token counts so artifacts
    never depend on the wall clock.
    """

    name = "mock"
    max_attempts = 1
    backoff_base = 0.0

    def __init__(
        self,
        script: Mapping[str, Any] | None = None,
        responders: Mapping[str, Responder] | None = None,
        dim: int = MOCK_DIM,
    ) -> None:
        self.script = {k: v if isinstance(v, str) else json.dumps(v, sort_keys=True) for k, v in (script or {}).items()}
        self.responders = dict(responders or {})
        self.dim = dim

    def _resolve(self, request: ChatRequest) -> str:
        if request.tag in self.script:
            return self.script[request.tag]
        best = None
        for prefix in self.responders:
            if request.tag.startswith(prefix) and (best is None or len(prefix) > len(best)):
                best = prefix
        if best is not None:
            return self.responders[best](request)
        return request.last_user_text

    def chat(self, request: ChatRequest) -> ChatResponse:
        text = self._resolve(request)
        prompt_tokens = sum(count_tokens(m.text) for m in request.messages)
        completion_tokens = count_tokens(text)
        latency = 1 + (prompt_tokens + completion_tokens) // 50
        return ChatResponse(text, prompt_tokens, completion_tokens, latency)

    def embed(self, text: str) -> np.ndarray:
        return trigram_embed(text, self.dim)


class HttpBackend:
    """OpenAI-compatible HTTP backend (``POST {base_url}/chat/completions``)."""

    name = "http"

    def __init__(
        self,
        base_url: str,
        api_key: str,
        chat_model: str,
        embed_model: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        session: Any = None,
    ) -> None:
        import requests

        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._session = session or requests.Session()
        self._requests = requests

    def _post(self, path: str, payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        try:
            resp = self._session.post(f"{self.base_url}{path}", json=payload, headers=headers, timeout=self.timeout)
        except self._requests.RequestException as exc:
            raise TransportError(f"POST {path}: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"POST {path}: HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"POST {path}: invalid JSON body") from exc

    def chat(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.chat_model,
            "messages": [{"role": m.role, "content": m.text} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        start = time.perf_counter()
        data = self._post("/chat/completions", payload)
        latency = int(round((time.perf_counter() - start) * 1000))
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("malformed chat completion payload") from exc
        usage = data.get("usage") or {}
        prompt_tokens = int(usage.get("prompt_tokens", sum(count_tokens(m.text) for m in request.messages)))
        completion_tokens = int(usage.get("completion_tokens", count_tokens(text)))
        return ChatResponse(text, prompt_tokens, completion_tokens, latency)

    def embed(self, text: str) -> np.ndarray:
        if not self.embed_model:
            raise ConfigurationError("no embedding model configured for the HTTP backend")
        data = self._post("/embeddings", {"model": self.embed_model, "input": text})
        try:
            vec = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("malformed embedding payload") from exc
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise TransportError("backend returned a zero embedding")
        return vec / norm


# --------------------------------------------------------------------------
# Usage accounting
# --------------------------------------------------------------------------


@dataclass
class StageCounters:
    calls: int = 0
    attempts: int = 0
    failures: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_ms: int = 0


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    chars: int
    tokens: int
    ms: int


@dataclass
class UsageLedger:
    """Thread-safe accumulator of per-stage and per-document usage."""

    stages: dict[str, StageCounters] = field(default_factory=dict)
    documents: list[DocumentRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def _stage(self, name: str) -> StageCounters:
        return self.stages.setdefault(name, StageCounters())

    def record_attempt(self, stage: str, failed: bool) -> None:
        with self._lock:
            counters = self._stage(stage)
            counters.attempts += 1
            if failed:
                counters.failures += 1

    def record_call(self, stage: str, response: ChatResponse) -> None:
        with self._lock:
            counters = self._stage(stage)
            counters.calls += 1
            counters.prompt_tokens += response.prompt_tokens
            counters.completion_tokens += response.completion_tokens
            counters.wall_ms += response.latency_ms

    def record_document(self, doc_id: str, chars: int, tokens: int, ms: int) -> None:
        with self._lock:
            self.documents.append(DocumentRecord(doc_id, chars, tokens, ms))

    def total_calls(self, stage: str | None = None) -> int:
        with self._lock:
            if stage is not None:
                return self.stages.get(stage, StageCounters()).calls
            return sum(c.calls for c in self.stages.values())

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "stages": {k: asdict(v) for k, v in sorted(self.stages.items())},
                "documents": [asdict(d) for d in sorted(self.documents, key=lambda d: d.doc_id)],
            }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UsageLedger":
        ledger = cls()
        for name, counters in data.get("stages", {}).items():
            ledger.stages[name] = StageCounters(**counters)
        ledger.documents = [DocumentRecord(**d) for d in data.get("documents", [])]
        return ledger


@dataclass(frozen=True)
class ScalingReport:
    points: tuple[tuple[int, int, int], ...]  # (chars, tokens, ms)
    token_slope: float
    latency_slope: float | None

    def to_dict(self) -> dict:
        return {
            "points": [list(p) for p in self.points],
            "token_slope": self.token_slope,
            "latency_slope": self.latency_slope,
        }


def loglog_slope(x: np.ndarray | list[float], y: np.ndarray | list[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(x, dtype=np.float64))
    ly = np.log(np.asarray(y, dtype=np.float64))
    lx_c = lx - lx.mean()
    denom = float(np.dot(lx_c, lx_c))
    if denom == 0.0:
        raise InsufficientDataError("all x values are identical; slope undefined")
    return float(np.dot(lx_c, ly - ly.mean()) / denom)


def report_usage(ledger: UsageLedger) -> ScalingReport:
    docs = sorted(ledger.documents, key=lambda d: (d.chars, d.doc_id))
    if len(docs) < 2:
        raise InsufficientDataError(f"need at least 2 document records, have {len(docs)}")
    chars = [d.chars for d in docs]
    token_slope = loglog_slope(chars, [d.tokens for d in docs])
    latency_slope = None
    if all(d.ms > 0 for d in docs):
        latency_slope = loglog_slope(chars, [d.ms for d in docs])
    return ScalingReport(tuple((d.chars, d.tokens, d.ms) for d in docs), token_slope, latency_slope)


# --------------------------------------------------------------------------
# Gateway
# --------------------------------------------------------------------------


class Gateway:
    """Routes chat and embedding calls and keeps the usage ledger."""

    def __init__(self, chat_backend: Backend, embed_backend: Backend | None = None,
                 ledger: UsageLedger | None = None, sleep: Callable[[float], None] = time.sleep) -> None:
        self.chat_backend = chat_backend
        self.embed_backend = embed_backend or chat_backend
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._sleep = sleep

    @property
    def model_id(self) -> str:
        return getattr(self.chat_backend, "chat_model", self.chat_backend.name)

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        stage = request.stage
        backend = self.chat_backend
        last_exc: Exception | None = None
        for attempt in range(backend.max_attempts):
            try:
                response = backend.chat(request)
            except TransportError as exc:
                last_exc = exc
                self.ledger.record_attempt(stage, failed=True)
                logger.warning("chat attempt %d/%d failed for %s: %s", attempt + 1, backend.max_attempts, request.tag, exc)
                if attempt + 1 < backend.max_attempts:
                    self._sleep(backend.backoff_base * (2**attempt))
                continue
            self.ledger.record_attempt(stage, failed=False)
            self.ledger.record_call(stage, response)
            return response
        raise TransportError(f"{request.tag}: gave up after {backend.max_attempts} attempts") from last_exc

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ContractViolation("cannot embed empty text")
        backend = self.embed_backend
        last_exc: Exception | None = None
        for attempt in range(backend.max_attempts):
            try:
                return backend.embed(text)
            except TransportError as exc:
                last_exc = exc
                if attempt + 1 < backend.max_attempts:
                    self._sleep(backend.backoff_base * (2**attempt))
        raise TransportError(f"embedding failed after {backend.max_attempts} attempts") from last_exc

    def embed_many(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, 0))
        return np.vstack([self.embed(t) for t in texts])


def parse_json_reply(text: str) -> Any:
    """Parse a strict JSON reply, tolerating a surrounding Markdown code fence."""
    body = text.strip()
    if body.startswith("```"):
        body = body.strip("`")
        if body.lower().startswith("json"):
            body = body[4:]
    return json.loads(body)
