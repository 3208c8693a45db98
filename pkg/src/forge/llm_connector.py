"""Chat-completion transport plus a deterministic record/replay mock.

Every completion, real or mocked, reports token usage; the shared
:class:`TokenLedger` is the single source of truth for token accounting and
feeds both the append-only usage log and the run report totals.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

logger = logging.getLogger(__name__)


class ConnectorError(RuntimeError):
    """Transport failed after exhausting retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class FixtureMissingError(ConnectorError):
    """Strict-replay mock had no fixture for a request."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_tokens: int = 10_000

    def content_hash(self) -> str:
        payload = json.dumps(
            {
                "model": self.model,
                "messages": [(m.role, m.content) for m in self.messages],
                "temperature": self.temperature,
                "max_output_tokens": self.max_output_tokens,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: TokenUsage
    provider_latency: float = 0.0
    retries: int = 0


@dataclass(frozen=True)
class RequestMeta:
    """Accounting coordinates attached to each completion call."""

    instance: int
    role: str
    phase: str  # "adaptation" | "evaluation"


@dataclass(frozen=True)
class TokenLogEntry:
    timestamp: float
    instance: int
    role: str
    phase: str
    prompt_tokens: int
    completion_tokens: int

    def format(self) -> str:
        return (
            f"timestamp={self.timestamp:.6f}"
            f" instance={self.instance}"
            f" role={self.role}"
            f" phase={self.phase}"
            f" prompt_tokens={self.prompt_tokens}"
            f" completion_tokens={self.completion_tokens}"
        )

    @classmethod
    def parse(cls, line: str) -> "TokenLogEntry":
        fields = dict(part.split("=", 1) for part in line.split())
        return cls(
            timestamp=float(fields["timestamp"]),
            instance=int(fields["instance"]),
            role=fields["role"],
            phase=fields["phase"],
            prompt_tokens=int(fields["prompt_tokens"]),
            completion_tokens=int(fields["completion_tokens"]),
        )


class TokenLedger:
    """Thread-safe append-only token accounting."""

    def __init__(self) -> None:
        self._entries: list[TokenLogEntry] = []
        self._lock = threading.Lock()

    def record(self, meta: RequestMeta, usage: TokenUsage) -> None:
        entry = TokenLogEntry(
            timestamp=time.time(),
            instance=meta.instance,
            role=meta.role,
            phase=meta.phase,
            prompt_tokens=usage.prompt_tokens,
            completion_tokens=usage.completion_tokens,
        )
        with self._lock:
            self._entries.append(entry)

    def entries(self) -> list[TokenLogEntry]:
        with self._lock:
            return list(self._entries)

    def totals(self, phase: str | None = None, instance: int | None = None) -> TokenUsage:
        total = TokenUsage()
        for e in self.entries():
            if phase is not None and e.phase != phase:
                continue
            if instance is not None and e.instance != instance:
                continue
            total = total + TokenUsage(e.prompt_tokens, e.completion_tokens)
        return total

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [e.format() for e in self.entries()]
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "TokenLedger":
        ledger = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line:
                ledger._entries.append(TokenLogEntry.parse(line))
        return ledger


def approx_tokens(text: str) -> int:
    """Whitespace token approximation used for mock-mode accounting."""
    return len(text.split())


def _request_usage(request: ChatRequest, content: str) -> TokenUsage:
    prompt = sum(approx_tokens(m.content) for m in request.messages)
    return TokenUsage(prompt_tokens=prompt, completion_tokens=approx_tokens(content))


Responder = Callable[[ChatRequest], str]


@dataclass
class Fixture:
    content: str
    prompt_tokens: int
    completion_tokens: int


class MockConnector:
    """Deterministic connector: replays fixtures keyed by request hash.

    With a ``responder`` the connector synthesizes (and records) a response
    on first sight of a request; in strict mode an unknown request raises
    :class:`FixtureMissingError` instead.
    """

    def __init__(
        self,
        fixtures: dict[str, Fixture] | None = None,
        responder: Responder | None = None,
        strict: bool = False,
        ledger: TokenLedger | None = None,
    ):
        self.fixtures: dict[str, Fixture] = dict(fixtures or {})
        self.responder = responder
        self.strict = strict
        self.ledger = ledger
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest, meta: RequestMeta | None = None) -> ChatResponse:
        key = request.content_hash()
        with self._lock:
            fixture = self.fixtures.get(key)
            if fixture is None:
                if self.strict or self.responder is None:
                    raise FixtureMissingError(f"no fixture recorded for request {key[:12]}")
                content = self.responder(request)
                usage = _request_usage(request, content)
                fixture = Fixture(content, usage.prompt_tokens, usage.completion_tokens)
                self.fixtures[key] = fixture
        usage = TokenUsage(fixture.prompt_tokens, fixture.completion_tokens)
        if self.ledger is not None and meta is not None:
            self.ledger.record(meta, usage)
        return ChatResponse(content=fixture.content, usage=usage, provider_latency=0.0)

    def save_fixtures(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = {
            key: {
                "content": f.content,
                "prompt_tokens": f.prompt_tokens,
                "completion_tokens": f.completion_tokens,
            }
            for key, f in sorted(self.fixtures.items())
        }
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load_fixtures(
        cls, path: str | Path, strict: bool = True, ledger: TokenLedger | None = None
    ) -> "MockConnector":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        fixtures = {
            key: Fixture(v["content"], int(v["prompt_tokens"]), int(v["completion_tokens"]))
            for key, v in raw.items()
        }
        return cls(fixtures=fixtures, strict=strict, ledger=ledger)


# transport(url, headers, payload) -> (status_code, parsed_json)
Transport = Callable[[str, dict, dict], tuple[int, dict]]


def _requests_transport(url: str, headers: dict, payload: dict) -> tuple[int, dict]:
    import requests

    response = requests.post(url, headers=headers, json=payload, timeout=120)
    try:
        body = response.json()
    except ValueError:
        body = {}
    return response.status_code, body


class HttpConnector:
    """Provider-agnostic chat-completion client with bounded retries."""

    MAX_ATTEMPTS = 3
    BACKOFF_SECONDS = 0.5

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        transport: Transport | None = None,
        ledger: TokenLedger | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.transport = transport or _requests_transport
        self.ledger = ledger
        self.sleep = sleep

    def complete(self, request: ChatRequest, meta: RequestMeta | None = None) -> ChatResponse:
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": request.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        last_status: int | None = None
        for attempt in range(self.MAX_ATTEMPTS):
            started = time.monotonic()
            try:
                status, body = self.transport(url, headers, payload)
            except OSError as exc:
                last_status = None
                logger.warning("connector transport error (attempt %d): %s", attempt + 1, exc)
                self.sleep(self.BACKOFF_SECONDS * 2**attempt)
                continue
            if 500 <= status < 600 or status == 429:
                last_status = status
                logger.warning("connector got status %d (attempt %d)", status, attempt + 1)
                self.sleep(self.BACKOFF_SECONDS * 2**attempt)
                continue
            if status != 200:
                raise ConnectorError(f"provider returned status {status}", status=status)
            latency = time.monotonic() - started
            content = body["choices"][0]["message"]["content"]
            usage_raw = body.get("usage", {})
            usage = TokenUsage(
                prompt_tokens=int(usage_raw.get("prompt_tokens", 0)),
                completion_tokens=int(usage_raw.get("completion_tokens", 0)),
            )
            if self.ledger is not None and meta is not None:
                self.ledger.record(meta, usage)
            if attempt:
                logger.info("connector recovered after %d retries", attempt)
            return ChatResponse(
                content=content, usage=usage, provider_latency=latency, retries=attempt
            )
        raise ConnectorError(
            f"provider unavailable after {self.MAX_ATTEMPTS} attempts", status=last_status
        )
