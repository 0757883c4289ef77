"""Chat-completion client with logprob probing, bounded concurrency and record/replay.

The wire format is the OpenAI-compatible ``/chat/completions`` JSON API.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import httpx

logger = logging.getLogger(__name__)

Message = Tuple[str, str]
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class LLMError(Exception):
    pass


class TransientError(LLMError):
    """Retryable failure: rate limit, server error or network timeout."""


class RequestError(LLMError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class LLMTimeoutError(LLMError):
    pass


class ProtocolError(LLMError):
    pass


class CassetteMiss(LLMError):
    pass


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model_name: str
    api_key_env_var: str = "SYNTHESIZER_API_KEY"
    role: str = "synthesizer"

    def __post_init__(self):
        if self.role not in ("synthesizer", "trainee"):
            raise ValueError(f"unknown endpoint role {self.role!r}")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env_var)
        if not key:
            raise LLMError(f"environment variable {self.api_key_env_var} is not set")
        return key


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    top_p: float = 0.95
    top_k: Optional[int] = 50
    repetition_penalty: float = 1.05
    max_tokens: int = 10240
    logprobs: bool = False
    top_logprobs: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k is not None and self.top_k <= 0:
            raise ValueError("top_k must be positive when set")
        if self.repetition_penalty <= 0:
            raise ValueError("repetition_penalty must be > 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.top_logprobs < 0:
            raise ValueError("top_logprobs must be >= 0")
        if self.top_logprobs > 0 and not self.logprobs:
            raise ValueError("top_logprobs > 0 requires logprobs=True")

    def with_(self, **changes) -> "GenerationParams":
        return GenerationParams(**{**asdict(self), **changes})


SYNTHESIZER_PARAMS = GenerationParams()
JUDGE_PARAMS = GenerationParams(temperature=0.0, top_p=1.0, top_k=None, repetition_penalty=1.0,
                                max_tokens=1, logprobs=True, top_logprobs=5)


@dataclass(frozen=True)
class CompletionResult:
    text: str
    first_token_top_logprobs: Tuple[Tuple[str, float], ...] = ()
    usage: Tuple[int, int] = (0, 0)

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "first_token_top_logprobs": [[t, lp] for t, lp in self.first_token_top_logprobs],
            "usage": list(self.usage),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionResult":
        try:
            pairs = tuple((str(t), float(lp)) for t, lp in d.get("first_token_top_logprobs", []))
            usage = tuple(int(x) for x in d.get("usage", (0, 0)))
            return cls(str(d["text"]), pairs, (usage[0], usage[1]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ProtocolError(f"malformed completion record: {exc}") from exc


def _canonical_messages(messages: Sequence[Message]) -> List[List[str]]:
    return [[str(role), str(content)] for role, content in messages]


def record_replay_key(messages: Sequence[Message], params: GenerationParams) -> str:
    payload = {"messages": _canonical_messages(messages), "params": asdict(params)}
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def send(self, endpoint: ModelEndpoint, messages: Sequence[Message],
             params: GenerationParams) -> CompletionResult: ...


def build_request_body(endpoint: ModelEndpoint, messages: Sequence[Message], params: GenerationParams) -> dict:
    body = {
        "model": endpoint.model_name,
        "messages": [{"role": r, "content": c} for r, c in messages],
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_tokens": params.max_tokens,
        "repetition_penalty": params.repetition_penalty,
    }
    if params.top_k is not None:
        body["top_k"] = params.top_k
    if params.logprobs:
        body["logprobs"] = True
        body["top_logprobs"] = params.top_logprobs
    if params.seed is not None:
        body["seed"] = params.seed
    return body


def parse_response(data: dict, params: GenerationParams) -> CompletionResult:
    try:
        choice = data["choices"][0]
        text = choice["message"].get("content") or ""
        pairs: List[Tuple[str, float]] = []
        lp = choice.get("logprobs")
        if lp and lp.get("content"):
            for item in lp["content"][0].get("top_logprobs") or []:
                pairs.append((str(item["token"]), min(0.0, float(item["logprob"]))))
        usage = data.get("usage") or {}
        return CompletionResult(
            text,
            tuple(pairs[: params.top_logprobs]),
            (int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
        )
    except (KeyError, IndexError, TypeError, ValueError, AttributeError) as exc:
        raise ProtocolError(f"unexpected response shape: {exc}") from exc


class HTTPBackend:
    def __init__(self, timeout: float = 120.0, client: Optional[httpx.Client] = None):
        self._client = client or httpx.Client(timeout=timeout)

    def send(self, endpoint, messages, params):
        url = endpoint.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {endpoint.api_key()}"}
        try:
            resp = self._client.post(url, json=build_request_body(endpoint, messages, params), headers=headers)
        except httpx.TimeoutException as exc:
            raise TransientError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientError(f"transport error: {exc}") from exc
        if resp.status_code in RETRYABLE_STATUS:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RequestError(resp.status_code, resp.text)
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {resp.text[:200]}") from exc
        return parse_response(data, params)

    def close(self):
        self._client.close()


class Cassette:
    """JSONL store of ``{key, request, response}`` lines."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: Dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    self._entries[obj["key"]] = obj
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ProtocolError(f"{self.path}:{lineno}: bad cassette line") from exc

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def get(self, key: str) -> Optional[CompletionResult]:
        entry = self._entries.get(key)
        return None if entry is None else CompletionResult.from_dict(entry["response"])

    def put(self, key: str, request: dict, response: CompletionResult) -> None:
        with self._lock:
            if key in self._entries:
                return
            entry = {"key": key, "request": request, "response": response.to_dict()}
            self._entries[key] = entry
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")

    def compact(self) -> None:
        """Rewrite the file sorted by key so recordings diff cleanly."""
        with self._lock:
            lines = [json.dumps(self._entries[k], ensure_ascii=False, sort_keys=True) for k in sorted(self._entries)]
            self.path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _request_record(messages, params) -> dict:
    return {"messages": _canonical_messages(messages), "params": asdict(params)}


class ReplayBackend:
    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def send(self, endpoint, messages, params):
        key = record_replay_key(messages, params)
        hit = self.cassette.get(key)
        if hit is None:
            first = messages[-1][1] if messages else ""
            raise CassetteMiss(f"no recorded response for key {key[:12]} ({first[:60]!r}...)")
        return hit


class RecordingBackend:
    def __init__(self, inner: Backend, cassette: Cassette):
        self.inner = inner
        self.cassette = cassette

    def send(self, endpoint, messages, params):
        key = record_replay_key(messages, params)
        hit = self.cassette.get(key)
        if hit is not None:
            return hit
        result = self.inner.send(endpoint, messages, params)
        self.cassette.put(key, _request_record(messages, params), result)
        return result


@dataclass
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 0.5
    factor: float = 2.0
    jitter: float = 0.2

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        base = self.base_delay * self.factor ** (attempt - 1)
        return base * (1 + rng.uniform(-self.jitter, self.jitter))


@dataclass
class ClientStats:
    calls: int = 0
    attempts: int = 0
    retries: int = 0
    failures: int = 0
    peak_in_flight: int = 0


class LLMClient:
    """Blocking, thread-safe client bound to one endpoint.

    At most ``concurrency`` requests are in flight at once; callers
    beyond that block until a slot frees.
    """

    def __init__(self, endpoint: ModelEndpoint, backend: Backend, concurrency: int = 8,
                 retry: Optional[RetryPolicy] = None, sleep: Callable[[float], None] = time.sleep,
                 rng: Optional[random.Random] = None, params: GenerationParams = SYNTHESIZER_PARAMS):
        if concurrency <= 0:
            raise ValueError("concurrency must be positive")
        self.endpoint = endpoint
        self.params = params
        self.backend = backend
        self.concurrency = concurrency
        self.retry = retry or RetryPolicy()
        self.stats = ClientStats()
        self._sleep = sleep
        self._rng = rng or random.Random(0)
        self._slots = threading.BoundedSemaphore(concurrency)
        self._lock = threading.Lock()
        self._in_flight = 0

    def complete(self, messages: Sequence[Message], params: Optional[GenerationParams] = None) -> CompletionResult:
        if not messages:
            raise ValueError("messages must be non-empty")
        params = params if params is not None else self.params
        with self._lock:
            self.stats.calls += 1
        last: Optional[Exception] = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if attempt > 1:
                with self._lock:
                    self.stats.retries += 1
                    pause = self.retry.delay(attempt - 1, self._rng)
                self._sleep(pause)
            try:
                with self._slots:
                    with self._lock:
                        self._in_flight += 1
                        self.stats.attempts += 1
                        self.stats.peak_in_flight = max(self.stats.peak_in_flight, self._in_flight)
                    try:
                        return self.backend.send(self.endpoint, messages, params)
                    finally:
                        with self._lock:
                            self._in_flight -= 1
            except TransientError as exc:
                last = exc
                logger.debug("transient failure on attempt %d: %s", attempt, exc)
            except LLMError:
                with self._lock:
                    self.stats.failures += 1
                raise
        with self._lock:
            self.stats.failures += 1
        raise LLMTimeoutError(f"gave up after {self.retry.max_attempts} attempts: {last}")

    def chat(self, prompt: str, params: Optional[GenerationParams] = None) -> str:
        return self.complete([("user", prompt)], params).text
