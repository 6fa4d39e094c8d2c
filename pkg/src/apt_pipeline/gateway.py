"""Provider-agnostic request dispatch: rate limiting, retries, test doubles.

Rate limiting is a sliding-window log over a Clock, so any window of
length ``window_s`` contains at most ``max_requests_per_window`` request
starts, attempts included. Batch dispatch fans out over at most
``max_concurrent`` worker threads and always returns results in request
order. Credentials are read from the environment at send time and never
appear in wire bodies or telemetry.
"""

from __future__ import annotations

import os
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

import httpx

from .clocks import Clock, WallClock
from .errors import AuthError, Exhausted, GatewayError, PayloadTooLarge, ScriptGap
from .parsing import ModelVerdict, render_verdict
from .prompting import VlmRequest, encode_image_payload, query_message_text


class TransientProviderError(GatewayError):
    """Retryable provider failure: throttle, timeout, server-side error."""


class Throttled(TransientProviderError):
    pass


class ProviderTimeout(TransientProviderError):
    pass


class ServerError(TransientProviderError):
    pass


@dataclass(frozen=True)
class RateLimitPolicy:
    max_requests_per_window: int = 3
    window_s: float = 60.0
    max_concurrent: int = 2
    retry_max: int = 3
    backoff_base_s: float = 2.0

    def __post_init__(self):
        if min(self.max_requests_per_window, self.max_concurrent, self.retry_max) < 1:
            raise ValueError("policy counts must be >= 1")
        if self.window_s <= 0:
            raise ValueError("window_s must be > 0")
        if self.backoff_base_s < 0:
            raise ValueError("backoff_base_s must be >= 0")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str
    model_name: str
    credential_env: str = "VLM_API_KEY"
    timeout_s: float = 60.0


@dataclass(frozen=True)
class VlmResponse:
    request_id: str
    raw_text: str
    latency_s: float
    attempt_count: int


class Provider(Protocol):
    def complete(self, request: VlmRequest) -> str: ...


def request_to_wire(request: VlmRequest, model_name: str) -> dict:
    """Generic chat-completion body: system message, then one user message
    with alternating image/text segments in request order."""
    parts: list[dict] = []
    for image, caption_text in request.context_pairs:
        payload = encode_image_payload(image)
        parts.append({"type": "image", "media_type": payload.media_type, "data": payload.data_b64})
        parts.append({"type": "text", "text": caption_text})
    for image in request.queries:
        payload = encode_image_payload(image)
        parts.append({"type": "image", "media_type": payload.media_type, "data": payload.data_b64})
        parts.append({"type": "text", "text": query_message_text(image)})
    return {
        "model": model_name,
        "messages": [
            {"role": "system", "content": request.system},
            {"role": "user", "content": parts},
        ],
    }


@dataclass
class RequestTrace:
    request_id: str
    attempt_starts: list[float] = field(default_factory=list)
    attempt_ends: list[float] = field(default_factory=list)
    ok: bool = False
    error_kind: str = ""
    wire_body: dict | None = None


class GatewayTelemetry:
    """Thread-safe record of every dispatched request, attempts included."""

    def __init__(self, capture_wire: bool = False):
        self.capture_wire = capture_wire
        self._lock = threading.Lock()
        self._traces: list[RequestTrace] = []

    def add(self, trace: RequestTrace) -> None:
        with self._lock:
            self._traces.append(trace)

    @property
    def traces(self) -> list[RequestTrace]:
        with self._lock:
            return list(self._traces)

    def start_times(self) -> list[float]:
        return sorted(t for trace in self.traces for t in trace.attempt_starts)

    def intervals(self) -> list[tuple[float, float]]:
        return [
            (s, e)
            for trace in self.traces
            for s, e in zip(trace.attempt_starts, trace.attempt_ends)
        ]


class SlidingWindowLimiter:
    """Admit at most ``max_per_window`` starts in any window of ``window_s``."""

    def __init__(self, max_per_window: int, window_s: float, clock: Clock):
        self._max = max_per_window
        self._window = window_s
        self._clock = clock
        self._starts: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        while True:
            with self._lock:
                now = self._clock.now()
                while self._starts and self._starts[0] <= now - self._window:
                    self._starts.popleft()
                if len(self._starts) < self._max:
                    self._starts.append(now)
                    return now
                wait = self._starts[0] + self._window - now
            self._clock.sleep(max(wait, 1e-9))


class VlmGateway:
    """Dispatch requests through a provider under a rate-limit policy."""

    def __init__(
        self,
        provider: Provider,
        policy: RateLimitPolicy | None = None,
        clock: Clock | None = None,
        telemetry: GatewayTelemetry | None = None,
        model_name: str = "mock-vlm",
        jitter_seed: int = 0,
    ):
        self.provider = provider
        self.policy = policy or RateLimitPolicy()
        self.clock = clock or WallClock()
        self.telemetry = telemetry
        self.model_name = model_name
        self._limiter = SlidingWindowLimiter(
            self.policy.max_requests_per_window, self.policy.window_s, self.clock
        )
        self._rng = random.Random(jitter_seed)
        self._rng_lock = threading.Lock()

    def _jitter(self) -> float:
        with self._rng_lock:
            return self._rng.uniform(0, self.policy.backoff_base_s * 0.5)

    def dispatch(self, request: VlmRequest) -> VlmResponse:
        """Send one request; retry transient failures with exponential backoff.

        Raises Exhausted when retries are spent, AuthError / PayloadTooLarge /
        ScriptGap immediately (never retried).
        """
        trace = RequestTrace(request.request_id)
        if self.telemetry is not None and self.telemetry.capture_wire:
            trace.wire_body = request_to_wire(request, self.model_name)
        attempts = 0
        first_start: float | None = None
        try:
            while True:
                self._limiter.acquire()
                start = self.clock.now()
                if first_start is None:
                    first_start = start
                attempts += 1
                trace.attempt_starts.append(start)
                try:
                    text = self.provider.complete(request)
                except TransientProviderError as exc:
                    trace.attempt_ends.append(self.clock.now())
                    if attempts > self.policy.retry_max:
                        trace.error_kind = type(exc).__name__
                        raise Exhausted(
                            f"retries exhausted after {attempts} attempts: {exc}",
                            cause=exc,
                            attempt_count=attempts,
                        ) from exc
                    delay = self.policy.backoff_base_s * 2 ** (attempts - 1) + self._jitter()
                    self.clock.sleep(delay)
                    continue
                except GatewayError as exc:
                    trace.attempt_ends.append(self.clock.now())
                    trace.error_kind = type(exc).__name__
                    raise
                end = self.clock.now()
                trace.attempt_ends.append(end)
                trace.ok = True
                return VlmResponse(
                    request_id=request.request_id,
                    raw_text=text,
                    latency_s=end - first_start,
                    attempt_count=attempts,
                )
        finally:
            if self.telemetry is not None:
                self.telemetry.add(trace)

    def dispatch_batch(self, requests: list[VlmRequest]) -> list[VlmResponse | GatewayError]:
        """Dispatch many requests, at most max_concurrent in flight.

        The result list is aligned with the input: failures surface as the
        GatewayError instance at that request's index, never silently.
        """
        if not requests:
            raise ValueError("requests must be non-empty")
        results: list[VlmResponse | GatewayError | None] = [None] * len(requests)
        work: deque[tuple[int, VlmRequest]] = deque(enumerate(requests))
        work_lock = threading.Lock()
        panic: list[BaseException] = []
        n_workers = min(self.policy.max_concurrent, len(requests))
        barrier = threading.Barrier(n_workers)

        def run() -> None:
            self.clock.register_worker()
            try:
                barrier.wait()
                while True:
                    with work_lock:
                        if not work or panic:
                            return
                        index, request = work.popleft()
                    try:
                        results[index] = self.dispatch(request)
                    except GatewayError as exc:
                        results[index] = exc
                    except BaseException as exc:  # provider bug: surface after join
                        with work_lock:
                            panic.append(exc)
                        return
            finally:
                self.clock.unregister_worker()

        threads = [threading.Thread(target=run, daemon=True) for _ in range(n_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if panic:
            raise panic[0]
        return results  # type: ignore[return-value]


# --- providers ---


@dataclass
class ScriptEntry:
    """One scripted exchange: optional request predicate, then a canned
    response text (or callable producing it) or a failure kind."""

    respond: str | Callable[[VlmRequest], str] | None = None
    fail: str | None = None
    match: Callable[[VlmRequest], bool] | None = None
    latency_s: float = 0.0


_FAILURES: dict[str, Callable[[], Exception]] = {
    "throttle": lambda: Throttled("scripted throttle"),
    "timeout": lambda: ProviderTimeout("scripted timeout"),
    "server_error": lambda: ServerError("scripted 5xx"),
    "auth": lambda: AuthError("scripted auth reject"),
    "payload_too_large": lambda: PayloadTooLarge("scripted oversized payload"),
}


class ScriptedProvider:
    """Test double that consumes script entries in order.

    Each request takes the first remaining entry whose predicate matches
    (no predicate matches anything); an uncovered request raises ScriptGap.
    """

    def __init__(self, script: list[ScriptEntry], clock: Clock | None = None):
        if not script:
            raise ValueError("script must be non-empty")
        self._script = list(script)
        self._clock = clock or WallClock()
        self._lock = threading.Lock()
        self.requests_seen: list[VlmRequest] = []

    def complete(self, request: VlmRequest) -> str:
        with self._lock:
            self.requests_seen.append(request)
            entry = next((e for e in self._script if e.match is None or e.match(request)), None)
            if entry is None:
                raise ScriptGap(f"no script entry matches request {request.request_id!r}")
            self._script.remove(entry)
        if entry.latency_s > 0:
            self._clock.sleep(entry.latency_s)
        if entry.fail is not None:
            raise _FAILURES[entry.fail]()
        if callable(entry.respond):
            return entry.respond(request)
        if entry.respond is None:
            raise ScriptGap(f"script entry for {request.request_id!r} has no response")
        return entry.respond


def scripted_provider(script: list[ScriptEntry], clock: Clock | None = None) -> ScriptedProvider:
    return ScriptedProvider(script, clock)


class ReplayProvider:
    """Answers every queried image from a fixed image_id -> label map,
    rendering well-formed verdict blocks. Used for dry runs and replays."""

    def __init__(self, labels: dict[str, str], explanations: dict[str, str] | None = None):
        self._labels = dict(labels)
        self._explanations = dict(explanations or {})
        self._lock = threading.Lock()
        self.requests_seen: list[VlmRequest] = []

    def _explain(self, image_id: str, label: str) -> str:
        return self._explanations.get(
            image_id, f"Cellular morphology in this section is consistent with {label}."
        )

    def complete(self, request: VlmRequest) -> str:
        with self._lock:
            self.requests_seen.append(request)
        blocks = []
        for image_id in request.query_ids():
            if image_id not in self._labels:
                raise ScriptGap(f"replay map has no label for image {image_id!r}")
            label = self._labels[image_id]
            blocks.append(
                render_verdict(ModelVerdict(image_id, label, self._explain(image_id, label)))
            )
        return "\n\n".join(blocks)


class HttpProvider:
    """HTTPS adapter for the generic chat-completion wire shape.

    Request body: ``{"model", "messages"}`` as built by request_to_wire.
    Response body: JSON with the completion text at
    ``choices[0].message.content`` (``completion`` accepted as fallback).
    The API key is read from the configured environment variable per call.
    """

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_s)

    def complete(self, request: VlmRequest) -> str:
        key = os.environ.get(self.config.credential_env, "")
        if not key:
            raise AuthError(f"credential env var {self.config.credential_env} is not set")
        body = request_to_wire(request, self.config.model_name)
        try:
            response = self._client.post(
                self.config.endpoint,
                json=body,
                headers={"Authorization": f"Bearer {key}"},
            )
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise ServerError(str(exc)) from exc
        if response.status_code in (401, 403):
            raise AuthError(f"provider rejected credentials ({response.status_code})")
        if response.status_code == 413:
            raise PayloadTooLarge("provider rejected request size")
        if response.status_code == 429:
            raise Throttled("provider throttled the request")
        if response.status_code >= 500:
            raise ServerError(f"provider error {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(f"unexpected provider status {response.status_code}")
        payload = response.json()
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            if isinstance(payload.get("completion"), str):
                return payload["completion"]
            raise ServerError("provider response missing completion text") from None
