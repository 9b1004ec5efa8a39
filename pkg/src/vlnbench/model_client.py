"""Model backends: a chat-completions HTTP client and a scripted test double."""

from __future__ import annotations

import base64
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

MAX_IMAGE_BYTES = 20 * 1024 * 1024
RETRYABLE_STATUS = frozenset({408, 425, 429, 500, 502, 503, 504})
AUTH_STATUS = frozenset({401, 403})

ENV_ENDPOINT = "MODEL_ENDPOINT"
ENV_MODEL = "MODEL_NAME"
ENV_API_KEY = "MODEL_API_KEY"


class ModelError(Exception):
    """A backend call that did not produce a reply."""

    def __init__(self, message: str, *, status: int | None = None, attempts: int = 0) -> None:
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class AuthenticationError(ModelError):
    pass


class RequestRejectedError(ModelError):
    pass


class RetriesExhaustedError(ModelError):
    pass


class OversizedImageError(ModelError):
    pass


class ConfigurationError(Exception):
    pass


@dataclass(frozen=True, slots=True)
class ImagePayload:
    media_type: str
    data: bytes

    def to_data_uri(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"

    @classmethod
    def from_data_uri(cls, uri: str) -> ImagePayload:
        m = re.fullmatch(r"data:([\w.+-]+/[\w.+-]+);base64,([A-Za-z0-9+/=]*)", uri)
        if m is None:
            raise ValueError("not a base64 data URI")
        return cls(m.group(1), base64.b64decode(m.group(2), validate=True))


@dataclass(frozen=True, slots=True)
class ModelRequest:
    user_text: str
    system_text: str = ""
    image: ImagePayload | None = None
    max_reply_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.max_reply_tokens <= 0:
            raise ValueError("max_reply_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True, slots=True)
class ModelReply:
    text: str
    latency_ms: float
    backend_id: str


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: float = 500.0
    request_timeout_ms: float = 60_000.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff_ms < 0 or self.request_timeout_ms <= 0:
            raise ValueError("backoff must be >= 0 and timeout > 0")

    def backoff_cap_ms(self, attempt: int) -> float:
        """Upper bound of the jittered sleep after failed attempt ``attempt`` (1-based)."""
        return self.base_backoff_ms * 2 ** (attempt - 1)

    @property
    def max_backoff_ms(self) -> float:
        return self.backoff_cap_ms(self.max_attempts)

    @property
    def latency_bound_ms(self) -> float:
        return self.max_attempts * (self.request_timeout_ms + self.max_backoff_ms)


class ModelClient(Protocol):
    backend_id: str
    supports_vision: bool

    def complete(self, request: ModelRequest, policy: RetryPolicy | None = None) -> ModelReply: ...


def build_chat_payload(model: str, request: ModelRequest) -> dict[str, Any]:
    """Chat-completions request body; images travel as data-URI content parts."""
    messages: list[dict[str, Any]] = []
    if request.system_text:
        messages.append({"role": "system", "content": request.system_text})
    if request.image is None:
        messages.append({"role": "user", "content": request.user_text})
    else:
        messages.append(
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": request.user_text},
                    {"type": "image_url", "image_url": {"url": request.image.to_data_uri()}},
                ],
            }
        )
    return {
        "model": model,
        "messages": messages,
        "max_tokens": request.max_reply_tokens,
        "temperature": request.temperature,
    }


def _reply_text(body: Any) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ModelError("response has no choices[0].message.content") from exc
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str):
        raise ModelError("response content is not text")
    return content


class HostedChatClient:
    """Client for any host exposing the chat-completions POST schema."""

    backend_id = "hosted"
    supports_vision = True

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str,
        *,
        retry: RetryPolicy | None = None,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        max_image_bytes: int = MAX_IMAGE_BYTES,
    ) -> None:
        if not endpoint or not model:
            raise ConfigurationError("endpoint and model name are required")
        if not api_key:
            raise ConfigurationError("an API key is required for the hosted backend")
        endpoint = endpoint.rstrip("/")
        if not endpoint.endswith("/chat/completions"):
            endpoint += "/chat/completions"
        self.endpoint = endpoint
        self.model = model
        self._api_key = api_key
        self.retry = retry or RetryPolicy()
        self.max_image_bytes = max_image_bytes
        self._limiter = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._http = httpx.Client(transport=transport)

    def __repr__(self) -> str:
        return f"HostedChatClient(endpoint={self.endpoint!r}, model={self.model!r}, api_key='***')"

    def close(self) -> None:
        self._http.close()

    def _jitter(self, cap_ms: float) -> float:
        with self._rng_lock:
            return self._rng.uniform(0.0, cap_ms)

    def complete(self, request: ModelRequest, policy: RetryPolicy | None = None) -> ModelReply:
        policy = policy or self.retry
        if request.image is not None and len(request.image.data) > self.max_image_bytes:
            raise OversizedImageError(
                f"image of {len(request.image.data)} bytes exceeds {self.max_image_bytes}"
            )
        payload = build_chat_payload(self.model, request)
        headers = {"Authorization": f"Bearer {self._api_key}"}
        timeout = httpx.Timeout(policy.request_timeout_ms / 1000.0)

        last_status: int | None = None
        last_error = ""
        for attempt in range(1, policy.max_attempts + 1):
            started = time.monotonic()
            try:
                with self._limiter:
                    response = self._http.post(self.endpoint, json=payload, headers=headers, timeout=timeout)
            except httpx.TimeoutException:
                last_status, last_error = None, "timeout"
            except httpx.TransportError as exc:
                last_status, last_error = None, f"connection failure ({type(exc).__name__})"
            else:
                status = response.status_code
                if status in AUTH_STATUS:
                    raise AuthenticationError(f"authentication rejected (HTTP {status})", status=status, attempts=attempt)
                if 200 <= status < 300:
                    try:
                        text = _reply_text(response.json())
                    except ValueError as exc:
                        raise ModelError("response body is not JSON", status=status, attempts=attempt) from exc
                    return ModelReply(text, (time.monotonic() - started) * 1000.0, self.backend_id)
                if status not in RETRYABLE_STATUS:
                    raise RequestRejectedError(f"request rejected (HTTP {status})", status=status, attempts=attempt)
                last_status, last_error = status, f"HTTP {status}"

            logger.warning("model call attempt %d/%d failed: %s", attempt, policy.max_attempts, last_error)
            if attempt < policy.max_attempts:
                self._sleep(self._jitter(policy.backoff_cap_ms(attempt)) / 1000.0)

        raise RetriesExhaustedError(
            f"gave up after {policy.max_attempts} attempts: {last_error}",
            status=last_status,
            attempts=policy.max_attempts,
        )


def client_from_env(env: Mapping[str, str] | None = None, **kwargs: Any) -> HostedChatClient:
    env = os.environ if env is None else env
    missing = [k for k in (ENV_ENDPOINT, ENV_MODEL, ENV_API_KEY) if not env.get(k)]
    if missing:
        raise ConfigurationError(f"missing environment variables: {', '.join(missing)}")
    return HostedChatClient(env[ENV_ENDPOINT], env[ENV_MODEL], env[ENV_API_KEY], **kwargs)


@dataclass
class CannedBackend:
    """Replies from a fixed script, repeating the last entry once exhausted."""

    script: Sequence[str]
    backend_id: str = "canned"
    supports_vision: bool = True
    requests: list[ModelRequest] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.script:
            raise ValueError("canned script must be non-empty")
        self.script = list(self.script)
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest, policy: RetryPolicy | None = None) -> ModelReply:
        with self._lock:
            idx = min(len(self.requests), len(self.script) - 1)
            self.requests.append(request)
            return ModelReply(self.script[idx], 0.0, self.backend_id)

    @property
    def call_count(self) -> int:
        return len(self.requests)


def canned_backend(script: Sequence[str]) -> CannedBackend:
    return CannedBackend(list(script))
