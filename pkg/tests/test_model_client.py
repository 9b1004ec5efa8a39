from __future__ import annotations

import json
import logging
import threading
import time

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlnbench.model_client import (
    AuthenticationError,
    ConfigurationError,
    HostedChatClient,
    ImagePayload,
    ModelRequest,
    OversizedImageError,
    RequestRejectedError,
    RetriesExhaustedError,
    RetryPolicy,
    build_chat_payload,
    canned_backend,
    client_from_env,
)

SECRET = "sk-test-7f3a9c1e5b"


def ok(text: str = "FORWARD") -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def scripted_server(responses):
    calls: list[httpx.Request] = []
    queue = list(responses)

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        item = queue.pop(0) if len(queue) > 1 else queue[0]
        if isinstance(item, Exception):
            raise item
        return item

    return httpx.MockTransport(handler), calls


def make_client(transport, **kwargs) -> HostedChatClient:
    kwargs.setdefault("sleep", lambda s: None)
    return HostedChatClient("https://models.example/v1", "some-model", SECRET, transport=transport, **kwargs)


def test_canned_replies_in_order_then_repeat():
    backend = canned_backend(["A", "B"])
    texts = [backend.complete(ModelRequest(f"q{i}")).text for i in range(3)]
    assert texts == ["A", "B", "B"]
    assert backend.call_count == len(backend.requests) == 3
    reply = canned_backend(["FORWARD"]).complete(ModelRequest("anything"))
    assert (reply.text, reply.backend_id) == ("FORWARD", "canned")


def test_canned_script_must_not_be_empty():
    with pytest.raises(ValueError):
        canned_backend([])


def test_throttling_is_retried():
    transport, calls = scripted_server([httpx.Response(429), httpx.Response(429), ok("hello")])
    reply = make_client(transport).complete(ModelRequest("hi"))
    assert reply.text == "hello" and reply.backend_id == "hosted"
    assert len(calls) == 3


def test_authentication_failure_is_not_retried():
    transport, calls = scripted_server([httpx.Response(401), ok()])
    with pytest.raises(AuthenticationError) as info:
        make_client(transport).complete(ModelRequest("hi"))
    assert len(calls) == 1 and info.value.attempts == 1 and info.value.status == 401


def test_malformed_request_is_not_retried():
    transport, calls = scripted_server([httpx.Response(400, json={"error": "bad"}), ok()])
    with pytest.raises(RequestRejectedError):
        make_client(transport).complete(ModelRequest("hi"))
    assert len(calls) == 1


def test_transport_errors_are_retried_then_exhausted():
    transport, calls = scripted_server([httpx.ConnectError("refused"), httpx.ReadTimeout("slow"), httpx.Response(503)])
    with pytest.raises(RetriesExhaustedError) as info:
        make_client(transport).complete(ModelRequest("hi"))
    assert len(calls) == 3 and info.value.status == 503 and info.value.attempts == 3


def test_wire_format():
    transport, calls = scripted_server([ok()])
    image = ImagePayload("image/png", b"\x89PNG\r\n")
    make_client(transport).complete(ModelRequest("look", "be brief", image=image, max_reply_tokens=64))
    req = calls[0]
    assert str(req.url) == "https://models.example/v1/chat/completions"
    assert req.headers["authorization"] == f"Bearer {SECRET}"
    body = json.loads(req.content)
    assert body["model"] == "some-model" and body["max_tokens"] == 64 and body["temperature"] == 0.0
    assert body["messages"][0] == {"role": "system", "content": "be brief"}
    parts = body["messages"][1]["content"]
    assert parts[0] == {"type": "text", "text": "look"}
    assert ImagePayload.from_data_uri(parts[1]["image_url"]["url"]) == image


def test_text_only_payload_uses_plain_content():
    body = build_chat_payload("m", ModelRequest("hello"))
    assert body["messages"] == [{"role": "user", "content": "hello"}]


@given(st.binary(max_size=4096), st.sampled_from(["image/jpeg", "image/png", "image/webp"]))
def test_image_data_uri_round_trip(data, media_type):
    image = ImagePayload(media_type, data)
    assert ImagePayload.from_data_uri(image.to_data_uri()) == image


def test_oversized_image_rejected_before_sending():
    transport, calls = scripted_server([ok()])
    client = make_client(transport, max_image_bytes=10)
    with pytest.raises(OversizedImageError):
        client.complete(ModelRequest("x", image=ImagePayload("image/jpeg", b"0" * 11)))
    assert calls == []


def test_latency_is_bounded_under_a_failing_backend():
    clock = [0.0]
    policy = RetryPolicy(max_attempts=4, base_backoff_ms=200, request_timeout_ms=1500)

    def handler(request):
        clock[0] += policy.request_timeout_ms / 1000
        raise httpx.ReadTimeout("timed out", request=request)

    sleeps: list[float] = []

    def sleep(seconds: float) -> None:
        sleeps.append(seconds)
        clock[0] += seconds

    client = make_client(httpx.MockTransport(handler), sleep=sleep, retry=policy)
    with pytest.raises(RetriesExhaustedError):
        client.complete(ModelRequest("hi"))
    assert len(sleeps) == policy.max_attempts - 1
    assert all(0 <= s * 1000 <= policy.backoff_cap_ms(i) for i, s in enumerate(sleeps, start=1))
    assert clock[0] * 1000 <= policy.latency_bound_ms


def test_real_elapsed_time_within_bound():
    policy = RetryPolicy(max_attempts=3, base_backoff_ms=5, request_timeout_ms=50)
    transport, _ = scripted_server([httpx.Response(503)])
    client = HostedChatClient("https://h/v1", "m", SECRET, transport=transport, retry=policy)
    started = time.monotonic()
    with pytest.raises(RetriesExhaustedError):
        client.complete(ModelRequest("hi"))
    assert (time.monotonic() - started) * 1000 <= policy.latency_bound_ms


def test_credential_never_leaks(caplog):
    caplog.set_level(logging.DEBUG)
    transport, _ = scripted_server([httpx.Response(500), httpx.Response(401)])
    client = make_client(transport)
    with pytest.raises(AuthenticationError) as info:
        client.complete(ModelRequest("hi"))
    assert SECRET not in caplog.text
    assert SECRET not in repr(client) and SECRET not in str(client)
    assert SECRET not in str(info.value)


def test_missing_configuration():
    with pytest.raises(ConfigurationError, match="MODEL_API_KEY"):
        client_from_env({"MODEL_ENDPOINT": "https://h", "MODEL_NAME": "m"})
    with pytest.raises(ConfigurationError):
        HostedChatClient("https://h", "m", "")
    client = client_from_env({"MODEL_ENDPOINT": "https://h/v1/chat/completions", "MODEL_NAME": "m", "MODEL_API_KEY": SECRET})
    assert client.endpoint == "https://h/v1/chat/completions"


def test_in_flight_requests_are_capped():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return ok()

    client = make_client(httpx.MockTransport(handler), max_in_flight=2)
    threads = [threading.Thread(target=client.complete, args=(ModelRequest("hi"),)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 2


def test_retry_policy_validation():
    with pytest.raises(ValueError):
        RetryPolicy(max_attempts=0)
    assert RetryPolicy(max_attempts=2, base_backoff_ms=100, request_timeout_ms=1000).latency_bound_ms == 2 * (1000 + 200)
