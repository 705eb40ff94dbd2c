"""Chat-completion gateway with live, record, and replay modes.

Replay keys every request by a canonical hash so recorded responses can be
served offline, bit for bit. A replay miss is always an explicit error;
the gateway never falls back to the network silently. Strict-JSON response
parsing lives here too, since every caller needs the same tolerant
first-JSON-value extraction and shape validation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import requests

logger = logging.getLogger(__name__)

MODE_LIVE = "live"
MODE_RECORD = "record"
MODE_REPLAY = "replay"

ENV_BASE_URL = "FINKG_LLM_BASE_URL"
ENV_API_KEY = "FINKG_LLM_API_KEY"

#: Follow-up instruction used for the single malformed-JSON re-prompt.
REPROMPT_SUFFIX = (
    "\n\nYour previous answer was not valid JSON. "
    "Return only valid JSON matching the requested format, with no other text."
)


class GatewayError(Exception):
    """Base class for all gateway failures."""


class TransportError(GatewayError):
    """Network or endpoint failure; ``retryable`` marks transient cases."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class ReplayMissError(GatewayError):
    """No recorded response for the request hash."""

    def __init__(self, request_hash: str, request_tag: str):
        super().__init__(
            f"replay miss for request hash {request_hash} (tag {request_tag!r}); "
            "record the fixture or switch the gateway out of replay mode"
        )
        self.request_hash = request_hash


class JsonPayloadError(GatewayError):
    """Response text had no JSON value or the value failed shape validation."""

    def __init__(self, message: str, fragment: str = ""):
        super().__init__(message)
        self.fragment = fragment


@dataclass(frozen=True)
class LlmRequest:
    """One chat-completion request; request_tag names the calling step."""

    model: str
    system_prompt: str
    user_prompt: str
    temperature: float
    max_output_tokens: int = 4096
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")
        if not math.isfinite(self.temperature) or not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature must be finite in [0, 2], got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class LlmResponse:
    text: str
    token_usage: Mapping[str, int]
    latency_ms: float
    from_replay: bool


@dataclass(frozen=True)
class TransportReply:
    """What a transport returns on success."""

    text: str
    token_usage: Mapping[str, int] = field(default_factory=dict)


#: A transport issues one network call; it raises TransportError on failure.
Transport = Callable[[LlmRequest], TransportReply]


def request_hash(req: LlmRequest) -> str:
    """Platform-stable key over the semantically relevant request fields.

    request_tag and max_output_tokens are excluded: they do not change what
    the model is asked.
    """
    canonical = json.dumps(
        {
            "model": req.model,
            "system_prompt": req.system_prompt,
            "temperature": req.temperature,
            "user_prompt": req.user_prompt,
        },
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ReplayStore:
    """Directory of ``<hash>.json`` files holding recorded responses."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, h: str) -> Path:
        return self.root / f"{h}.json"

    def load(self, h: str) -> str | None:
        path = self.path_for(h)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)["response_text"]

    def save(self, req: LlmRequest, h: str, response_text: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        record = {
            "request_summary": {
                "model": req.model,
                "request_tag": req.request_tag,
                "temperature": req.temperature,
                "system_prompt": req.system_prompt,
                "user_prompt": req.user_prompt,
            },
            "response_text": response_text,
        }
        with open(self.path_for(h), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(record, fh, ensure_ascii=False, indent=2)
            fh.write("\n")

    def __len__(self) -> int:
        return len(list(self.root.glob("*.json"))) if self.root.exists() else 0


class HttpChatTransport:
    """Standard chat-completion endpoint over HTTPS."""

    def __init__(self, base_url: str, api_key: str = "", timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s

    def __call__(self, req: LlmRequest) -> TransportReply:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": req.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                headers=headers,
                json=body,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}", retryable=True) from exc
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}", retryable=True)
        if resp.status_code >= 400:
            raise TransportError(
                f"client error {resp.status_code}: {resp.text[:200]}", retryable=False
            )
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}", retryable=False) from exc
        usage = payload.get("usage") or {}
        return TransportReply(
            text=text,
            token_usage={
                "prompt": int(usage.get("prompt_tokens", 0)),
                "completion": int(usage.get("completion_tokens", 0)),
            },
        )


def transport_from_env() -> HttpChatTransport:
    base_url = os.environ.get(ENV_BASE_URL, "")
    if not base_url:
        raise GatewayError(f"{ENV_BASE_URL} is not set; cannot build a live transport")
    return HttpChatTransport(base_url=base_url, api_key=os.environ.get(ENV_API_KEY, ""))


class LlmGateway:
    """Shared client; thread-safe, with a bounded in-flight request count."""

    def __init__(
        self,
        mode: str = MODE_LIVE,
        store: ReplayStore | None = None,
        transport: Transport | None = None,
        max_retries: int = 2,
        backoff_s: float = 0.25,
        max_in_flight: int = 4,
    ):
        if mode not in (MODE_LIVE, MODE_RECORD, MODE_REPLAY):
            raise ValueError(f"unknown gateway mode {mode!r}")
        if mode in (MODE_RECORD, MODE_REPLAY) and store is None:
            raise ValueError(f"gateway mode {mode!r} requires a replay store")
        if mode == MODE_REPLAY and store is not None and not store.root.exists():
            raise ValueError(f"replay store {store.root} does not exist")
        self.mode = mode
        self.store = store
        self._transport = transport
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._slots = threading.Semaphore(max_in_flight)
        self._write_lock = threading.Lock()

    @property
    def transport(self) -> Transport:
        if self._transport is None:
            self._transport = transport_from_env()
        return self._transport

    def complete(self, req: LlmRequest) -> LlmResponse:
        h = request_hash(req)
        if self.mode == MODE_REPLAY:
            assert self.store is not None
            text = self.store.load(h)
            if text is None:
                raise ReplayMissError(h, req.request_tag)
            return LlmResponse(
                text=text, token_usage={"prompt": 0, "completion": 0}, latency_ms=0.0,
                from_replay=True,
            )
        with self._slots:
            start = time.monotonic()
            reply = self._call_with_retries(req)
            latency_ms = (time.monotonic() - start) * 1000.0
        if self.mode == MODE_RECORD:
            assert self.store is not None
            with self._write_lock:
                self.store.save(req, h, reply.text)
        usage = {
            "prompt": int(reply.token_usage.get("prompt", 0)),
            "completion": int(reply.token_usage.get("completion", 0)),
        }
        return LlmResponse(
            text=reply.text, token_usage=usage, latency_ms=latency_ms, from_replay=False
        )

    def _call_with_retries(self, req: LlmRequest) -> TransportReply:
        attempt = 0
        while True:
            try:
                return self.transport(req)
            except TransportError as exc:
                if not exc.retryable or attempt >= self.max_retries:
                    raise
                attempt += 1
                logger.warning(
                    "transport error on %r, retry %d/%d: %s",
                    req.request_tag, attempt, self.max_retries, exc,
                )
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))

    def complete_json(self, req: LlmRequest, shape: "Shape") -> tuple[object, LlmResponse]:
        """complete() plus parsing, with one re-prompt on malformed JSON."""
        response = self.complete(req)
        try:
            return parse_json_payload(response.text, shape), response
        except JsonPayloadError as exc:
            logger.warning("malformed JSON on %r, re-prompting once: %s", req.request_tag, exc)
        retry_req = LlmRequest(
            model=req.model,
            system_prompt=req.system_prompt,
            user_prompt=req.user_prompt + REPROMPT_SUFFIX,
            temperature=req.temperature,
            max_output_tokens=req.max_output_tokens,
            request_tag=req.request_tag + ".reprompt",
        )
        response = self.complete(retry_req)
        return parse_json_payload(response.text, shape), response


@dataclass(frozen=True)
class Shape:
    """Recursive descriptor for validating parsed JSON values.

    kind: one of "array", "object", "string", "any". For arrays, ``items``
    constrains each element and ``length`` pins the exact arity. For
    objects, ``required`` lists keys that must be present.
    """

    kind: str
    items: "Shape | None" = None
    length: int | None = None
    required: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("array", "object", "string", "any"):
            raise ValueError(f"unknown shape kind {self.kind!r}")


STRING = Shape(kind="string")
#: Response shape of extraction calls: array of 5-string rows.
TRIPLE_ROWS = Shape(kind="array", items=Shape(kind="array", items=STRING, length=5))


def _fragment(value: object, limit: int = 200) -> str:
    text = json.dumps(value, ensure_ascii=False, default=str)
    return text if len(text) <= limit else text[: limit - 3] + "..."


def _validate(value: object, shape: Shape, path: str) -> None:
    if shape.kind == "any":
        return
    if shape.kind == "string":
        if not isinstance(value, str):
            raise JsonPayloadError(
                f"shape mismatch at {path}: expected string, got {type(value).__name__}",
                fragment=_fragment(value),
            )
        return
    if shape.kind == "object":
        if not isinstance(value, dict):
            raise JsonPayloadError(
                f"shape mismatch at {path}: expected object, got {type(value).__name__}",
                fragment=_fragment(value),
            )
        missing = [k for k in shape.required if k not in value]
        if missing:
            raise JsonPayloadError(
                f"shape mismatch at {path}: missing required keys {missing}",
                fragment=_fragment(value),
            )
        return
    if not isinstance(value, list):
        raise JsonPayloadError(
            f"shape mismatch at {path}: expected array, got {type(value).__name__}",
            fragment=_fragment(value),
        )
    if shape.length is not None and len(value) != shape.length:
        raise JsonPayloadError(
            f"shape mismatch at {path}: expected {shape.length} elements, got {len(value)}",
            fragment=_fragment(value),
        )
    if shape.items is not None:
        for i, element in enumerate(value):
            _validate(element, shape.items, f"{path} row {i}" if path == "$" else f"{path}[{i}]")


def parse_json_payload(text: str, expected_shape: Shape) -> object:
    """First JSON value in ``text``, validated against ``expected_shape``.

    Tolerates markdown code fences and surrounding prose by scanning for
    the first position where a JSON array or object parses cleanly.
    """
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch not in "[{":
            continue
        try:
            value, _ = decoder.raw_decode(text, i)
        except ValueError:
            continue
        _validate(value, expected_shape, "$")
        return value
    raise JsonPayloadError("no JSON value found in response", fragment=_fragment(text))
