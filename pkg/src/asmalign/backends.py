"""Chat-completion backends plus the record/replay response cache.

The wire protocol follows the common chat-completions shape: POST a JSON
body ``{"model", "messages": [{"role", "content"}], "temperature"}`` and read
the assistant text from ``choices[0].message.content``.  The cache stores one
file per request, keyed by a SHA-256 of the canonicalized request, so replay
runs are byte-deterministic and never touch the network.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .errors import BackendError, ReplayMissError

API_KEY_ENV = "ASMALIGN_API_KEY"

Message = dict  # {"role": str, "content": str}


@dataclass(frozen=True)
class ChatResponse:
    text: str
    model: str
    cost_usd: float = 0.0


class ChatBackend(Protocol):
    model: str

    def complete(self, messages: Sequence[Message], temperature: float = 0.2) -> ChatResponse:
        ...


def canonical_request(model: str, messages: Sequence[Message], temperature: float) -> str:
    """Stable JSON form of a request, used both on the wire and as cache key."""
    body = {
        "model": model,
        "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
        "temperature": temperature,
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def request_key(model: str, messages: Sequence[Message], temperature: float) -> str:
    return hashlib.sha256(
        canonical_request(model, messages, temperature).encode("utf-8")
    ).hexdigest()


class HttpChatBackend:
    """Talks to a chat-completions endpoint over HTTP POST."""

    def __init__(
        self,
        base_url: str,
        model: str,
        temperature: float = 0.2,
        api_key_env: str = API_KEY_ENV,
        max_retries: int = 3,
        timeout: float = 60.0,
        retry_wait: float = 1.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.timeout = timeout
        self.retry_wait = retry_wait

    def complete(self, messages: Sequence[Message], temperature: float | None = None) -> ChatResponse:
        import requests

        if temperature is None:
            temperature = self.temperature
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = json.loads(canonical_request(self.model, messages, temperature))
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(
                    self.base_url, json=body, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                payload = resp.json()
                text = payload["choices"][0]["message"]["content"]
                cost = float(payload.get("usage", {}).get("cost_usd", 0.0))
                return ChatResponse(text=text, model=self.model, cost_usd=cost)
            except Exception as exc:  # noqa: BLE001 - retried, then surfaced
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.retry_wait * (attempt + 1))
        raise BackendError(
            f"chat backend failed after {self.max_retries} attempts: {last_error}"
        ) from last_error


class ScriptedChatBackend:
    """Deterministic in-process backend driven by a function of the messages.

    Used in tests, demos, and for recording replay fixtures without a network.
    """

    def __init__(self, script: Callable[[Sequence[Message]], str], model: str = "scripted",
                 cost_per_call: float = 0.0):
        self._script = script
        self.model = model
        self.cost_per_call = cost_per_call
        self.calls = 0

    def complete(self, messages: Sequence[Message], temperature: float = 0.2) -> ChatResponse:
        self.calls += 1
        return ChatResponse(
            text=self._script(messages), model=self.model, cost_usd=self.cost_per_call
        )


class ResponseCache:
    """One JSON file per request under ``root``; writes are atomic."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> ChatResponse | None:
        path = self._path(key)
        if not path.exists():
            return None
        obj = json.loads(path.read_text(encoding="utf-8"))
        r = obj["response"]
        return ChatResponse(text=r["text"], model=r["model"], cost_usd=r["cost_usd"])

    def put(self, key: str, request_json: str, response: ChatResponse) -> None:
        record = {
            "request": json.loads(request_json),
            "response": {
                "text": response.text,
                "model": response.model,
                "cost_usd": response.cost_usd,
            },
        }
        data = json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(data)
            os.replace(tmp, self._path(key))
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


class CachedChatBackend:
    """Wraps a backend with live / record / replay semantics.

    live: always call through, never touch the cache.
    record: call through on a miss and persist the response.
    replay: serve from the cache only; a miss is an error, the wrapped
    backend (and hence the network) is never invoked.
    """

    MODES = ("live", "record", "replay")

    def __init__(
        self,
        inner: ChatBackend | None,
        cache: ResponseCache,
        mode: str,
        model: str | None = None,
    ):
        if mode not in self.MODES:
            raise ValueError(f"unknown cache mode {mode!r}")
        if mode != "replay" and inner is None:
            raise ValueError(f"mode {mode!r} requires a wrapped backend")
        self.inner = inner
        self.cache = cache
        self.mode = mode
        # Cache keys include the model name, so replay must use the same
        # name the recording ran with.
        if model is not None:
            self.model = model
        elif inner is not None:
            self.model = inner.model
        else:
            raise ValueError("replay mode without a wrapped backend needs an explicit model")

    def complete(self, messages: Sequence[Message], temperature: float = 0.2) -> ChatResponse:
        key = request_key(self.model, messages, temperature)
        if self.mode == "live":
            return self.inner.complete(messages, temperature)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        if self.mode == "replay":
            raise ReplayMissError(f"no recorded response for request {key}")
        response = self.inner.complete(messages, temperature)
        self.cache.put(key, canonical_request(self.model, messages, temperature), response)
        return response
