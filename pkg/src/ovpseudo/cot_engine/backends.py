"""Model backends: an HTTP JSON client and a scripted mock.

Wire format of the HTTP backend: ``POST <base_url>`` with body
``{"step", "prompt", "image"}`` (image = base64 PNG, plus any decode
parameters) and a JSON reply carrying ``{"text": ...}``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from ..io import dumps_line, read_jsonl
from ..preprocess import encode_png
from .prompts import Step


class BackendError(RuntimeError):
    """Transport-level failure. ``retryable`` is False for failures a retry cannot fix."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


def crop_sha256(img: np.ndarray) -> str:
    """Content hash of a crop: shape header followed by the raw BGR bytes."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    digest = hashlib.sha256(f"{h}x{w}x3:".encode("ascii"))
    digest.update(img.tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class BackendRequest:
    step: Step
    prompt: str
    crop: np.ndarray = field(repr=False, compare=False)
    params: dict = field(default_factory=dict)

    @cached_property
    def crop_sha256(self) -> str:
        return crop_sha256(self.crop)

    @cached_property
    def image_bytes(self) -> bytes:
        return encode_png(self.crop)


@dataclass(frozen=True)
class BackendResponse:
    text: str
    latency: float
    backend_id: str


class Backend(Protocol):
    backend_id: str

    def complete(self, request: BackendRequest) -> BackendResponse: ...


class HTTPBackend:
    def __init__(self, base_url: str, timeout: float = 60.0, client=None, params: dict | None = None):
        import httpx

        self.base_url = base_url
        self.backend_id = f"http:{base_url}"
        self.params = dict(params or {})
        self._client = client or httpx.Client(timeout=timeout)
        self._httpx = httpx

    def payload(self, request: BackendRequest) -> dict:
        body = {
            "step": request.step.value,
            "prompt": request.prompt,
            "image": base64.b64encode(request.image_bytes).decode("ascii"),
        }
        body.update(self.params)
        body.update(request.params)
        return body

    def complete(self, request: BackendRequest) -> BackendResponse:
        start = time.perf_counter()
        try:
            resp = self._client.post(self.base_url, json=self.payload(request))
        except self._httpx.HTTPError as e:
            raise BackendError(f"{type(e).__name__}: {e}") from e
        latency = time.perf_counter() - start
        if resp.status_code >= 500 or resp.status_code == 429:
            raise BackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}", retryable=False)
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError, TypeError) as e:
            raise BackendError(f"malformed reply: {e}") from e
        if not isinstance(text, str):
            raise BackendError("reply 'text' is not a string")
        return BackendResponse(text, latency, self.backend_id)

    def close(self):
        self._client.close()


class MockBackend:
    """Replays scripted answers keyed by ``(step, crop_sha256)``.

    Manifest lines are ``{"step", "crop_sha256", "response_text"}``; an audit
    transcript has the same keys and can be replayed directly.
    """

    backend_id = "mock"

    def __init__(self, records: Iterable[dict]):
        self.script: dict[tuple[Step, str], str] = {}
        for rec in records:
            key = (Step(rec["step"]), rec["crop_sha256"])
            text = rec["response_text"]
            if key in self.script and self.script[key] != text:
                raise ValueError(f"conflicting scripted responses for {key[0].value}/{key[1][:12]}")
            self.script[key] = text

    @classmethod
    def from_manifest(cls, path) -> "MockBackend":
        return cls(read_jsonl(path))

    def complete(self, request: BackendRequest) -> BackendResponse:
        key = (request.step, request.crop_sha256)
        try:
            text = self.script[key]
        except KeyError:
            raise BackendError(
                f"no scripted {request.step.value} response for crop {request.crop_sha256}",
                retryable=False,
            ) from None
        return BackendResponse(text, 0.0, self.backend_id)


class Transcript:
    """Append-only JSON-lines audit log of every backend exchange."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def record(self, request: BackendRequest, response: BackendResponse | None, **context) -> None:
        entry = {
            "step": request.step.value,
            "crop_sha256": request.crop_sha256,
            "prompt_sha256": hashlib.sha256(request.prompt.encode("utf-8")).hexdigest(),
            "response_text": None if response is None else response.text,
            "backend_id": None if response is None else response.backend_id,
            "latency": None if response is None else round(response.latency, 6),
            **context,
        }
        line = dumps_line(entry) + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)

    def replay_backend(self) -> MockBackend:
        return MockBackend(r for r in read_jsonl(self.path) if r.get("response_text") is not None)


def load_endpoint_config(path) -> dict:
    """Endpoint config JSON: ``base_url``, ``timeout``, ``max_retries``, ``max_in_flight``."""
    obj = json.loads(Path(path).read_text())
    if "base_url" not in obj:
        raise ValueError(f"{path}: endpoint config needs 'base_url'")
    return obj
