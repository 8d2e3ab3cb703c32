"""The narrow interface to any vision-language model.

A backend answers exactly three questions: what are the next-token
logits for (image, prompt, generated prefix); how does text map to
token ids and back; and what vocabulary does it speak.  Remote backends
are reached over a small JSON/HTTP protocol:

    POST /v1/logits     {"image_png_b64": str, "prompt": str, "prefix_ids": [int]}
                        -> {"logits": [float]}
    POST /v1/tokenize   {"text": str} -> {"ids": [int]}
    POST /v1/detokenize {"ids": [int]} -> {"text": str}
    GET  /v1/info       -> {"name": str, "vocab_size": int}

Base64 is the RFC 4648 standard alphabet with padding.
"""

from __future__ import annotations

import abc
import base64
import time
from dataclasses import dataclass

import numpy as np
import requests

from .imgaug import ImageBuffer

LOGITS_TIMEOUT_S = 120.0
META_TIMEOUT_S = 10.0
MAX_RETRIES = 3
BACKOFF_BASE_S = 0.5

YESNO_INSTRUCTION = "Answer the question using a single word or phrase."


class BackendUnavailableError(RuntimeError):
    """Transport failure; the call may be retried."""


class ProtocolViolationError(RuntimeError):
    """The backend returned a response that breaks its own contract."""


class InvalidTokenError(ValueError):
    """A token id or word outside the backend vocabulary."""


class UnsupportedPromptError(ValueError):
    """The backend cannot interpret the given prompt."""


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    vocab_size: int
    endpoint: str

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")


def build_prompt(question: str, options: list[tuple[str, str]] | None = None) -> str:
    """Assemble the prompt text sent to backends.

    Yes/no questions get a single-word-answer instruction; multiple
    choice questions get one "L. text" line per option instead.
    """
    if not question:
        raise ValueError("question must be non-empty")
    if options:
        lines = [question] + [f"{letter}. {text}" for letter, text in options]
        return "\n".join(lines)
    return f"{question}\n{YESNO_INSTRUCTION}"


def check_logits(values, vocab_size: int) -> np.ndarray:
    """Validate a raw logit vector at the trust boundary."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != vocab_size:
        raise ProtocolViolationError(
            f"protocol-violation: expected {vocab_size} logits, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ProtocolViolationError("protocol-violation: non-finite logits")
    return arr


class Backend(abc.ABC):
    """Next-token logits plus tokenizer access."""

    @abc.abstractmethod
    def next_logits(self, image: ImageBuffer, prompt: str, prefix: list[int]) -> np.ndarray:
        ...

    @abc.abstractmethod
    def tokenize(self, text: str) -> list[int]:
        ...

    @abc.abstractmethod
    def detokenize(self, ids: list[int]) -> str:
        ...

    @abc.abstractmethod
    def info(self) -> BackendDescriptor:
        ...


class HttpBackend(Backend):
    """Client for the JSON/HTTP wire protocol.

    Transport errors are retried with exponential backoff; protocol
    violations never are.  Safe for concurrent use from multiple
    threads (each call is independent).
    """

    def __init__(self, base_url: str, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self._session = session or requests.Session()
        self._info: BackendDescriptor | None = None

    def _request(self, method: str, path: str, payload=None, timeout=META_TIMEOUT_S):
        url = self.base_url + path
        last_exc = None
        for attempt in range(MAX_RETRIES + 1):
            try:
                if method == "GET":
                    resp = self._session.get(url, timeout=timeout)
                else:
                    resp = self._session.post(url, json=payload, timeout=timeout)
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < MAX_RETRIES:
                    time.sleep(BACKOFF_BASE_S * 2**attempt)
                continue
            if resp.status_code == 400:
                # typed errors survive the wire as message prefixes
                try:
                    message = str(resp.json().get("error", ""))
                except ValueError:
                    message = resp.text[:200]
                if message.startswith("invalid-token"):
                    raise InvalidTokenError(message)
                if message.startswith("unsupported-prompt"):
                    raise UnsupportedPromptError(message)
                raise ProtocolViolationError(f"protocol-violation: {message}")
            if resp.status_code != 200:
                raise ProtocolViolationError(
                    f"protocol-violation: HTTP {resp.status_code} from {path}: "
                    f"{resp.text[:200]}"
                )
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolViolationError(f"protocol-violation: non-JSON body from {path}") from exc
        raise BackendUnavailableError(f"backend-unavailable: {url}: {last_exc}")

    def next_logits(self, image: ImageBuffer, prompt: str, prefix: list[int]) -> np.ndarray:
        payload = {
            "image_png_b64": base64.b64encode(image.to_png()).decode("ascii"),
            "prompt": prompt,
            "prefix_ids": list(prefix),
        }
        body = self._request("POST", "/v1/logits", payload, timeout=LOGITS_TIMEOUT_S)
        return check_logits(body.get("logits"), self.info().vocab_size)

    def tokenize(self, text: str) -> list[int]:
        body = self._request("POST", "/v1/tokenize", {"text": text})
        ids = body.get("ids")
        if not isinstance(ids, list):
            raise ProtocolViolationError("protocol-violation: tokenize returned no ids")
        return [int(i) for i in ids]

    def detokenize(self, ids: list[int]) -> str:
        body = self._request("POST", "/v1/detokenize", {"ids": list(ids)})
        text = body.get("text")
        if not isinstance(text, str):
            raise ProtocolViolationError("protocol-violation: detokenize returned no text")
        return text

    def info(self) -> BackendDescriptor:
        if self._info is None:
            body = self._request("GET", "/v1/info")
            try:
                self._info = BackendDescriptor(
                    name=str(body["name"]),
                    vocab_size=int(body["vocab_size"]),
                    endpoint=self.base_url,
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolViolationError(f"protocol-violation: bad info body: {body}") from exc
        return self._info


class CountingBackend(Backend):
    """Wrapper that counts next_logits calls; used to audit decode cost."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.calls = 0

    def reset(self) -> None:
        self.calls = 0

    def next_logits(self, image, prompt, prefix):
        self.calls += 1
        return self.inner.next_logits(image, prompt, prefix)

    def tokenize(self, text):
        return self.inner.tokenize(text)

    def detokenize(self, ids):
        return self.inner.detokenize(ids)

    def info(self):
        return self.inner.info()


class CachingBackend(Backend):
    """In-memory logits cache keyed on the exact (image, prompt, prefix).

    Semantically invisible: only bitwise-identical triples share an
    entry.  Intended for deterministic backends.
    """

    def __init__(self, inner: Backend):
        self.inner = inner
        self._cache: dict[tuple, np.ndarray] = {}

    def next_logits(self, image, prompt, prefix):
        key = (image.tobytes(), image.pixels.shape, prompt, tuple(prefix))
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self.inner.next_logits(image, prompt, prefix)
        return hit

    def tokenize(self, text):
        return self.inner.tokenize(text)

    def detokenize(self, ids):
        return self.inner.detokenize(ids)

    def info(self):
        return self.inner.info()
