"""Text-completion and embedding access with deterministic offline substitutes.

The live backend talks to OpenAI-style chat-completion and embedding
endpoints; the scripted backend replays canned responses keyed by
``(role, key)``; the hash embedder maps text to vectors with no model at all.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import PipelineError

log = logging.getLogger(__name__)

ROLES = (
    "decompose",
    "sketch",
    "synthesize",
    "repair",
    "featurize",
    "augmented_solve",
    "direct_solve",
)

API_KEY_ENV = "MATHLEARNER_API_KEY"


class BackendUnavailable(PipelineError):
    def __init__(self, message: str, transient: bool = False) -> None:
        super().__init__(message)
        self.transient = transient


class RateLimited(PipelineError):
    pass


class EmptyCompletion(PipelineError):
    pass


class ScriptExhausted(PipelineError):
    pass


class UnscriptedRequest(PipelineError):
    pass


class TemplateError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str
    role: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise TemplateError(f"unknown template role {self.role!r}")

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.text))

    def render(self, bindings: dict[str, str]) -> str:
        """Substitute every ``{name}`` placeholder in a single pass.

        Binding values may themselves contain braces; they are never
        re-scanned. Raises :class:`TemplateError` for unbound placeholders.
        """
        missing = self.placeholders() - set(bindings)
        if missing:
            raise TemplateError(f"unbound placeholders in {self.name!r}: {sorted(missing)}")
        return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), self.text)


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """One template per role, from ``directory`` or the packaged defaults."""
    templates: dict[str, PromptTemplate] = {}
    if directory is not None:
        base = Path(directory)
        for role in ROLES:
            path = base / f"{role}.txt"
            if not path.is_file():
                raise TemplateError(f"template file missing: {path}")
            templates[role] = PromptTemplate(name=path.name, text=path.read_text(encoding="utf-8"), role=role)
        return templates
    pkg = resources.files(__package__) / "templates"
    for role in ROLES:
        text = (pkg / f"{role}.txt").read_text(encoding="utf-8")
        templates[role] = PromptTemplate(name=f"{role}.txt", text=text, role=role)
    return templates


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """A finite vector; non-zero vectors are stored L2-normalized."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError("embedding must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding has non-finite components")
        object.__setattr__(self, "values", arr)

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))


def l2_normalized(raw: np.ndarray) -> EmbeddingVector:
    """Normalize in float64 then round to float32; all-zero stays zero."""
    acc = np.asarray(raw, dtype=np.float64)
    norm = float(np.sqrt(np.sum(acc * acc)))
    if norm > 0.0:
        acc = acc / norm
    return EmbeddingVector(values=acc.astype(np.float32))


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_embed(text: str, dimension: int) -> EmbeddingVector:
    """Deterministic signed token-hash embedding.

    Lowercase, take maximal ``[a-z0-9]`` runs as tokens, FNV-1a-64 each
    token's UTF-8 bytes, add +/-1 (sign from the hash's top bit) into bucket
    ``h mod dimension``, then L2-normalize. Bit-for-bit reproducible across
    runs and platforms.
    """
    if dimension < 2:
        raise ValueError("dimension must be at least 2")
    acc = np.zeros(dimension, dtype=np.float64)
    for token in _TOKEN_RE.findall(text.lower()):
        h = fnv1a64(token.encode("utf-8"))
        sign = 1.0 if (h >> 63) == 0 else -1.0
        acc[h % dimension] += sign
    return l2_normalized(acc)


class HashEmbedder:
    """Offline stand-in for an embedding model; a pure function of the text."""

    def __init__(self, dimension: int) -> None:
        self.dimension = dimension
        self.embedder_id = "fnv1a64-sign-v1"

    def embed(self, text: str) -> EmbeddingVector:
        if not isinstance(text, str):
            raise ValueError("text must be a string")
        return hash_embed(text, self.dimension)


# ---------------------------------------------------------------------------
# Completion backends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompletionResult:
    text: str
    backend_id: str
    token_usage: dict | None = None


class NullBackend:
    """Placeholder for embedding-only configurations; any completion fails."""

    backend_id = "null"

    def complete(self, role: str, prompt: str, key: str) -> CompletionResult:
        raise BackendUnavailable("no completion backend configured (hash-only mode)")


class ScriptedBackend:
    """Test double replaying responses for ``(role, key)`` in order."""

    backend_id = "scripted"

    def __init__(self, script: dict[tuple[str, str], list[str]]) -> None:
        self._script = {k: list(v) for k, v in script.items()}
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        """Load ``{"role": {"key": ["response", ...]}}`` JSON."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        script: dict[tuple[str, str], list[str]] = {}
        for role, by_key in data.items():
            for key, responses in by_key.items():
                if isinstance(responses, str):
                    responses = [responses]
                script[(role, key)] = list(responses)
        return cls(script)

    def complete(self, role: str, prompt: str, key: str) -> CompletionResult:
        with self._lock:
            self.calls.append((role, key))
            queue = self._script.get((role, key))
            if queue is None:
                raise UnscriptedRequest(f"no script for role={role!r} key={key!r}")
            if not queue:
                raise ScriptExhausted(f"script exhausted for role={role!r} key={key!r}")
            text = queue.pop(0)
        if not text:
            raise EmptyCompletion(f"scripted empty completion for role={role!r} key={key!r}")
        return CompletionResult(text=text, backend_id=self.backend_id)


class LiveBackend:
    """OpenAI-style HTTPS backend; the API key comes from the environment only."""

    def __init__(
        self,
        base_url: str,
        completion_model: str,
        embedding_model: str | None = None,
        timeout: float = 120.0,
        temperature: float = 0.0,
    ) -> None:
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise BackendUnavailable(f"{API_KEY_ENV} is not set")
        self._key = key
        self.base_url = base_url.rstrip("/")
        self.completion_model = completion_model
        self.embedding_model = embedding_model
        self.timeout = timeout
        self.temperature = temperature
        self.backend_id = f"live:{completion_model}"

    def _post(self, path: str, payload: dict) -> dict:
        import requests

        try:
            resp = requests.post(
                f"{self.base_url}{path}",
                json=payload,
                headers={"Authorization": f"Bearer {self._key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(str(exc), transient=True) from exc
        if resp.status_code == 429:
            raise RateLimited(resp.text[:200])
        if resp.status_code >= 500:
            raise BackendUnavailable(f"server error {resp.status_code}", transient=True)
        if resp.status_code >= 400:
            raise BackendUnavailable(f"request rejected ({resp.status_code}): {resp.text[:200]}")
        return resp.json()

    def complete(self, role: str, prompt: str, key: str) -> CompletionResult:
        body = self._post(
            "/chat/completions",
            {
                "model": self.completion_model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.temperature,
            },
        )
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed completion response: {body!r:.200}") from exc
        if not text:
            raise EmptyCompletion(f"empty completion for role={role!r}")
        return CompletionResult(text=text, backend_id=self.backend_id, token_usage=body.get("usage"))

    def embed(self, text: str) -> EmbeddingVector:
        if not self.embedding_model:
            raise BackendUnavailable("no embedding model configured")
        body = self._post("/embeddings", {"model": self.embedding_model, "input": text})
        try:
            values = body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed embedding response: {body!r:.200}") from exc
        return l2_normalized(np.asarray(values, dtype=np.float64))


class LiveEmbedder:
    def __init__(self, backend: LiveBackend) -> None:
        self._backend = backend
        self.embedder_id = f"live:{backend.embedding_model}"
        probe = backend.embed("dimension probe")
        self.dimension = probe.dimension

    def embed(self, text: str) -> EmbeddingVector:
        return self._backend.embed(text)


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

@dataclass
class RetryPolicy:
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0


class Gateway:
    """Uniform completion/embedding access with retries and an in-flight bound."""

    def __init__(
        self,
        backend,
        embedder,
        retry: RetryPolicy | None = None,
        max_in_flight: int = 4,
        requests_per_minute: int | None = None,
        sleeper=time.sleep,
    ) -> None:
        self.backend = backend
        self.embedder = embedder
        self.retry = retry or RetryPolicy()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleeper = sleeper
        self._rpm = requests_per_minute
        self._stamps: list[float] = []
        self._stamp_lock = threading.Lock()

    def _respect_budget(self) -> None:
        if self._rpm is None:
            return
        while True:
            with self._stamp_lock:
                now = time.monotonic()
                self._stamps = [t for t in self._stamps if now - t < 60.0]
                if len(self._stamps) < self._rpm:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleeper(max(wait, 0.01))

    def complete(self, template: PromptTemplate, bindings: dict[str, str], key: str) -> CompletionResult:
        """Render then call the backend, retrying transient transport failures."""
        prompt = template.render(bindings)  # surfaces unbound placeholders pre-network
        delay = self.retry.backoff_base
        attempts_left = self.retry.max_retries
        while True:
            self._respect_budget()
            with self._slots:
                try:
                    return self.backend.complete(template.role, prompt, key)
                except BackendUnavailable as exc:
                    if not exc.transient or attempts_left <= 0:
                        raise
                except RateLimited:
                    if attempts_left <= 0:
                        raise
            attempts_left -= 1
            self._sleeper(delay)
            delay *= self.retry.backoff_factor

    def embed(self, text: str) -> EmbeddingVector:
        if not isinstance(text, str):
            raise ValueError("text must be a string")
        return self.embedder.embed(text)
