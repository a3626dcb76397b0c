"""Text-generation backends and the prompt-template store.

Two backends ship: a live HTTP client speaking a chat-completions-style API,
and a replay backend that returns prerecorded completions keyed by rendered
prompt, which makes every pipeline run deterministic. Template bodies are
data files pinned by golden hashes.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Protocol

from .errors import (
    BackendTimeout,
    ExtraSlot,
    MalformedResponse,
    MissingSlot,
    RateLimited,
    ReplayMiss,
    UnknownTemplate,
)
from .records import append_record, read_records

TEMPLATE_IDS = (
    "planning_gen",
    "action_gen",
    "toolset_construct",
    "rectify",
    "cross_retrieval_solution",
    "eval_with_tools",
    "eval_without_tools",
    "negative_functions",
)

# Rendered into the action instruction's function slot when a sample carries
# no retrieved functions.
EMPTY_TOOLSET_TEXT = "(no functions are available for this question)"

_SLOT_RE = re.compile(r"\{\{([a-z_]+)\}\}")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    temperature: float = 0.0
    top_p: float = 0.95
    n: int = 1
    max_tokens: int = 2048
    stop: tuple[str, ...] | None = None
    template_id: str | None = None  # replay-key metadata, not sent to services

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.temperature == 0 and self.n != 1:
            raise ValueError("greedy decoding (temperature=0) has one outcome; n must be 1")


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: str = "stop"


class GenerationBackend(Protocol):
    name: str

    def generate(self, request: GenerationRequest) -> list[Completion]: ...


# --- template store ----------------------------------------------------------

def _template_dir():
    return resources.files("toolflow") / "templates"


class TemplateStore:
    """Prompt templates with named {{slot}} placeholders, loaded from data files."""

    def __init__(self, bodies: dict[str, str] | None = None):
        if bodies is None:
            bodies = {
                tid: (_template_dir() / f"{tid}.txt").read_text(encoding="utf-8")
                for tid in TEMPLATE_IDS
            }
        self._bodies = dict(bodies)

    def body(self, template_id: str) -> str:
        try:
            return self._bodies[template_id]
        except KeyError:
            raise UnknownTemplate(f"no template named {template_id!r}") from None

    def slots(self, template_id: str) -> set[str]:
        return set(_SLOT_RE.findall(self.body(template_id)))

    def render(self, template_id: str, slots: dict[str, str]) -> str:
        """Fill every slot with its value, verbatim and in a single pass."""
        body = self.body(template_id)
        required = self.slots(template_id)
        missing = required - set(slots)
        if missing:
            raise MissingSlot(f"{template_id}: missing slot {sorted(missing)[0]!r}")
        extras = set(slots) - required
        if extras:
            raise ExtraSlot(f"{template_id}: unexpected slot {sorted(extras)[0]!r}")
        return _SLOT_RE.sub(lambda m: slots[m.group(1)], body)

    def checksums(self) -> dict[str, str]:
        return {
            tid: hashlib.sha256(self._bodies[tid].encode("utf-8")).hexdigest()
            for tid in sorted(self._bodies)
        }

    def store_hash(self) -> str:
        """One hash over every template body; printed by the CLI version string."""
        digest = hashlib.sha256()
        for tid, checksum in sorted(self.checksums().items()):
            digest.update(f"{tid}:{checksum}\n".encode("utf-8"))
        return digest.hexdigest()[:16]


_default_store: TemplateStore | None = None


def default_templates() -> TemplateStore:
    global _default_store
    if _default_store is None:
        _default_store = TemplateStore()
    return _default_store


def render_prompt(template_id: str, slots: dict[str, str]) -> str:
    return default_templates().render(template_id, slots)


# --- replay backend ----------------------------------------------------------

def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def replay_key(template_id: str | None, prompt: str, index: int) -> str:
    return f"{template_id or ''}:{prompt_hash(prompt)}:{index}"


class ReplayBackend:
    """Returns prerecorded completions; any miss is an error, never a guess."""

    name = "replay"

    def __init__(self, records: Iterable[dict[str, Any]] = ()):
        self._store: dict[str, Completion] = {}
        for rec in records:
            self.add_record(rec)

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        return cls(read_records(path))

    def add_record(self, rec: dict[str, Any]) -> None:
        key = f"{rec.get('template_id') or ''}:{rec['prompt_hash']}:{rec['index']}"
        self._store[key] = Completion(
            text=rec["completion"], finish_reason=rec.get("finish_reason", "stop")
        )

    def add(
        self,
        prompt: str,
        completion: str,
        index: int = 0,
        template_id: str | None = None,
        finish_reason: str = "stop",
    ) -> None:
        key = replay_key(template_id, prompt, index)
        self._store[key] = Completion(text=completion, finish_reason=finish_reason)

    def __len__(self) -> int:
        return len(self._store)

    def generate(self, request: GenerationRequest) -> list[Completion]:
        out: list[Completion] = []
        for i in range(request.n):
            key = replay_key(request.template_id, request.prompt, i)
            hit = self._store.get(key)
            if hit is None:
                raise ReplayMiss(
                    f"no recorded completion for template={request.template_id!r} "
                    f"prompt_hash={prompt_hash(request.prompt)[:12]} index={i}"
                )
            out.append(hit)
        return out


def record_to_store(
    path: str | Path,
    prompt: str,
    completion: str,
    index: int = 0,
    template_id: str | None = None,
    finish_reason: str = "stop",
) -> None:
    """Append one replay record to a store file."""
    append_record(
        path,
        {
            "template_id": template_id,
            "prompt_hash": prompt_hash(prompt),
            "index": index,
            "completion": completion,
            "finish_reason": finish_reason,
        },
    )


# --- live backend ------------------------------------------------------------

ENV_BASE_URL = "TOOLFLOW_API_BASE"
ENV_API_KEY = "TOOLFLOW_API_KEY"
ENV_MODEL = "TOOLFLOW_MODEL"


@dataclass
class BackoffPolicy:
    max_attempts: int = 4
    initial_wait: float = 1.0
    max_total_wait: float = 30.0


class RequestBudget:
    """Sliding-window requests-per-minute throttle shared across threads."""

    def __init__(self, per_minute: int, clock=time.monotonic, sleep=time.sleep):
        if per_minute < 1:
            raise ValueError("per_minute must be positive")
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._stamps: list[float] = []
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._stamps = [t for t in self._stamps if now - t < 60.0]
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleep(max(wait, 0.01))


class LiveBackend:
    """Chat-completions-style HTTP client with bounded backoff and an in-flight cap."""

    name = "live"

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        backoff: BackoffPolicy | None = None,
        inflight_cap: int = 8,
        requests_per_minute: int | None = None,
        session=None,
    ):
        self.base_url = (base_url or os.environ.get(ENV_BASE_URL, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "")
        if not self.base_url:
            raise ValueError(f"no generation service base URL (set {ENV_BASE_URL})")
        self.timeout = timeout
        self.backoff = backoff or BackoffPolicy()
        self._semaphore = threading.BoundedSemaphore(inflight_cap)
        self._budget = RequestBudget(requests_per_minute) if requests_per_minute else None
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._session.post(
                f"{self.base_url}/chat/completions",
                data=json.dumps(payload),
                headers=headers,
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise BackendTimeout(f"generation request timed out after {self.timeout}s") from exc
        if response.status_code == 429:
            retry_after = response.headers.get("Retry-After")
            raise RateLimited(
                "generation service rate limit",
                retry_after=float(retry_after) if retry_after else None,
            )
        if response.status_code >= 400:
            raise MalformedResponse(
                f"generation service returned {response.status_code}: {response.text[:200]}"
            )
        try:
            return response.json()
        except ValueError as exc:
            raise MalformedResponse(f"non-JSON response: {response.text[:200]}") from exc

    def generate(self, request: GenerationRequest) -> list[Completion]:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "n": request.n,
            "max_tokens": request.max_tokens,
        }
        if request.stop:
            payload["stop"] = list(request.stop)
        wait = self.backoff.initial_wait
        waited = 0.0
        attempts = 0
        with self._semaphore:
            while True:
                attempts += 1
                if self._budget is not None:
                    self._budget.acquire()
                try:
                    data = self._post(payload)
                    break
                except RateLimited as exc:
                    if attempts >= self.backoff.max_attempts:
                        raise
                    pause = exc.retry_after if exc.retry_after is not None else wait
                    if waited + pause > self.backoff.max_total_wait:
                        raise
                    time.sleep(pause)
                    waited += pause
                    wait *= 2
        choices = data.get("choices")
        if not isinstance(choices, list) or len(choices) != request.n:
            raise MalformedResponse(
                f"expected {request.n} choices, got {choices if choices is None else len(choices)}"
            )
        out: list[Completion] = []
        for choice in choices:
            message = choice.get("message", {})
            text = message.get("content")
            if text is None:
                raise MalformedResponse("choice missing message content")
            out.append(Completion(text=text, finish_reason=choice.get("finish_reason", "stop")))
        return out


class RecordingBackend:
    """Wraps a backend and captures its completions into a replay store file."""

    def __init__(self, inner: GenerationBackend, store_path: str | Path):
        self.inner = inner
        self.store_path = Path(store_path)
        self.name = f"recording({inner.name})"

    def generate(self, request: GenerationRequest) -> list[Completion]:
        completions = self.inner.generate(request)
        for i, comp in enumerate(completions):
            record_to_store(
                self.store_path,
                prompt=request.prompt,
                completion=comp.text,
                index=i,
                template_id=request.template_id,
                finish_reason=comp.finish_reason,
            )
        return completions


def generate(backend: GenerationBackend, request: GenerationRequest) -> list[Completion]:
    """Run one generation request; always returns exactly request.n completions."""
    completions = backend.generate(request)
    if len(completions) != request.n:
        raise MalformedResponse(
            f"backend returned {len(completions)} completions for n={request.n}"
        )
    return completions
