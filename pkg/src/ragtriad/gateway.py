"""Role-conditioned access to a shared language model.

One gateway serves all four agent roles over a chat-completion wire
protocol or a deterministic scripted mock, with bounded retries, an
optional content-addressed completion cache, per-question budget ceilings,
and token accounting. The rendered role prompt travels as the user message
of a single-turn chat request; transport never alters the prompt bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Mapping, Optional, Sequence

import requests
from pydantic import BaseModel, ConfigDict, Field

from . import prompts
from .domain import CostCounters, RunConfig

logger = logging.getLogger(__name__)

Role = Literal["interpreter", "explorer", "adjudicator", "answerer"]

ROLES: tuple[str, ...] = ("interpreter", "explorer", "adjudicator", "answerer")


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransientBackendError(GatewayError):
    """Retryable backend failure (timeouts, 429/5xx, connection drops)."""


class AuthError(GatewayError):
    """Authentication or authorization rejected by the backend."""


class BudgetExceeded(GatewayError):
    """Per-question call or token ceiling reached."""


class UnboundPlaceholder(GatewayError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unbound placeholder {{{name}}}")


class JSONExtractionError(GatewayError):
    """No parseable JSON object found in the model output."""


class MockScriptError(GatewayError):
    """Malformed or exhausted mock script."""


class RolePrompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Role
    template: str

    def placeholders(self) -> frozenset[str]:
        return frozenset(PLACEHOLDER_RE.findall(self.template))


class Completion(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    tokens_in: int = Field(ge=0)
    tokens_out: int = Field(ge=0)
    latency_ms: int = Field(ge=0)


# Placeholder tokens are lowercase identifiers in single braces; the JSON
# skeletons in the templates never match this shape.
PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")


def render(prompt: RolePrompt, bindings: Mapping[str, str]) -> str:
    """Substitute every placeholder byte-exactly; no other transformation."""
    names = prompt.placeholders()
    for name in sorted(names):
        if name not in bindings:
            raise UnboundPlaceholder(name)

    def _sub(match: re.Match[str]) -> str:
        return str(bindings[match.group(1)])

    return PLACEHOLDER_RE.sub(_sub, prompt.template)


def role_prompt(role: str, task_kind: str = "mcq4") -> RolePrompt:
    """The canonical template for a role (answerer varies by task kind)."""
    templates = {
        "interpreter": prompts.INTERPRETER_TEMPLATE,
        "explorer": prompts.EXPLORER_TEMPLATE,
        "adjudicator": prompts.ADJUDICATOR_TEMPLATE,
        "answerer": prompts.answerer_template_for(task_kind),
    }
    return RolePrompt(role=role, template=templates[role])


def extract_json_object(text: str, strict: bool = False) -> dict:
    """Pull the first balanced top-level JSON object out of model text.

    Models often wrap JSON in prose or code fences; strict mode requires
    the whole text to be the object.
    """
    if strict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise JSONExtractionError(f"strict JSON parse failed: {exc}") from exc
        if not isinstance(obj, dict):
            raise JSONExtractionError("top-level JSON value is not an object")
        return obj

    start = text.find("{")
    while start != -1:
        end = _balanced_end(text, start)
        if end is not None:
            try:
                obj = json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                pass
            else:
                if isinstance(obj, dict):
                    return obj
        start = text.find("{", start + 1)
    raise JSONExtractionError("no balanced JSON object in model output")


def _balanced_end(text: str, start: int) -> Optional[int]:
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def mock_token_count(text: str) -> int:
    """Deterministic stand-in for provider token counts."""
    return math.ceil(len(text) / 4)


@dataclass
class CostMeter:
    """Mutable per-question accounting; one instance per question."""

    llm_calls: int = 0
    retrieval_ops: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    attempts: int = 0
    cache_hits: int = 0
    flags: list[str] = field(default_factory=list)

    def add_flag(self, flag: str) -> None:
        if flag not in self.flags:
            self.flags.append(flag)

    @property
    def total_tokens(self) -> int:
        return self.tokens_in + self.tokens_out

    def counters(self, wall_ms: int = 0) -> CostCounters:
        return CostCounters(
            llm_calls=self.llm_calls,
            retrieval_ops=self.retrieval_ops,
            tokens_in=self.tokens_in,
            tokens_out=self.tokens_out,
            wall_ms=wall_ms,
        )


def counters_delta(before: CostCounters, after: CostCounters, wall_ms: int = 0) -> CostCounters:
    return CostCounters(
        llm_calls=after.llm_calls - before.llm_calls,
        retrieval_ops=after.retrieval_ops - before.retrieval_ops,
        tokens_in=after.tokens_in - before.tokens_in,
        tokens_out=after.tokens_out - before.tokens_out,
        wall_ms=wall_ms,
    )


class MockScriptBackend:
    """Scripted backend: responses consumed in order per role.

    Script lines are JSONL objects {"role", "turn", "response"}; turns must
    be sequential per role. Exhaustion either errors or repeats the final
    response, which keeps never-sufficient and batch scripts short.
    """

    def __init__(
        self,
        lines: Sequence[Mapping[str, object]],
        on_exhausted: Literal["error", "repeat_last"] = "error",
        backend_id: Optional[str] = None,
    ) -> None:
        self._queues: dict[str, deque[str]] = {role: deque() for role in ROLES}
        self._last: dict[str, str] = {}
        self._lock = threading.Lock()
        self.on_exhausted = on_exhausted
        expected_turn = {role: 0 for role in ROLES}
        for i, line in enumerate(lines):
            role = line.get("role")
            if role not in ROLES:
                raise MockScriptError(f"script line {i}: unknown role {role!r}")
            turn = line.get("turn")
            if turn != expected_turn[role]:
                raise MockScriptError(
                    f"script line {i}: expected turn {expected_turn[role]} for {role}, got {turn!r}"
                )
            response = line.get("response")
            if not isinstance(response, str):
                raise MockScriptError(f"script line {i}: response must be a string")
            expected_turn[role] += 1
            self._queues[role].append(response)
        digest = hashlib.sha256(
            json.dumps([dict(line) for line in lines], sort_keys=True).encode("utf-8")
        ).hexdigest()[:8]
        self.backend_id = backend_id or f"mock:{digest}"

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        on_exhausted: Literal["error", "repeat_last"] = "error",
    ) -> "MockScriptBackend":
        lines = []
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                raw = raw.strip()
                if raw:
                    lines.append(json.loads(raw))
        return cls(lines, on_exhausted=on_exhausted)

    @classmethod
    def from_responses(
        cls,
        responses: Mapping[str, Sequence[str]],
        on_exhausted: Literal["error", "repeat_last"] = "error",
    ) -> "MockScriptBackend":
        lines = [
            {"role": role, "turn": turn, "response": response}
            for role, seq in responses.items()
            for turn, response in enumerate(seq)
        ]
        return cls(lines, on_exhausted=on_exhausted)

    def send(self, role: str, prompt: str, temperature: float) -> Completion:
        with self._lock:
            queue = self._queues[role]
            if queue:
                text = queue.popleft()
                self._last[role] = text
            elif self.on_exhausted == "repeat_last" and role in self._last:
                text = self._last[role]
            else:
                raise MockScriptError(f"mock script exhausted for role {role!r}")
        return Completion(
            text=text,
            tokens_in=mock_token_count(prompt),
            tokens_out=mock_token_count(text),
            latency_ms=0,
        )


class HTTPChatBackend:
    """Chat-completion HTTP backend: one system-free user message per call.

    The auth token is read from the environment variable named in the
    config and never appears in configuration files or flags.
    """

    def __init__(self, config: RunConfig, session: Optional[requests.Session] = None) -> None:
        self._config = config
        self._session = session or requests.Session()
        self.backend_id = f"http:{config.base_url}{config.chat_path}#{config.model}"

    def send(self, role: str, prompt: str, temperature: float) -> Completion:
        cfg = self._config
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(cfg.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        started = time.perf_counter()
        try:
            resp = self._session.post(
                cfg.base_url.rstrip("/") + cfg.chat_path,
                json=payload,
                headers=headers,
                timeout=cfg.request_timeout_s,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientBackendError(str(exc)) from exc
        latency_ms = int((time.perf_counter() - started) * 1000)

        if resp.status_code in (401, 403):
            raise AuthError(f"backend rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code != 200:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")

        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientBackendError(f"malformed completion payload: {exc}") from exc
        usage = body.get("usage") or {}
        tokens_in = int(usage.get("prompt_tokens", mock_token_count(prompt)))
        tokens_out = int(usage.get("completion_tokens", mock_token_count(text)))
        return Completion(
            text=text, tokens_in=tokens_in, tokens_out=tokens_out, latency_ms=latency_ms
        )


class CompletionCache:
    """Content-addressed completion store: one JSON file per cache key.

    Readers run concurrently; writes go through an atomic rename so a
    half-written entry is never visible. Corrupt entries fall through to a
    live call with a warning.
    """

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(backend_id: str, role: str, rendered_prompt: str, temperature: float) -> str:
        h = hashlib.sha256()
        for part in (backend_id, role, repr(temperature), rendered_prompt):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Optional[Completion]:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return Completion.model_validate_json(path.read_text(encoding="utf-8"))
        except Exception:
            logger.warning("corrupt cache entry %s; falling through to live call", path)
            return None

    def put(self, key: str, completion: Completion) -> None:
        # unique temp file per writer: concurrent puts of one key must not
        # share a rename source
        path = self._path(key)
        fd, tmp_name = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(completion.model_dump_json())
            os.replace(tmp_name, path)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except FileNotFoundError:
                pass
            raise


class LLMGateway:
    """Thread-safe completion front door shared by all roles.

    llm_calls counts exactly the non-cached backend completions; retry
    attempts are logged separately and never double-count a call.
    """

    def __init__(
        self,
        backend,
        config: RunConfig,
        cache: Optional[CompletionCache] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backend = backend
        self.config = config
        self.cache = cache
        if cache is None and config.cache_enabled:
            self.cache = CompletionCache(config.cache_dir)
        self._sleep = sleep
        self._inflight = threading.Semaphore(config.max_inflight)

    def complete(
        self, role: str, rendered_prompt: str, temperature: float, meter: CostMeter
    ) -> Completion:
        cfg = self.config
        if meter.llm_calls >= cfg.max_calls_per_question:
            raise BudgetExceeded(
                f"call ceiling {cfg.max_calls_per_question} reached for this question"
            )
        if meter.total_tokens >= cfg.max_tokens_per_question:
            raise BudgetExceeded(
                f"token ceiling {cfg.max_tokens_per_question} reached for this question"
            )

        key = None
        if self.cache is not None and cfg.cache_enabled:
            key = CompletionCache.key(self.backend.backend_id, role, rendered_prompt, temperature)
            hit = self.cache.get(key)
            if hit is not None:
                meter.cache_hits += 1
                return hit

        completion = self._send_with_retries(role, rendered_prompt, temperature, meter)
        meter.llm_calls += 1
        meter.tokens_in += completion.tokens_in
        meter.tokens_out += completion.tokens_out
        if key is not None:
            self.cache.put(key, completion)
        return completion

    def _send_with_retries(
        self, role: str, prompt: str, temperature: float, meter: CostMeter
    ) -> Completion:
        cfg = self.config
        last_error: Optional[Exception] = None
        for attempt in range(cfg.max_retries + 1):
            meter.attempts += 1
            try:
                with self._inflight:
                    return self.backend.send(role, prompt, temperature)
            except TransientBackendError as exc:
                last_error = exc
                if attempt < cfg.max_retries:
                    delay = min(cfg.retry_base_delay_s * (2**attempt), 10.0)
                    logger.warning(
                        "transient backend error (attempt %d/%d): %s",
                        attempt + 1,
                        cfg.max_retries + 1,
                        exc,
                    )
                    self._sleep(delay)
        raise TransientBackendError(
            f"backend failed after {cfg.max_retries + 1} attempts: {last_error}"
        )


def build_backend(config: RunConfig):
    if config.backend == "mock":
        if not config.mock_script:
            raise GatewayError("mock backend requires mock_script")
        return MockScriptBackend.from_file(
            config.mock_script, on_exhausted=config.on_script_exhausted
        )
    return HTTPChatBackend(config)


def build_gateway(config: RunConfig, backend=None, sleep: Callable[[float], None] = time.sleep) -> LLMGateway:
    return LLMGateway(backend or build_backend(config), config, sleep=sleep)
