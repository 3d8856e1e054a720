"""Uniform chat-completion interface over pluggable backends.

Backends: a deterministic scripted mock for tests and fixtures, a
record/replay pair for capturing live sessions, and a generic JSON-over-HTTP
backend for live providers. Every completed request is appended to a usage
log with token counts, latency and estimated cost, which feeds the summary
and routing machinery.

The mock backend estimates tokens as ceil(utf8_bytes / 4); live tokenizers
are provider-specific, and a fixed proxy keeps fixtures deterministic.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .errors import (
    BackendUnavailable,
    JsonError,
    MisconfiguredPolicy,
    RequestTimeout,
    SchemaViolation,
    UnknownModelError,
)

DEFAULT_TIMEOUT_S = 60.0
DEFAULT_MAX_CONCURRENCY = 8


class RoleHint(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"
    EXTRACTOR = "extractor"


_DEFAULT_TEMPERATURE = {
    RoleHint.TEACHER: 0.2,
    RoleHint.STUDENT: 1.0,
    RoleHint.EXTRACTOR: 0.0,
}


@dataclass(frozen=True)
class ModelSpec:
    provider: str
    model_name: str
    role_hint: RoleHint = RoleHint.STUDENT
    temperature: float | None = None
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.temperature is None:
            object.__setattr__(self, "temperature", _DEFAULT_TEMPERATURE[self.role_hint])
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def key(self) -> tuple[str, str]:
        return (self.provider, self.model_name)


@dataclass(frozen=True)
class ChatRequest:
    system_instruction: str
    user_content: str
    response_schema_id: str | None = None

    def __post_init__(self) -> None:
        if not self.system_instruction or not self.user_content:
            raise ValueError("system_instruction and user_content must be non-empty")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatResponse:
    raw_text: str
    parsed_json: Any | None
    usage: Usage
    latency_ms: int


@dataclass(frozen=True)
class Rate:
    """Either a flat cents-per-1k rate or split input/output rates."""

    cents_per_1k: float | None = None
    input_cents_per_1k: float | None = None
    output_cents_per_1k: float | None = None

    def __post_init__(self) -> None:
        values = [v for v in (self.cents_per_1k, self.input_cents_per_1k,
                              self.output_cents_per_1k) if v is not None]
        if not values:
            raise ValueError("rate needs a flat or split price")
        if any(v < 0 for v in values):
            raise ValueError("rates must be non-negative")
        if self.cents_per_1k is None and (
                self.input_cents_per_1k is None or self.output_cents_per_1k is None):
            raise ValueError("split rates need both input and output prices")


class PricingTable:
    """(provider, model_name) -> Rate mapping, loadable from a JSON file."""

    def __init__(self, rates: Mapping[tuple[str, str], Rate] | None = None):
        self._rates = dict(rates or {})

    def get(self, spec: ModelSpec) -> Rate | None:
        return self._rates.get(spec.key())

    def set(self, provider: str, model_name: str, rate: Rate) -> None:
        self._rates[(provider, model_name)] = rate

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PricingTable":
        rates = {}
        for entry in data.get("models", []):
            rates[(entry["provider"], entry["model_name"])] = Rate(
                cents_per_1k=entry.get("cents_per_1k"),
                input_cents_per_1k=entry.get("input_cents_per_1k"),
                output_cents_per_1k=entry.get("output_cents_per_1k"),
            )
        return cls(rates)

    @classmethod
    def from_file(cls, path: str | Path) -> "PricingTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class UsageRecord:
    request_id: str
    provider: str
    model_name: str
    usage: Usage
    cost_cents: float
    latency_ms: int
    timestamp: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "provider": self.provider,
            "model_name": self.model_name,
            "prompt_tokens": self.usage.prompt_tokens,
            "completion_tokens": self.usage.completion_tokens,
            "total_tokens": self.usage.total_tokens,
            "cost_cents": self.cost_cents,
            "latency_ms": self.latency_ms,
            "timestamp": self.timestamp,
        }


class UsageLog:
    """Append-only usage sink with optional JSON-lines persistence."""

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._records: list[UsageRecord] = []
        self._path = Path(path) if path else None
        if self._path:
            self._path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: UsageRecord) -> None:
        with self._lock:
            self._records.append(record)
            if self._path:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")

    def records(self) -> list[UsageRecord]:
        with self._lock:
            return list(self._records)

    @staticmethod
    def read_file(path: str | Path) -> list[UsageRecord]:
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(UsageRecord(
                request_id=row["request_id"],
                provider=row["provider"],
                model_name=row["model_name"],
                usage=Usage(row["prompt_tokens"], row["completion_tokens"]),
                cost_cents=row["cost_cents"],
                latency_ms=row["latency_ms"],
                timestamp=row["timestamp"],
            ))
        return records


# --------------------------------------------------------------------------
# JSON extraction from model output
# --------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\n?|```")
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")


def _first_balanced_object(text: str) -> str | None:
    """Return the first balanced top-level {...} region, honoring strings."""
    start = text.find("{")
    if start < 0:
        return None
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
                return text[start:i + 1]
    return None


def extract_json(raw_text: str) -> Any:
    """Parse the first balanced top-level JSON object out of model output.

    Strips surrounding prose and code-fence markers; applies exactly one
    repair pass (trailing-comma removal) before giving up with JsonError.
    Idempotent on its own serialized output.
    """
    try:
        return json.loads(raw_text)
    except (json.JSONDecodeError, TypeError):
        pass
    stripped = _FENCE_RE.sub("", raw_text or "")
    candidate = _first_balanced_object(stripped)
    if candidate is not None:
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            # single repair pass: drop trailing commas
            repaired = _TRAILING_COMMA_RE.sub(r"\1", candidate)
            try:
                return json.loads(repaired)
            except json.JSONDecodeError as exc:
                raise JsonError(f"unparseable model output: {exc}") from exc
    raise JsonError("no JSON object found in model output")


# --------------------------------------------------------------------------
# Response contracts
# --------------------------------------------------------------------------

ISSUES_REPORT_SCHEMA = "issues-report"
RULE_DOCUMENT_SCHEMA = "rule-document"
VERIFICATION_VERDICTS_SCHEMA = "verification-verdicts"


def _check_issue_items(value: Any, required: tuple[str, ...]) -> None:
    if not isinstance(value, dict) or "issues" not in value:
        raise SchemaViolation("response must be an object with an 'issues' key")
    items = value["issues"]
    if not isinstance(items, list):
        raise SchemaViolation("'issues' must be an array")
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise SchemaViolation(f"issues[{i}] must be an object")
        for key in required:
            if key not in item:
                raise SchemaViolation(f"issues[{i}] missing required key '{key}'")
        if "isValid" in required and not isinstance(item["isValid"], bool):
            raise SchemaViolation(f"issues[{i}].isValid must be a boolean")


def validate_response_schema(schema_id: str, value: Any) -> None:
    """Structural check of a parsed model response against a named contract."""
    if schema_id == ISSUES_REPORT_SCHEMA:
        _check_issue_items(value, ("issue", "context", "recommendation"))
    elif schema_id == VERIFICATION_VERDICTS_SCHEMA:
        _check_issue_items(value, ("issue", "context", "recommendation", "isValid"))
    elif schema_id == RULE_DOCUMENT_SCHEMA:
        from . import rulebase

        if not isinstance(value, dict):
            raise SchemaViolation("rule document must be a JSON object")
        try:
            rulebase.parse_rule_document(json.dumps(value))
        except (rulebase.SchemaError, rulebase.JsonError) as exc:
            raise SchemaViolation(str(exc)) from exc
    else:
        raise SchemaViolation(f"unknown response schema id {schema_id!r}")


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------

def fingerprint(system_instruction: str, user_content: str) -> str:
    """Stable request fingerprint: sha256 over system + user text."""
    digest = hashlib.sha256()
    digest.update(system_instruction.encode("utf-8"))
    digest.update(b"\x1e")
    digest.update(user_content.encode("utf-8"))
    return digest.hexdigest()


def proxy_token_count(text: str) -> int:
    """Deterministic token proxy: ceil(utf8 bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass(frozen=True)
class BackendResult:
    raw_text: str
    usage: Usage | None = None
    latency_ms: int | None = None


class Backend:
    """Interface for chat-completion providers."""

    def generate(self, spec: ModelSpec, req: ChatRequest) -> BackendResult:
        raise NotImplementedError


class MockBackend(Backend):
    """Deterministic scripted backend.

    Responses are keyed by (request fingerprint, model_name); an entry with
    model_name None answers any model. Identical (spec, req) pairs always
    produce identical responses, including token usage.
    """

    def __init__(self) -> None:
        self._script: dict[tuple[str, str | None], dict[str, Any]] = {}

    def script(self, system_instruction: str, user_content: str, text: str,
               model_name: str | None = None, latency_ms: int = 0) -> "MockBackend":
        key = (fingerprint(system_instruction, user_content), model_name)
        self._script[key] = {"text": text, "latency_ms": latency_ms}
        return self

    def script_fingerprint(self, fp: str, text: str, model_name: str | None = None,
                           latency_ms: int = 0) -> "MockBackend":
        self._script[(fp, model_name)] = {"text": text, "latency_ms": latency_ms}
        return self

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        backend = cls()
        for entry in data.get("responses", []):
            if "fingerprint" in entry:
                fp = entry["fingerprint"]
            else:
                fp = fingerprint(entry["system"], entry["user"])
            backend.script_fingerprint(
                fp, entry["text"], entry.get("model"), entry.get("latency_ms", 0))
        return backend

    def generate(self, spec: ModelSpec, req: ChatRequest) -> BackendResult:
        fp = fingerprint(req.system_instruction, req.user_content)
        entry = self._script.get((fp, spec.model_name)) or self._script.get((fp, None))
        if entry is None:
            raise BackendUnavailable(
                f"mock has no scripted response for model {spec.model_name!r} "
                f"and fingerprint {fp[:12]}...")
        prompt_tokens = proxy_token_count(req.system_instruction) + \
            proxy_token_count(req.user_content)
        completion_tokens = proxy_token_count(entry["text"])
        return BackendResult(
            raw_text=entry["text"],
            usage=Usage(prompt_tokens, completion_tokens),
            latency_ms=entry["latency_ms"],
        )


class RecordingBackend(Backend):
    """Wraps another backend and appends every exchange to a JSON-lines file."""

    def __init__(self, inner: Backend, path: str | Path):
        self._inner = inner
        self._path = Path(path)
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def generate(self, spec: ModelSpec, req: ChatRequest) -> BackendResult:
        result = self._inner.generate(spec, req)
        row = {
            "fingerprint": fingerprint(req.system_instruction, req.user_content),
            "model": spec.model_name,
            "text": result.raw_text,
            "prompt_tokens": result.usage.prompt_tokens if result.usage else None,
            "completion_tokens": result.usage.completion_tokens if result.usage else None,
            "latency_ms": result.latency_ms,
        }
        with self._lock, self._path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        return result


class ReplayBackend(Backend):
    """Replays a session captured by :class:`RecordingBackend`."""

    def __init__(self, rows: list[dict[str, Any]]):
        self._rows: dict[tuple[str, str], dict[str, Any]] = {}
        for row in rows:
            self._rows[(row["fingerprint"], row["model"])] = row

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        rows = [json.loads(line) for line in
                Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls(rows)

    def generate(self, spec: ModelSpec, req: ChatRequest) -> BackendResult:
        key = (fingerprint(req.system_instruction, req.user_content), spec.model_name)
        row = self._rows.get(key)
        if row is None:
            raise BackendUnavailable("no recorded exchange for this request")
        usage = None
        if row.get("prompt_tokens") is not None:
            usage = Usage(row["prompt_tokens"], row["completion_tokens"])
        return BackendResult(
            raw_text=row["text"],
            usage=usage,
            latency_ms=row.get("latency_ms"),
        )


class HttpBackend(Backend):
    """Generic JSON-over-HTTP provider.

    POSTs {model, system, user, temperature, max_output_tokens} to
    `<base_url>/v1/chat` and expects {"text": ..., "usage": {...}} back.
    The API key is read from the environment, never from config files.
    """

    def __init__(self, base_url: str, api_key_env: str = "QC_API_KEY",
                 timeout_s: float = DEFAULT_TIMEOUT_S):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    def generate(self, spec: ModelSpec, req: ChatRequest) -> BackendResult:
        import httpx

        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise BackendUnavailable(f"environment variable {self.api_key_env} not set")
        payload = {
            "model": spec.model_name,
            "system": req.system_instruction,
            "user": req.user_content,
            "temperature": spec.temperature,
            "max_output_tokens": spec.max_output_tokens,
        }
        try:
            response = httpx.post(
                f"{self.base_url}/v1/chat",
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout_s,
            )
        except httpx.TimeoutException as exc:
            raise RequestTimeout(f"request exceeded {self.timeout_s}s") from exc
        except httpx.HTTPError as exc:
            raise BackendUnavailable(str(exc)) from exc
        if response.status_code != 200:
            raise BackendUnavailable(
                f"backend returned HTTP {response.status_code}: {response.text[:200]}")
        body = response.json()
        usage = None
        if isinstance(body.get("usage"), dict):
            usage = Usage(
                int(body["usage"].get("prompt_tokens", 0)),
                int(body["usage"].get("completion_tokens", 0)),
            )
        return BackendResult(raw_text=body.get("text", ""), usage=usage)


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------

class ModelClient:
    """Dispatches chat requests to per-provider backends and logs usage."""

    def __init__(
        self,
        backends: Mapping[str, Backend],
        pricing: PricingTable | None = None,
        usage_log: UsageLog | None = None,
        max_concurrency: int = DEFAULT_MAX_CONCURRENCY,
    ):
        self._backends = dict(backends)
        self._pricing = pricing
        self.usage_log = usage_log if usage_log is not None else UsageLog()
        self._slots = threading.Semaphore(max_concurrency)

    def backend(self, provider: str) -> Backend | None:
        return self._backends.get(provider)

    def complete(self, spec: ModelSpec, req: ChatRequest,
                 request_id: str | None = None) -> ChatResponse:
        """Run one completion; parses and validates JSON output when the
        request names a response schema. Appends a UsageRecord either way."""
        backend = self._backends.get(spec.provider)
        if backend is None:
            raise BackendUnavailable(f"no backend configured for provider {spec.provider!r}")
        with self._slots:
            started = time.monotonic()
            result = backend.generate(spec, req)
            elapsed_ms = int((time.monotonic() - started) * 1000)
        latency_ms = result.latency_ms if result.latency_ms is not None else elapsed_ms
        usage = result.usage or Usage(
            proxy_token_count(req.system_instruction) + proxy_token_count(req.user_content),
            proxy_token_count(result.raw_text),
        )
        self._record(spec, usage, latency_ms, request_id)
        parsed: Any | None = None
        if req.response_schema_id is not None:
            try:
                parsed = extract_json(result.raw_text)
            except JsonError as exc:
                raise SchemaViolation(f"model output is not JSON: {exc}") from exc
            validate_response_schema(req.response_schema_id, parsed)
        return ChatResponse(
            raw_text=result.raw_text,
            parsed_json=parsed,
            usage=usage,
            latency_ms=latency_ms,
        )

    def _record(self, spec: ModelSpec, usage: Usage, latency_ms: int,
                request_id: str | None) -> None:
        cost = 0.0
        if self._pricing is not None and self._pricing.get(spec) is not None:
            cost = estimate_cost(usage, self._pricing, spec)
        self.usage_log.append(UsageRecord(
            request_id=request_id or uuid.uuid4().hex,
            provider=spec.provider,
            model_name=spec.model_name,
            usage=usage,
            cost_cents=cost,
            latency_ms=latency_ms,
            timestamp=_utcnow_iso(),
        ))


def _utcnow_iso() -> str:
    from datetime import datetime, timezone

    return datetime.now(timezone.utc).isoformat()


# --------------------------------------------------------------------------
# Cost accounting and routing
# --------------------------------------------------------------------------

def estimate_cost(usage: Usage, pricing: PricingTable, spec: ModelSpec) -> float:
    """Cost in cents, rounded to 4 decimal places."""
    rate = pricing.get(spec)
    if rate is None:
        raise UnknownModelError(f"no pricing for {spec.provider}/{spec.model_name}")
    if rate.cents_per_1k is not None:
        cost = usage.total_tokens / 1000.0 * rate.cents_per_1k
    else:
        cost = (usage.prompt_tokens / 1000.0 * rate.input_cents_per_1k
                + usage.completion_tokens / 1000.0 * rate.output_cents_per_1k)
    return round(cost, 4)


@dataclass(frozen=True)
class RoutingPolicy:
    teacher: ModelSpec | None
    student: ModelSpec | None


def route(policy: RoutingPolicy, risk: str, pass_kind: str) -> ModelSpec:
    """Tiered routing: low-risk detection goes to the lightweight student
    model; high-risk work and every verification pass go to the teacher."""
    if policy.teacher is None or policy.student is None:
        raise MisconfiguredPolicy("routing policy needs both a teacher and a student spec")
    if risk not in ("low", "high"):
        raise ValueError(f"unknown risk tier {risk!r}")
    if pass_kind not in ("detect", "verify"):
        raise ValueError(f"unknown pass kind {pass_kind!r}")
    if pass_kind == "verify" or risk == "high":
        return policy.teacher
    return policy.student


def usage_summary(records: list[UsageRecord]) -> dict[str, float]:
    """Aggregate totals, lower-median latency, and per-request averages.

    An empty log yields all zeros rather than raising.
    """
    total_requests = len(records)
    if total_requests == 0:
        return {
            "total_tokens": 0,
            "total_requests": 0,
            "p50_latency_ms": 0,
            "cost_per_request": 0.0,
            "tokens_per_request": 0.0,
        }
    total_tokens = sum(r.usage.total_tokens for r in records)
    latencies = sorted(r.latency_ms for r in records)
    p50 = latencies[(total_requests - 1) // 2]
    total_cost = math.fsum(r.cost_cents for r in records)
    return {
        "total_tokens": total_tokens,
        "total_requests": total_requests,
        "p50_latency_ms": p50,
        "cost_per_request": round(total_cost / total_requests, 4),
        "tokens_per_request": total_tokens / total_requests,
    }
