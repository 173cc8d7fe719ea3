"""Language-model gateway.

Every model interaction in the package flows through LlmClient, which books
calls and tokens into a UsageLedger and keeps an ordered record of calls for
tracing and replay. Backends plug in behind one interface: a wire client for
chat-completion HTTP endpoints, a deterministic mock that answers from a
knowledge graph, a scripted sequence for fault injection, and a replay
backend that re-serves recorded responses.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

from .kg import KnowledgeGraph, neighbors
from .prompts import (
    ADEQUACY_VERIFY,
    BEAM_SELECT,
    DEDUCTIVE_VERIFY,
    FINAL_REASON,
    PLAN_AND_SOLVE,
    RenderedPrompt,
    render,
)

logger = logging.getLogger(__name__)

STOPWORDS = frozenset(
    "a an and are as at be by for from has have how in is it of on or that the "
    "their this to was were what when where which who whom why will with do does "
    "did".split()
)


class LlmError(Exception):
    pass


class AuthError(LlmError):
    """Authentication rejected or credentials missing; never retried."""


class WireError(LlmError):
    """The endpoint failed after exhausting retries."""


class MalformedResponseError(LlmError):
    """The endpoint answered with a body the chat schema does not fit."""


class JsonDecodeFailure(LlmError):
    """No parseable JSON after all retries; carries the last raw response."""

    def __init__(self, message: str, last_raw: str):
        super().__init__(message)
        self.last_raw = last_raw


class MockMissError(LlmError):
    """The mock backend has no script entry for this question."""

    def __init__(self, question: str):
        super().__init__(f"mock backend has no entry for question {question!r}")
        self.question = question


class ReplayMismatchError(LlmError):
    """A replayed call diverged from the recorded sequence."""


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.3
    top_p: float = 1.0
    max_tokens: int | None = None


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_time: float = 0.0


@dataclass(frozen=True)
class CallRecord:
    """One LLM call as it appears in a trace."""

    key: str
    bindings_digest: str
    response: str
    prompt_tokens: int
    completion_tokens: int


class LlmBackend(Protocol):
    json_mode: bool
    concurrency_limit: int

    def complete(self, rendered: RenderedPrompt, params: DecodeParams) -> Completion: ...


class UsageLedger:
    """Thread-safe per-question usage counters; all monotone non-decreasing."""

    def __init__(self):
        self._lock = threading.Lock()
        self.llm_calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.wall_time = 0.0

    def record(
        self,
        calls: int = 1,
        prompt_tokens: int = 0,
        completion_tokens: int = 0,
        wall_time: float = 0.0,
    ):
        if min(calls, prompt_tokens, completion_tokens) < 0 or wall_time < 0:
            raise ValueError("usage increments must be non-negative")
        with self._lock:
            self.llm_calls += calls
            self.prompt_tokens += prompt_tokens
            self.completion_tokens += completion_tokens
            self.wall_time += wall_time

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "llm_calls": self.llm_calls,
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
                "wall_time": self.wall_time,
            }


class LlmClient:
    """Books every completion into the ledger and the call log."""

    def __init__(
        self,
        backend: LlmBackend,
        ledger: UsageLedger | None = None,
        params: DecodeParams = DecodeParams(),
    ):
        self.backend = backend
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.params = params
        self._lock = threading.Lock()
        self.call_records: list[CallRecord] = []

    def complete(self, rendered: RenderedPrompt, params: DecodeParams | None = None) -> Completion:
        completion = self.backend.complete(rendered, params or self.params)
        self.ledger.record(
            calls=1,
            prompt_tokens=completion.prompt_tokens,
            completion_tokens=completion.completion_tokens,
            wall_time=completion.wall_time,
        )
        record = CallRecord(
            key=rendered.key,
            bindings_digest=rendered.bindings_digest(),
            response=completion.text,
            prompt_tokens=completion.prompt_tokens,
            completion_tokens=completion.completion_tokens,
        )
        with self._lock:
            self.call_records.append(record)
        return completion


def _estimate_tokens(text: str) -> int:
    return len(text.split())


def classify_verdict(text: str) -> bool:
    """Map a verification response to a boolean by its leading token.

    'yes' (any case, with surrounding quotes or punctuation) is True, 'no' is
    False, anything else is False with a warning; unknown answers must never
    pass verification.
    """
    token = text.strip().lstrip("\"'`[(").split(None, 1)[0] if text.strip() else ""
    token = token.strip(".,!:;\"'`)]").lower()
    if token == "yes":
        return True
    if token != "no":
        logger.warning("unrecognized verification verdict %r; counting as no", text[:80])
    return False


# --- JSON repair -----------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)

HINT_YES_NO = "yes/no"
HINT_INDEX_LIST = "index-list"


def _balanced_spans(text: str, open_ch: str, close_ch: str):
    """Yield substrings of text spanning balanced open/close brackets,
    skipping bracket characters inside JSON string literals."""
    start = None
    depth = 0
    in_string = False
    escape = False
    for i, ch in enumerate(text):
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == open_ch:
            if depth == 0:
                start = i
            depth += 1
        elif ch == close_ch and depth > 0:
            depth -= 1
            if depth == 0 and start is not None:
                yield text[start : i + 1]
                start = None


def extract_json(text: str, schema_hint: str | None = None):
    """Pull a JSON value out of a model response.

    Tries, in order: the whole text; fenced code blocks; balanced-bracket
    spans found in the text; and finally scalar coercion when a hint permits
    it (a bare yes/no, or a bare list of integers). Raises ValueError when
    everything fails.
    """
    stripped = text.strip()
    try:
        return json.loads(stripped)
    except (json.JSONDecodeError, ValueError):
        pass
    for block in _FENCE_RE.findall(text):
        try:
            return json.loads(block.strip())
        except (json.JSONDecodeError, ValueError):
            continue
    for open_ch, close_ch in (("{", "}"), ("[", "]")):
        for span in _balanced_spans(text, open_ch, close_ch):
            try:
                return json.loads(span)
            except (json.JSONDecodeError, ValueError):
                continue
    if schema_hint == HINT_YES_NO:
        token = stripped.strip(".,!\"'`").lower()
        if token in ("yes", "no"):
            return {"answer": token}
    if schema_hint == HINT_INDEX_LIST:
        parts = [p for p in re.split(r"[,\s]+", stripped) if p]
        if parts and all(re.fullmatch(r"-?\d+", p) for p in parts):
            return [int(p) for p in parts]
    raise ValueError(f"no parseable JSON in response: {text[:120]!r}")


def complete_json(
    client: LlmClient,
    rendered: RenderedPrompt,
    schema_hint: str | None = None,
    retries: int = 2,
):
    """Call the model until a response parses as JSON, up to ``retries``
    re-asks after the first attempt. Returns the parsed value; exhaustion
    raises JsonDecodeFailure carrying the last raw response."""
    if retries < 0:
        raise ValueError("retries must be >= 0")
    last_raw = ""
    for _ in range(retries + 1):
        completion = client.complete(rendered)
        last_raw = completion.text
        try:
            return extract_json(completion.text, schema_hint)
        except ValueError:
            logger.warning("unparseable JSON response for %s; retrying", rendered.key)
    raise JsonDecodeFailure(
        f"no parseable JSON for {rendered.key} after {retries + 1} attempts", last_raw
    )


# --- Plans -----------------------------------------------------------------

PLACEHOLDER_TOKEN = "*placeholder*"


@dataclass(frozen=True)
class Plan:
    """Navigation plan for one question: query keywords, step outline, and a
    declarative restatement with exactly one ``*placeholder*`` to fill."""

    keywords: tuple[str, ...]
    planning_steps: tuple[str, ...]
    declarative_statement: str
    degraded: bool = False

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("plan keywords must be non-empty")
        count = self.declarative_statement.count(PLACEHOLDER_TOKEN)
        if count != 1:
            raise ValueError(
                f"declarative statement must contain exactly one {PLACEHOLDER_TOKEN}, found {count}"
            )

    def fill_statement(self, entity: str) -> str:
        return self.declarative_statement.replace(PLACEHOLDER_TOKEN, entity)

    @property
    def plan_context(self) -> str:
        return "; ".join(self.planning_steps) if self.planning_steps else ""


def question_keywords(question: str) -> tuple[str, ...]:
    """Content tokens of a question, for the degraded-plan fallback."""
    tokens = re.findall(r"[A-Za-z0-9_']+", question)
    kept = [t for t in tokens if t.lower() not in STOPWORDS]
    if not kept:
        kept = tokens
    return tuple(kept) if kept else (question.strip() or "question",)


def degraded_plan(question: str) -> Plan:
    return Plan(
        keywords=question_keywords(question),
        planning_steps=(),
        declarative_statement=question.strip() + " The answer is *placeholder*.",
        degraded=True,
    )


def _coerce_plan(parsed: object) -> Plan:
    if not isinstance(parsed, dict):
        raise ValueError("plan response is not an object")
    keywords_raw = parsed.get("keywords")
    if not isinstance(keywords_raw, list) or not keywords_raw:
        raise ValueError("plan keywords missing or empty")
    keywords = tuple(str(k) for k in keywords_raw)
    steps_raw = parsed.get("planning_steps", [])
    if not isinstance(steps_raw, list):
        raise ValueError("planning_steps is not a list")
    steps = []
    for item in steps_raw:
        if isinstance(item, str):
            steps.append(item)
        else:
            logger.warning("planning step is not a string; stringifying: %r", item)
            steps.append(json.dumps(item, sort_keys=True) if isinstance(item, (dict, list)) else str(item))
    statement = parsed.get("declarative_statement")
    if not isinstance(statement, str):
        raise ValueError("declarative_statement missing")
    return Plan(keywords=keywords, planning_steps=tuple(steps), declarative_statement=statement)


def generate_plan(
    client: LlmClient,
    question: str,
    demonstrations: Mapping[str, Sequence[str]] | None = None,
    demo_count: int | None = None,
    retries: int = 2,
) -> Plan:
    """Ask the model for a navigation plan; fall back to a degraded plan
    built from the question itself when no usable JSON arrives."""
    if not question.strip():
        raise ValueError("question must be non-empty")
    kwargs = {} if demo_count is None else {"demo_count": demo_count}
    rendered = render(
        PLAN_AND_SOLVE, {"query": question}, demonstrations=demonstrations, **kwargs
    )
    last_error: Exception | None = None
    for _ in range(retries + 1):
        completion = client.complete(rendered)
        try:
            parsed = extract_json(completion.text)
            return _coerce_plan(parsed)
        except ValueError as exc:
            last_error = exc
            logger.warning("plan parse failed (%s); retrying", exc)
    logger.warning("plan generation failed after %d attempts (%s); using degraded plan",
                   retries + 1, last_error)
    return degraded_plan(question)


# --- Backends --------------------------------------------------------------

@dataclass
class WireConfig:
    endpoint: str
    model: str
    auth_env_var: str = "LLM_API_KEY"
    timeout: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_factor: float = 2.0


class WireBackend:
    """Chat-completion HTTP client: messages array in, first choice text out.

    Transient failures (timeouts, connection errors, 429 and 5xx statuses)
    are retried with exponential backoff; auth failures and malformed bodies
    are not. The sleeper and clock are injectable so fault-injection tests
    run without real waiting.
    """

    json_mode = False
    concurrency_limit = 4

    def __init__(
        self,
        config: WireConfig,
        session=None,
        sleeper: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        import requests

        self.config = config
        self.session = session if session is not None else requests.Session()
        self.sleeper = sleeper
        self.clock = clock

    def complete(self, rendered: RenderedPrompt, params: DecodeParams) -> Completion:
        import requests

        token = os.environ.get(self.config.auth_env_var)
        if not token:
            raise AuthError(
                f"auth token environment variable {self.config.auth_env_var} is not set"
            )
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": rendered.system},
                {"role": "user", "content": rendered.user},
            ],
            "temperature": params.temperature,
            "top_p": params.top_p,
        }
        if params.max_tokens is not None:
            payload["max_tokens"] = params.max_tokens
        headers = {"Authorization": f"Bearer {token}"}
        started = self.clock()
        last_error: Exception | None = None
        for attempt in range(1, self.config.max_attempts + 1):
            if attempt > 1:
                delay = self.config.backoff_base * self.config.backoff_factor ** (attempt - 2)
                self.sleeper(delay)
            try:
                response = self.session.post(
                    self.config.endpoint,
                    json=payload,
                    headers=headers,
                    timeout=self.config.timeout,
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
                logger.warning("wire attempt %d failed (%s); retrying", attempt, exc)
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {response.status_code})")
            if response.status_code == 429 or response.status_code >= 500:
                last_error = WireError(f"HTTP {response.status_code}")
                logger.warning("wire attempt %d got HTTP %d; retrying", attempt, response.status_code)
                continue
            if response.status_code != 200:
                raise WireError(f"endpoint returned HTTP {response.status_code}")
            return self._parse_body(response, started)
        raise WireError(
            f"endpoint failed after {self.config.max_attempts} attempts: {last_error}"
        )

    def _parse_body(self, response, started: float) -> Completion:
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"response body does not fit chat schema: {exc}")
        if not isinstance(text, str):
            raise MalformedResponseError("choice content is not text")
        usage = body.get("usage") or {}
        return Completion(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            wall_time=self.clock() - started,
        )


class MockBackend:
    """Deterministic backend that answers from the graph and an answer key.

    Verification verdicts come from actual entailment: a candidate path
    verifies globally when its terminal entity is one of the question's
    answers, and a step verifies locally when it is a real edge out of the
    previous entity. Beam selection echoes the first beam_width indices,
    plans come from a scripted table, and final answers are the terminal
    entities of the paths the caller presents.
    """

    json_mode = True
    concurrency_limit = 64

    def __init__(
        self,
        kg: KnowledgeGraph,
        answer_key: Mapping[str, Sequence[str]],
        plan_script: Mapping[str, Mapping] | None = None,
        local_rule: Callable[[Mapping[str, str]], bool] | None = None,
        global_rule: Callable[[Mapping[str, str]], bool] | None = None,
        adequacy_rule: Callable[[Mapping[str, str]], bool] | None = None,
    ):
        self.kg = kg
        self.answer_key = {q: tuple(a) for q, a in answer_key.items()}
        self.plan_script = dict(plan_script or {})
        self.local_rule = local_rule
        self.global_rule = global_rule
        self.adequacy_rule = adequacy_rule

    @staticmethod
    def _norm(text: str) -> str:
        return re.sub(r"\s+", " ", text.strip().lower().replace("_", " "))

    def _answers_for(self, question: str) -> tuple[str, ...]:
        if question not in self.answer_key:
            raise MockMissError(question)
        return self.answer_key[question]

    def _entailed_globally(self, bindings: Mapping[str, str]) -> bool:
        answers = self._answers_for(bindings["query"])
        terminal = bindings.get("terminal_entity", "")
        return self._norm(terminal) in {self._norm(a) for a in answers}

    def complete(self, rendered: RenderedPrompt, params: DecodeParams) -> Completion:
        b = rendered.bindings
        if rendered.key == PLAN_AND_SOLVE:
            question = b["query"]
            if question not in self.plan_script:
                raise MockMissError(question)
            text = json.dumps(self.plan_script[question], sort_keys=True)
        elif rendered.key == DEDUCTIVE_VERIFY:
            if b.get("verify_scope") == "local":
                if self.local_rule is not None:
                    verdict = self.local_rule(b)
                else:
                    step = (b.get("step_relation", ""), b.get("step_entity", ""))
                    verdict = step in neighbors(self.kg, b.get("prev_entity", ""))
            else:
                verdict = (
                    self.global_rule(b)
                    if self.global_rule is not None
                    else self._entailed_globally(b)
                )
            text = "yes" if verdict else "no"
        elif rendered.key == ADEQUACY_VERIFY:
            verdict = (
                self.adequacy_rule(b)
                if self.adequacy_rule is not None
                else self._entailed_globally(b)
            )
            text = "yes" if verdict else "no"
        elif rendered.key == BEAM_SELECT:
            count = int(b["candidate_count"])
            width = int(b["beam_width"])
            text = json.dumps(list(range(min(width, count))))
        elif rendered.key == FINAL_REASON:
            terminals = b.get("terminal_entities", "")
            text = terminals if terminals else "unknown"
        else:
            raise LlmError(f"mock backend cannot serve template {rendered.key!r}")
        return Completion(
            text=text,
            prompt_tokens=_estimate_tokens(rendered.system + " " + rendered.user),
            completion_tokens=_estimate_tokens(text),
        )


def load_mock_script(source) -> tuple[dict[str, tuple[str, ...]], dict[str, dict]]:
    """Read a mock script file: a JSON object keyed by question, each entry
    holding the gold ``answers`` list and the scripted ``plan`` object.
    Returns the (answer_key, plan_script) pair a MockBackend wants."""
    if hasattr(source, "read"):
        data = json.load(source)
    else:
        with open(source, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("mock script must be a JSON object keyed by question")
    answer_key: dict[str, tuple[str, ...]] = {}
    plan_script: dict[str, dict] = {}
    for question, entry in data.items():
        if not isinstance(entry, dict) or "answers" not in entry:
            raise ValueError(f"mock script entry for {question!r} needs an 'answers' list")
        answers = entry["answers"]
        if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
            raise ValueError(f"mock script answers for {question!r} must be strings")
        answer_key[question] = tuple(answers)
        if "plan" in entry:
            if not isinstance(entry["plan"], dict):
                raise ValueError(f"mock script plan for {question!r} must be an object")
            plan_script[question] = entry["plan"]
    return answer_key, plan_script


class ScriptedBackend:
    """Serves a fixed sequence of responses, for fault-injection tests."""

    json_mode = False
    concurrency_limit = 1

    def __init__(self, responses: Sequence[str]):
        self.responses = list(responses)
        self._served = 0

    def complete(self, rendered: RenderedPrompt, params: DecodeParams) -> Completion:
        if self._served >= len(self.responses):
            raise LlmError("scripted backend ran out of responses")
        text = self.responses[self._served]
        self._served += 1
        return Completion(
            text=text,
            prompt_tokens=_estimate_tokens(rendered.system + " " + rendered.user),
            completion_tokens=_estimate_tokens(text),
        )


class ReplayBackend:
    """Re-serves the responses recorded in a trace, in order, checking that
    each call matches the recorded template key and bindings digest."""

    json_mode = True
    concurrency_limit = 1

    def __init__(self, records: Sequence[CallRecord]):
        self.records = list(records)
        self._cursor = 0

    def complete(self, rendered: RenderedPrompt, params: DecodeParams) -> Completion:
        if self._cursor >= len(self.records):
            raise ReplayMismatchError(
                f"replay exhausted: no recorded call for {rendered.key!r}"
            )
        record = self.records[self._cursor]
        if record.key != rendered.key:
            raise ReplayMismatchError(
                f"replay mismatch at call {self._cursor}: recorded {record.key!r}, "
                f"got {rendered.key!r}"
            )
        if record.bindings_digest != rendered.bindings_digest():
            raise ReplayMismatchError(
                f"replay mismatch at call {self._cursor} ({rendered.key}): "
                "bindings differ from the recording"
            )
        self._cursor += 1
        return Completion(
            text=record.response,
            prompt_tokens=record.prompt_tokens,
            completion_tokens=record.completion_tokens,
        )
