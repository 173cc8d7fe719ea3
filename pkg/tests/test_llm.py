import io
import json
import logging
import threading

import pytest
import requests

from kgreason.kg import load_triples
from kgreason.llm import (
    HINT_INDEX_LIST,
    HINT_YES_NO,
    AuthError,
    DecodeParams,
    JsonDecodeFailure,
    LlmClient,
    LlmError,
    MalformedResponseError,
    MockBackend,
    MockMissError,
    Plan,
    ReplayBackend,
    ReplayMismatchError,
    ScriptedBackend,
    UsageLedger,
    WireBackend,
    WireConfig,
    classify_verdict,
    complete_json,
    degraded_plan,
    extract_json,
    generate_plan,
    load_mock_script,
    question_keywords,
)
from kgreason.prompts import (
    BEAM_SELECT,
    DEDUCTIVE_VERIFY,
    FINAL_REASON,
    PLAN_AND_SOLVE,
    render,
)


def load_fixture(name):
    with open(f"fixtures/{name}") as fh:
        return load_triples(fh)


def plan_prompt(question="who?"):
    return render(PLAN_AND_SOLVE, {"query": question}, demo_count=0)


# --- JSON repair -------------------------------------------------------------


def test_extract_whole_text():
    assert extract_json('{"keywords": ["x"]}') == {"keywords": ["x"]}


def test_extract_fenced_block():
    text = '```json\n{"keywords":["x"]}\n```'
    assert extract_json(text) == {"keywords": ["x"]}


def test_extract_balanced_span_in_chatty_text():
    text = 'Sure! Here is the result: {"a": [1, 2]} hope that helps.'
    assert extract_json(text) == {"a": [1, 2]}


def test_extract_span_ignores_brackets_inside_strings():
    text = 'prefix {"a": "close } brace"} suffix'
    assert extract_json(text) == {"a": "close } brace"}


def test_extract_scalar_yes_with_hint():
    assert extract_json("yes", HINT_YES_NO) == {"answer": "yes"}
    assert extract_json("No.", HINT_YES_NO) == {"answer": "no"}


def test_extract_bare_index_list_with_hint():
    assert extract_json("0, 2", HINT_INDEX_LIST) == [0, 2]
    assert extract_json("1 3", HINT_INDEX_LIST) == [1, 3]


def test_extract_garbage_raises():
    with pytest.raises(ValueError):
        extract_json("no json here", None)


def test_complete_json_retries_then_succeeds():
    backend = ScriptedBackend(["garbage", "also garbage", '{"ok": true}'])
    client = LlmClient(backend)
    parsed = complete_json(client, plan_prompt(), retries=2)
    assert parsed == {"ok": True}
    assert client.ledger.llm_calls == 3


def test_complete_json_exhaustion_carries_last_raw():
    backend = ScriptedBackend(["bad one", "bad two"])
    client = LlmClient(backend)
    with pytest.raises(JsonDecodeFailure) as exc:
        complete_json(client, plan_prompt(), retries=1)
    assert exc.value.last_raw == "bad two"
    assert client.ledger.llm_calls == 2


# --- verdict classification ---------------------------------------------------


@pytest.mark.parametrize("text", ["yes", "Yes.", "YES", '"yes"', "yes, it follows"])
def test_verdict_yes_variants(text):
    assert classify_verdict(text) is True


@pytest.mark.parametrize("text", ["no", "No.", "NO", '"no"', "no, it does not"])
def test_verdict_no_variants(text):
    assert classify_verdict(text) is False


def test_verdict_unknown_fails_closed(caplog):
    with caplog.at_level(logging.WARNING):
        assert classify_verdict("perhaps") is False
        assert classify_verdict("") is False
    assert any("verdict" in rec.message for rec in caplog.records)


# --- usage accounting ----------------------------------------------------------


def test_ledger_accumulates():
    ledger = UsageLedger()
    ledger.record(calls=1, prompt_tokens=10, completion_tokens=2, wall_time=0.5)
    ledger.record(calls=1, prompt_tokens=5, completion_tokens=1, wall_time=0.25)
    snap = ledger.snapshot()
    assert snap == {
        "llm_calls": 2,
        "prompt_tokens": 15,
        "completion_tokens": 3,
        "wall_time": 0.75,
    }


def test_ledger_rejects_negative_increments():
    ledger = UsageLedger()
    with pytest.raises(ValueError):
        ledger.record(calls=-1)
    with pytest.raises(ValueError):
        ledger.record(wall_time=-0.1)


def test_ledger_is_thread_safe():
    ledger = UsageLedger()

    def work():
        for _ in range(200):
            ledger.record(calls=1, prompt_tokens=1)

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ledger.llm_calls == 1600
    assert ledger.prompt_tokens == 1600


def test_client_books_usage_and_call_records():
    backend = ScriptedBackend(["hello world"])
    client = LlmClient(backend)
    rendered = plan_prompt("what?")
    client.complete(rendered)
    assert client.ledger.llm_calls == 1
    assert client.ledger.completion_tokens == 2
    record = client.call_records[0]
    assert record.key == PLAN_AND_SOLVE
    assert record.bindings_digest == rendered.bindings_digest()
    assert record.response == "hello world"


# --- plans ---------------------------------------------------------------------


def test_plan_requires_exactly_one_placeholder():
    with pytest.raises(ValueError):
        Plan(keywords=("k",), planning_steps=(), declarative_statement="no slot here")
    with pytest.raises(ValueError):
        Plan(
            keywords=("k",),
            planning_steps=(),
            declarative_statement="*placeholder* twice *placeholder*",
        )


def test_plan_fill_and_context():
    plan = Plan(
        keywords=("k",),
        planning_steps=("find the father", "find the ex-wife"),
        declarative_statement="The answer is *placeholder*.",
    )
    assert plan.fill_statement("Erin_Wagner") == "The answer is Erin_Wagner."
    assert plan.plan_context == "find the father; find the ex-wife"


def test_question_keywords_drop_stopwords():
    kept = question_keywords("Who is the ex-wife of Justin Bieber's father?")
    assert "the" not in {k.lower() for k in kept}
    assert any("Bieber" in k for k in kept)


def test_degraded_plan_shape():
    plan = degraded_plan("Who founded Acme?")
    assert plan.degraded
    assert plan.declarative_statement == "Who founded Acme? The answer is *placeholder*."
    assert plan.keywords


def test_generate_plan_falls_back_after_exhausted_retries(caplog):
    backend = ScriptedBackend(["nope", "still nope", "not json either"])
    client = LlmClient(backend)
    with caplog.at_level(logging.WARNING):
        plan = generate_plan(client, "Who founded Acme?", retries=2)
    assert plan.degraded
    assert client.ledger.llm_calls == 3


def test_generate_plan_stringifies_dict_steps(caplog):
    scripted = json.dumps(
        {
            "keywords": ["founder", "Acme"],
            "planning_steps": [{"step": 1, "do": "look up founder"}],
            "declarative_statement": "The founder of Acme is *placeholder*.",
        }
    )
    client = LlmClient(ScriptedBackend([scripted]))
    with caplog.at_level(logging.WARNING):
        plan = generate_plan(client, "Who founded Acme?")
    assert not plan.degraded
    assert len(plan.planning_steps) == 1
    assert isinstance(plan.planning_steps[0], str)
    assert "look up founder" in plan.planning_steps[0]
    assert any("stringifying" in rec.message for rec in caplog.records)


def test_generate_plan_mock_miss_propagates():
    g = load_fixture("bieber.tsv")
    client = LlmClient(MockBackend(g, answer_key={}))
    with pytest.raises(MockMissError):
        generate_plan(client, "unscripted question?")


# --- wire backend ---------------------------------------------------------------


class FakeResponse:
    def __init__(self, status_code=200, body=None):
        self.status_code = status_code
        self._body = body

    def json(self):
        if self._body is None:
            raise ValueError("not json")
        return self._body


def chat_body(text, prompt_tokens=7, completion_tokens=3):
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }


class FakeSession:
    """Serves a scripted sequence of responses or exceptions per post."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append({"url": url, "json": json, "headers": headers})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


class FakeClock:
    """Clock advanced manually; doubles as the backoff sleeper."""

    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds

    def __call__(self):
        return self.now


@pytest.fixture
def wire_env(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "sk-test")


def make_wire(outcomes, **overrides):
    config = WireConfig(endpoint="https://example.test/v1/chat", model="test-model", **overrides)
    session = FakeSession(outcomes)
    clock = FakeClock()
    backend = WireBackend(config, session=session, sleeper=clock.sleep, clock=clock)
    return backend, session, clock


def test_wire_happy_path_books_tokens(wire_env):
    backend, session, _ = make_wire([FakeResponse(200, chat_body("fine answer"))])
    got = backend.complete(plan_prompt(), DecodeParams())
    assert got.text == "fine answer"
    assert got.prompt_tokens == 7
    assert got.completion_tokens == 3
    payload = session.posts[0]["json"]
    assert payload["model"] == "test-model"
    assert payload["messages"][1]["role"] == "user"
    assert session.posts[0]["headers"]["Authorization"] == "Bearer sk-test"


def test_wire_retries_timeouts_and_counts_backoff(wire_env):
    backend, session, clock = make_wire(
        [requests.Timeout("t1"), requests.Timeout("t2"), FakeResponse(200, chat_body("ok"))]
    )
    got = backend.complete(plan_prompt(), DecodeParams())
    assert got.text == "ok"
    assert len(session.posts) == 3
    assert clock.sleeps == [1.0, 2.0]
    assert got.wall_time == pytest.approx(3.0)


def test_wire_retries_connection_errors_and_5xx(wire_env):
    backend, session, _ = make_wire(
        [requests.ConnectionError("down"), FakeResponse(503), FakeResponse(200, chat_body("ok"))]
    )
    assert backend.complete(plan_prompt(), DecodeParams()).text == "ok"
    assert len(session.posts) == 3


def test_wire_retries_429(wire_env):
    backend, session, _ = make_wire([FakeResponse(429), FakeResponse(200, chat_body("ok"))])
    assert backend.complete(plan_prompt(), DecodeParams()).text == "ok"
    assert len(session.posts) == 2


def test_wire_401_is_immediate_auth_error(wire_env):
    backend, session, clock = make_wire([FakeResponse(401)])
    with pytest.raises(AuthError):
        backend.complete(plan_prompt(), DecodeParams())
    assert len(session.posts) == 1
    assert clock.sleeps == []


def test_wire_missing_token_is_auth_error(monkeypatch):
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    backend, session, _ = make_wire([])
    with pytest.raises(AuthError):
        backend.complete(plan_prompt(), DecodeParams())
    assert session.posts == []


def test_wire_malformed_body_is_not_retried(wire_env):
    backend, session, _ = make_wire([FakeResponse(200, {"surprise": True})])
    with pytest.raises(MalformedResponseError):
        backend.complete(plan_prompt(), DecodeParams())
    assert len(session.posts) == 1


def test_wire_gives_up_after_max_attempts(wire_env):
    backend, session, _ = make_wire(
        [FakeResponse(500)] * 3, max_attempts=3
    )
    with pytest.raises(LlmError):
        backend.complete(plan_prompt(), DecodeParams())
    assert len(session.posts) == 3


# --- mock backend ---------------------------------------------------------------


def mock_client(answer_key=None, **kwargs):
    g = load_fixture("bieber.tsv")
    backend = MockBackend(g, answer_key=answer_key or {}, **kwargs)
    return LlmClient(backend), g


def verify_prompt(scope, **extra):
    bindings = {
        "declarative_statement": "stmt",
        "parsed_reasoning_path": "path",
        "verify_scope": scope,
    }
    bindings.update(extra)
    return render(DEDUCTIVE_VERIFY, bindings, demo_count=0)


def test_mock_local_verdict_is_edge_membership():
    client, _ = mock_client()
    yes = client.complete(
        verify_prompt(
            "local",
            prev_entity="Justin_Bieber",
            step_relation="people.person.father",
            step_entity="Jeremy_Bieber",
        )
    )
    no = client.complete(
        verify_prompt(
            "local",
            prev_entity="Justin_Bieber",
            step_relation="people.person.father",
            step_entity="Erin_Wagner",
        )
    )
    assert yes.text == "yes"
    assert no.text == "no"


def test_mock_global_verdict_normalizes_answer_text():
    client, _ = mock_client(answer_key={"q?": ["Erin Wagner"]})
    got = client.complete(verify_prompt("global", query="q?", terminal_entity="Erin_Wagner"))
    assert got.text == "yes"
    other = client.complete(verify_prompt("global", query="q?", terminal_entity="Jeremy_Bieber"))
    assert other.text == "no"


def test_mock_beam_select_echoes_leading_indices():
    client, _ = mock_client()
    rendered = render(
        BEAM_SELECT,
        {
            "plan_context": "p",
            "query": "q",
            "beam_width": 4,
            "reasoning_paths": "1. x",
            "candidate_count": 6,
        },
        demo_count=0,
    )
    assert client.complete(rendered).text == "[0, 1, 2, 3]"


def test_mock_final_reason_echoes_terminals():
    client, _ = mock_client()
    rendered = render(
        FINAL_REASON,
        {"query": "q", "reasoning_path": "A -> r -> B", "terminal_entities": "B\nC"},
        demo_count=0,
    )
    assert client.complete(rendered).text == "B\nC"


def test_mock_unknown_question_raises_miss():
    client, _ = mock_client()
    with pytest.raises(MockMissError):
        client.complete(verify_prompt("global", query="never scripted", terminal_entity="X"))


def test_mock_rules_override_defaults():
    client, _ = mock_client(global_rule=lambda b: True)
    got = client.complete(verify_prompt("global", query="anything", terminal_entity="X"))
    assert got.text == "yes"


# --- scripted and replay backends ------------------------------------------------


def test_scripted_backend_exhaustion():
    client = LlmClient(ScriptedBackend(["one"]))
    client.complete(plan_prompt())
    with pytest.raises(LlmError):
        client.complete(plan_prompt())


def test_replay_backend_reserves_recorded_responses():
    source = LlmClient(ScriptedBackend(['{"a": 1}', "yes"]))
    first = plan_prompt("q1")
    second = verify_prompt("global", query="q1", terminal_entity="X")
    source.complete(first)
    source.complete(second)
    replay = LlmClient(ReplayBackend(source.call_records))
    assert replay.complete(first).text == '{"a": 1}'
    assert replay.complete(second).text == "yes"


def test_replay_backend_detects_divergence():
    source = LlmClient(ScriptedBackend(["yes"]))
    source.complete(plan_prompt("q1"))
    replay = LlmClient(ReplayBackend(source.call_records))
    with pytest.raises(ReplayMismatchError):
        replay.complete(verify_prompt("global", query="q1"))


def test_replay_backend_detects_binding_drift():
    source = LlmClient(ScriptedBackend(["yes"]))
    source.complete(plan_prompt("q1"))
    replay = LlmClient(ReplayBackend(source.call_records))
    with pytest.raises(ReplayMismatchError):
        replay.complete(plan_prompt("different question"))


def test_replay_backend_exhaustion():
    replay = LlmClient(ReplayBackend([]))
    with pytest.raises(ReplayMismatchError):
        replay.complete(plan_prompt())


# --- mock script files ------------------------------------------------------------


def test_load_mock_script_round_trip():
    raw = {
        "q?": {
            "answers": ["A"],
            "plan": {"keywords": ["k"], "planning_steps": [], "declarative_statement": "x *placeholder*"},
        }
    }
    answer_key, plan_script = load_mock_script(io.StringIO(json.dumps(raw)))
    assert answer_key == {"q?": ("A",)}
    assert plan_script["q?"]["keywords"] == ["k"]


def test_load_mock_script_requires_answers():
    with pytest.raises(ValueError):
        load_mock_script(io.StringIO(json.dumps({"q?": {"plan": {}}})))


def test_load_mock_script_rejects_non_object():
    with pytest.raises(ValueError):
        load_mock_script(io.StringIO(json.dumps(["not", "an", "object"])))
