"""Verification-gated beam search over a knowledge graph.

The engine builds reasoning paths step by step: a plan turns the question
into keywords and a cloze statement, retrieval proposes true-edge extensions
of each live hypothesis, the model picks the beam, and a deductive check
decides whether a path now answers the question (halt) or should keep
growing. Halted paths feed one final answer-generation call.

Every candidate step comes from the graph's real adjacency, so emitted paths
are valid by construction; the model can gate and rank but never invent an
edge. Call count per question is bounded by width*depth verification calls,
one selection call per non-final depth, one plan call and one answer call.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import IO, Mapping, Sequence, Union

from .embedding import Embedder, EmbeddingIndex
from .kg import KnowledgeGraph, ReasoningPath, ReasoningStep, validate_path
from .llm import (
    HINT_INDEX_LIST,
    CallRecord,
    JsonDecodeFailure,
    LlmClient,
    LlmError,
    Plan,
    classify_verdict,
    complete_json,
    degraded_plan,
    generate_plan,
)
from .pathrag import KeywordSet, RetrievalConfig, ScoredCandidate, candidate_steps
from .prompts import (
    ADEQUACY_VERIFY,
    BEAM_SELECT,
    DEDUCTIVE_VERIFY,
    FINAL_REASON,
    render,
)

logger = logging.getLogger(__name__)

TRACE_SCHEMA = "dvbs-trace/1"

REASON_NO_DEDUCIBLE_PATH = "no-deducible-path"
REASON_BACKEND_FAILURE = "backend-failure"

PRUNE_WIDTH_TRUNCATION = "width-truncation"
PRUNE_NO_CANDIDATES = "no-candidates"
PRUNE_INVALID_STEP = "invalid-step"

SELECT_BY_LLM = "llm"
SELECT_SATURATED = "saturated"
SELECT_FINAL_DEPTH = "final-depth-score"
SELECT_FALLBACK = "score-fallback"


class TopicEntityError(ValueError):
    """No topic entity of the question exists in the graph."""


@dataclass(frozen=True)
class Hypothesis:
    path: ReasoningPath
    selection_rank: int
    halted: bool = False


@dataclass(frozen=True)
class SearchConfig:
    beam_width: int = 4
    max_depth: int = 4
    use_planning: bool = True
    use_deductive_verifier: bool = True
    use_beam_search: bool = True
    use_last_step_reasoning: bool = True
    adequacy_mode: bool = False
    json_retries: int = 2
    demo_count: int = 5

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.json_retries < 0:
            raise ValueError("json_retries must be >= 0")

    @property
    def effective_width(self) -> int:
        return self.beam_width if self.use_beam_search else 1


def call_budget(config: SearchConfig) -> int:
    """Worst-case model calls for one question: one verification per
    retained path per depth, one selection per depth, one plan call."""
    n = config.effective_width
    d = config.max_depth
    return n * d + d + 1


@dataclass(frozen=True)
class AnswerSet:
    """Answers in rank order plus the paths that produced them. Paths whose
    terminal entity is not among the answers are kept separately as
    indirect support."""

    answers: tuple[str, ...] = ()
    supporting_paths: tuple[ReasoningPath, ...] = ()
    indirect_paths: tuple[ReasoningPath, ...] = ()
    reason: str | None = None

    @property
    def top_answer(self) -> str | None:
        return self.answers[0] if self.answers else None


class SearchTrace:
    """Ordered record of one search: plan, per-depth beam activity, every
    model call, and the final answers. Serializes to one JSON object per
    line; content is fully deterministic for deterministic backends."""

    def __init__(self, question: str, events: list[dict] | None = None):
        self.question = question
        self.events: list[dict] = events if events is not None else []

    def add(self, event: str, **payload):
        record = {"event": event}
        record.update(payload)
        self.events.append(record)

    def add_calls(self, records: Sequence[CallRecord]):
        for r in records:
            self.add(
                "llm_call",
                key=r.key,
                bindings_digest=r.bindings_digest,
                response=r.response,
                prompt_tokens=r.prompt_tokens,
                completion_tokens=r.completion_tokens,
            )

    def to_jsonl(self) -> str:
        lines = []
        for record in self.events:
            lines.append(json.dumps(record, sort_keys=True, ensure_ascii=True))
        return "\n".join(lines) + "\n"

    def call_records(self) -> list[CallRecord]:
        records = []
        for event in self.events:
            if event.get("event") == "llm_call":
                records.append(
                    CallRecord(
                        key=event["key"],
                        bindings_digest=event["bindings_digest"],
                        response=event["response"],
                        prompt_tokens=event.get("prompt_tokens", 0),
                        completion_tokens=event.get("completion_tokens", 0),
                    )
                )
        return records

    def prune_events(self) -> list[dict]:
        return [e for e in self.events if e.get("event") == "prune"]

    @classmethod
    def from_jsonl(cls, source: Union[str, IO[str]]) -> "SearchTrace":
        if hasattr(source, "read"):
            text = source.read()
        else:
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        events = []
        for line_number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"trace line {line_number} is not valid JSON: {exc}")
        if not events or events[0].get("schema") != TRACE_SCHEMA:
            raise ValueError(f"trace does not declare schema {TRACE_SCHEMA}")
        question = events[0].get("question", "")
        return cls(question=question, events=events)


def _path_sentences(path: ReasoningPath) -> str:
    """Each hop of the path as its own arrow sentence, newline-joined."""
    lines = []
    current = path.start
    for step in path.steps:
        lines.append(f"{current} -> {step.relation} -> {step.entity}")
        current = step.entity
    return "\n".join(lines)


def verify_local(
    client: LlmClient,
    question: str,
    path_prefix: ReasoningPath,
    step: ReasoningStep,
    config: SearchConfig = SearchConfig(),
    demonstrations: Mapping[str, Sequence[str]] | None = None,
) -> bool:
    """Ask whether appending ``step`` coheres with the path so far.

    With the verifier ablated this is unconditionally true and costs no
    call. Unusable verdicts count as no.
    """
    if not config.use_deductive_verifier:
        return True
    prev = path_prefix.terminal_entity
    rendered = render(
        DEDUCTIVE_VERIFY,
        {
            "declarative_statement": f"{prev} -> {step.relation} -> {step.entity}",
            "parsed_reasoning_path": _path_sentences(path_prefix) or path_prefix.start,
            "query": question,
            "verify_scope": "local",
            "prev_entity": prev,
            "step_relation": step.relation,
            "step_entity": step.entity,
        },
        demonstrations=demonstrations,
        demo_count=config.demo_count,
    )
    return classify_verdict(client.complete(rendered).text)


def verify_global(
    client: LlmClient,
    question: str,
    declarative_statement: str,
    path: ReasoningPath,
    config: SearchConfig = SearchConfig(),
    demonstrations: Mapping[str, Sequence[str]] | None = None,
) -> bool:
    """Ask whether the path now entails the cloze statement, filled with the
    path's terminal entity verbatim. An empty path is never deducible and
    costs no call."""
    if not path.steps:
        return False
    if "*placeholder*" not in declarative_statement:
        raise ValueError("declarative statement lacks the *placeholder* slot")
    conclusion = declarative_statement.replace("*placeholder*", path.terminal_entity)
    rendered = render(
        DEDUCTIVE_VERIFY,
        {
            "declarative_statement": conclusion,
            "parsed_reasoning_path": _path_sentences(path),
            "query": question,
            "verify_scope": "global",
            "terminal_entity": path.terminal_entity,
        },
        demonstrations=demonstrations,
        demo_count=config.demo_count,
    )
    return classify_verdict(client.complete(rendered).text)


def adequacy_verify(
    client: LlmClient,
    question: str,
    path: ReasoningPath,
    config: SearchConfig = SearchConfig(),
    demonstrations: Mapping[str, Sequence[str]] | None = None,
) -> bool:
    """Sufficiency-style halting check: is this path enough to answer the
    question? Swapped in for the deductive check in adequacy mode."""
    if not path.steps:
        return False
    rendered = render(
        ADEQUACY_VERIFY,
        {
            "reasoning_path": path.to_arrow(),
            "query": question,
            "terminal_entity": path.terminal_entity,
        },
        demonstrations=demonstrations,
        demo_count=config.demo_count,
    )
    return classify_verdict(client.complete(rendered).text)


def select_steps(
    client: LlmClient,
    question: str,
    plan: Plan,
    pool: Sequence[tuple[Hypothesis, ScoredCandidate]],
    k: int,
    config: SearchConfig = SearchConfig(),
    demonstrations: Mapping[str, Sequence[str]] | None = None,
) -> tuple[list[tuple[Hypothesis, ScoredCandidate]], str]:
    """Pick at most k extensions from the score-ranked pool.

    The model returns an index list over the numbered candidate paths.
    Out-of-range and duplicate indices are dropped; short lists are filled
    from the remaining top score ranks; an unusable response falls back to
    the top k by score, flagged in the returned mode.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pool) <= k:
        return list(pool), SELECT_SATURATED
    numbered = []
    for i, (hyp, cand) in enumerate(pool):
        numbered.append(f"{i}. {hyp.path.extend(cand.step).to_arrow()}")
    rendered = render(
        BEAM_SELECT,
        {
            "plan_context": plan.plan_context,
            "query": question,
            "beam_width": k,
            "reasoning_paths": "\n".join(numbered),
            "candidate_count": len(pool),
        },
        demonstrations=demonstrations,
        demo_count=config.demo_count,
    )
    try:
        parsed = complete_json(client, rendered, HINT_INDEX_LIST, retries=config.json_retries)
    except JsonDecodeFailure:
        logger.warning("beam selection response unusable; falling back to score order")
        return list(pool[:k]), SELECT_FALLBACK
    indices: list[int] = []
    if isinstance(parsed, list):
        for item in parsed:
            if isinstance(item, bool) or not isinstance(item, int):
                continue
            if 0 <= item < len(pool) and item not in indices:
                indices.append(item)
    if not indices:
        logger.warning("beam selection produced no valid indices; falling back to score order")
        return list(pool[:k]), SELECT_FALLBACK
    indices = indices[:k]
    if len(indices) < k:
        for i in range(len(pool)):
            if i not in indices:
                indices.append(i)
            if len(indices) == k:
                break
    return [pool[i] for i in indices], SELECT_BY_LLM


def final_reason(
    client: LlmClient,
    question: str,
    halted_paths: Sequence[ReasoningPath],
    config: SearchConfig = SearchConfig(),
    demonstrations: Mapping[str, Sequence[str]] | None = None,
) -> AnswerSet:
    """Produce the answer set from the halted paths.

    One model call reasons over all paths at once; with last-step reasoning
    ablated (or on unusable output) the answers are the paths' terminal
    entities in halt order.
    """
    if not halted_paths:
        return AnswerSet(reason=REASON_NO_DEDUCIBLE_PATH)
    terminals = _deduped([p.terminal_entity for p in halted_paths])
    if not config.use_last_step_reasoning:
        return AnswerSet(answers=tuple(terminals), supporting_paths=tuple(halted_paths))
    rendered = render(
        FINAL_REASON,
        {
            "query": question,
            "reasoning_path": "\n".join(p.to_arrow() for p in halted_paths),
            "terminal_entities": ", ".join(terminals),
        },
        demonstrations=demonstrations,
        demo_count=config.demo_count,
    )
    text = client.complete(rendered).text
    answers = _deduped(
        part.strip() for chunk in text.splitlines() for part in chunk.split(",")
    )
    if not answers:
        logger.warning("final reasoning produced no answers; using terminal entities")
        return AnswerSet(
            answers=tuple(terminals),
            supporting_paths=tuple(halted_paths),
            reason="final-fallback",
        )
    answer_set = set(answers)
    direct = tuple(p for p in halted_paths if p.terminal_entity in answer_set)
    indirect = tuple(p for p in halted_paths if p.terminal_entity not in answer_set)
    return AnswerSet(answers=tuple(answers), supporting_paths=direct, indirect_paths=indirect)


def _deduped(items) -> list[str]:
    seen = []
    for item in items:
        if item and item not in seen:
            seen.append(item)
    return seen


def run_dvbs(
    question: str,
    topic_entities: Sequence[str],
    g: KnowledgeGraph,
    idx: EmbeddingIndex,
    emb: Embedder,
    client: LlmClient,
    search_config: SearchConfig = SearchConfig(),
    retrieval_config: RetrievalConfig = RetrievalConfig(),
    demonstrations: Mapping[str, Sequence[str]] | None = None,
) -> tuple[AnswerSet, SearchTrace]:
    """Run the full search for one question and return the answers plus a
    replayable trace.

    Beams start from every topic entity found in the graph. Each depth pools
    candidate extensions of all live hypotheses, keeps the beam via model
    selection (skipped when the pool already fits, and replaced by score
    order at the last depth), then verifies each kept extension once:
    a passing path halts and is frozen for answering, a failing one stays
    live. Backend failures are recorded in the trace and yield an empty
    answer set rather than a crash.
    """
    trace = SearchTrace(question=question)
    trace.add(
        "run_start",
        schema=TRACE_SCHEMA,
        question=question,
        topic_entities=list(topic_entities),
        config={
            "beam_width": search_config.beam_width,
            "max_depth": search_config.max_depth,
            "use_planning": search_config.use_planning,
            "use_deductive_verifier": search_config.use_deductive_verifier,
            "use_beam_search": search_config.use_beam_search,
            "use_last_step_reasoning": search_config.use_last_step_reasoning,
            "adequacy_mode": search_config.adequacy_mode,
            "retriever_mode": retrieval_config.mode,
            "alpha": retrieval_config.alpha,
            "m": retrieval_config.m,
        },
    )
    present = []
    for entity in topic_entities:
        if entity in g.entities:
            present.append(entity)
        else:
            logger.warning("topic entity %r not in graph; skipping", entity)
            trace.add("topic-entity-miss", entity=entity)
    if not present:
        raise TopicEntityError(f"no topic entity of {list(topic_entities)!r} exists in the graph")

    drainer = _CallDrainer(client)
    try:
        return _search(
            question, present, g, idx, emb, client, search_config, retrieval_config,
            demonstrations, trace, drainer,
        )
    except LlmError as exc:
        logger.error("backend failure during search: %s", exc)
        trace.add_calls(drainer.drain())
        trace.add("backend-failure", error=str(exc), error_type=type(exc).__name__)
        answers = AnswerSet(reason=REASON_BACKEND_FAILURE)
        trace.add("final", answers=[], reason=REASON_BACKEND_FAILURE)
        return answers, trace


class _CallDrainer:
    """Hands out the client's call records made since the last drain, so a
    client that served earlier questions does not leak old calls into this
    trace."""

    def __init__(self, client: LlmClient):
        self.client = client
        self.cursor = len(client.call_records)

    def drain(self) -> list[CallRecord]:
        records = self.client.call_records[self.cursor :]
        self.cursor = len(self.client.call_records)
        return records


def _search(
    question: str,
    seeds: list[str],
    g: KnowledgeGraph,
    idx: EmbeddingIndex,
    emb: Embedder,
    client: LlmClient,
    config: SearchConfig,
    retrieval: RetrievalConfig,
    demonstrations: Mapping[str, Sequence[str]] | None,
    trace: SearchTrace,
    drainer: "_CallDrainer",
) -> tuple[AnswerSet, SearchTrace]:
    k = config.effective_width

    if config.use_planning:
        plan = generate_plan(
            client, question, demonstrations=demonstrations,
            demo_count=config.demo_count, retries=config.json_retries,
        )
    else:
        plan = replace(degraded_plan(question), degraded=False)
    trace.add_calls(drainer.drain())
    trace.add(
        "plan",
        keywords=list(plan.keywords),
        planning_steps=list(plan.planning_steps),
        declarative_statement=plan.declarative_statement,
        degraded=plan.degraded,
    )
    query_vec = emb.embed(KeywordSet(plan.keywords).joined_text)

    live = [Hypothesis(path=ReasoningPath(start=e), selection_rank=i) for i, e in enumerate(seeds)]
    halted: list[Hypothesis] = []

    for depth in range(1, config.max_depth + 1):
        if not live:
            break
        pool: list[tuple[Hypothesis, ScoredCandidate]] = []
        for hyp in live:
            ranked = candidate_steps(
                g, idx, emb, query_vec, hyp.path.terminal_entity, retrieval
            )
            if not ranked:
                trace.add(
                    "prune",
                    depth=depth,
                    path=hyp.path.to_arrow(),
                    reason=PRUNE_NO_CANDIDATES,
                )
            for cand in ranked:
                pool.append((hyp, cand))
        pool.sort(key=lambda hc: (-hc[1].total_score, hc[0].path.to_arrow(), hc[1].step.relation, hc[1].step.entity))
        trace.add(
            "depth",
            depth=depth,
            live=[h.path.to_arrow() for h in live],
            pool=[
                {"path": h.path.extend(c.step).to_arrow(), "score": round(c.total_score, 12)}
                for h, c in pool
            ],
        )
        if not pool:
            live = []
            break

        if depth == config.max_depth:
            chosen, mode = list(pool[:k]), SELECT_FINAL_DEPTH
        else:
            chosen, mode = select_steps(
                client, question, plan, pool, k, config, demonstrations
            )
        trace.add_calls(drainer.drain())
        if len(pool) > k:
            kept = {(hyp.path.to_arrow(), cand.step) for hyp, cand in chosen}
            for hyp, cand in pool:
                if (hyp.path.to_arrow(), cand.step) not in kept:
                    trace.add(
                        "prune",
                        depth=depth,
                        path=hyp.path.extend(cand.step).to_arrow(),
                        reason=PRUNE_WIDTH_TRUNCATION,
                    )
        trace.add(
            "selection",
            depth=depth,
            mode=mode,
            selected=[h.path.extend(c.step).to_arrow() for h, c in chosen],
        )

        next_live: list[Hypothesis] = []
        for rank, (hyp, cand) in enumerate(chosen):
            new_path = hyp.path.extend(cand.step)
            report = validate_path(g, new_path)
            if not report.all_valid:
                logger.error("candidate produced an invalid path %s; pruning", new_path.to_arrow())
                trace.add(
                    "prune", depth=depth, path=new_path.to_arrow(), reason=PRUNE_INVALID_STEP
                )
                continue
            new_hyp = Hypothesis(path=new_path, selection_rank=rank)
            if config.use_deductive_verifier:
                if config.adequacy_mode:
                    deduced = adequacy_verify(
                        client, question, new_path, config, demonstrations
                    )
                else:
                    deduced = verify_global(
                        client, question, plan.declarative_statement, new_path,
                        config, demonstrations,
                    )
                trace.add_calls(drainer.drain())
                trace.add(
                    "verdict",
                    depth=depth,
                    path=new_path.to_arrow(),
                    halted=deduced,
                    mode="adequacy" if config.adequacy_mode else "deductive",
                )
                if deduced:
                    halted.append(replace(new_hyp, halted=True))
                    continue
            next_live.append(new_hyp)
        live = next_live

    if config.use_deductive_verifier:
        answer_hypotheses = halted
    else:
        answer_hypotheses = live
    answer_hypotheses = sorted(
        answer_hypotheses, key=lambda h: (h.selection_rank, h.path.to_arrow())
    )
    answers = final_reason(
        client,
        question,
        [h.path for h in answer_hypotheses],
        config,
        demonstrations,
    )
    trace.add_calls(drainer.drain())
    trace.add(
        "final",
        answers=list(answers.answers),
        reason=answers.reason,
        supporting_paths=[p.to_arrow() for p in answers.supporting_paths],
        indirect_paths=[p.to_arrow() for p in answers.indirect_paths],
        halted_depths=[h.path.depth for h in answer_hypotheses],
    )
    return answers, trace
