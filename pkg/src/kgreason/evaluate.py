"""Dataset loading, answer metrics, and batch evaluation.

Answer matching is intentionally forgiving about surface form: predictions
and gold answers are lowercased, trimmed, whitespace-collapsed, and
underscores count as spaces. Normalization lives here and nowhere else.

Batch evaluation isolates per-question faults: a question that errors scores
zero and lands in a failure tally while the rest of the batch proceeds. All
aggregates are macro-averages recomputable from the per-question records.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence, Union

from .embedding import Embedder, EmbeddingIndex
from .kg import KnowledgeGraph, PathParseError, ReasoningPath, validate_path
from .llm import LlmBackend, LlmClient, UsageLedger
from .pathrag import KeywordSet, RetrievalConfig, coverage_ratio, retrieved_steps_along_path
from .search import (
    REASON_BACKEND_FAILURE,
    AnswerSet,
    SearchConfig,
    SearchTrace,
    run_dvbs,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "kgreason-report/1"

_WS_RE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Canonical answer form: lowercase, underscores as spaces, surrounding
    whitespace trimmed, internal whitespace collapsed. Idempotent."""
    return _WS_RE.sub(" ", text.replace("_", " ").lower()).strip()


def _normalized_set(items: Iterable[str]) -> set[str]:
    return {normalize(item) for item in items if normalize(item)}


class DatasetError(ValueError):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class QARecord:
    id: str
    question: str
    answers: tuple[str, ...]
    topic_entities: tuple[str, ...]
    ground_truth_paths: tuple[ReasoningPath, ...] = ()

    def __post_init__(self):
        if not self.answers:
            raise ValueError("answers must be non-empty")
        if not self.topic_entities:
            raise ValueError("topic_entities must be non-empty")


def load_dataset(source: Union[str, IO[str]]) -> list[QARecord]:
    """Parse a JSON-lines dataset; every schema violation reports its line."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    records = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc}", line_number)
        if not isinstance(raw, dict):
            raise DatasetError("record is not a JSON object", line_number)
        records.append(_parse_record(raw, line_number))
    return records


def _parse_record(raw: dict, line_number: int) -> QARecord:
    for field_name in ("id", "question", "answers", "topic_entities"):
        if field_name not in raw:
            raise DatasetError(f"missing field {field_name!r}", line_number)
    record_id = raw["id"]
    if not isinstance(record_id, (str, int)):
        raise DatasetError("field 'id' must be a string or integer", line_number)
    question = raw["question"]
    if not isinstance(question, str) or not question.strip():
        raise DatasetError("field 'question' must be a non-empty string", line_number)
    answers = _string_list(raw, "answers", line_number)
    topic_entities = _string_list(raw, "topic_entities", line_number)
    gt_raw = raw.get("ground_truth_paths", [])
    if not isinstance(gt_raw, list):
        raise DatasetError("field 'ground_truth_paths' must be an array", line_number)
    paths = []
    for text in gt_raw:
        if not isinstance(text, str):
            raise DatasetError("ground-truth paths must be strings", line_number)
        try:
            paths.append(ReasoningPath.from_arrow(text))
        except PathParseError as exc:
            raise DatasetError(f"bad ground-truth path: {exc}", line_number)
    return QARecord(
        id=str(record_id),
        question=question,
        answers=answers,
        topic_entities=topic_entities,
        ground_truth_paths=tuple(paths),
    )


def _string_list(raw: dict, field_name: str, line_number: int) -> tuple[str, ...]:
    value = raw[field_name]
    if (
        not isinstance(value, list)
        or not value
        or not all(isinstance(v, str) and v.strip() for v in value)
    ):
        raise DatasetError(
            f"field {field_name!r} must be a non-empty array of non-empty strings",
            line_number,
        )
    return tuple(value)


# --- Answer metrics ---------------------------------------------------------

def hits_at_1(predicted: AnswerSet, gold: Iterable[str]) -> int:
    """1 iff the top-ranked predicted answer matches any gold answer after
    normalization; empty predictions score 0."""
    gold_set = _normalized_set(gold)
    if not gold_set:
        raise ValueError("gold answers must be non-empty")
    top = predicted.top_answer
    if top is None:
        return 0
    return 1 if normalize(top) in gold_set else 0


def f1_score(predicted: Iterable[str], gold: Iterable[str]) -> float:
    """Set F1 (2PR / (P+R)) over normalized answer sets."""
    gold_set = _normalized_set(gold)
    if not gold_set:
        raise ValueError("gold answers must be non-empty")
    pred_set = _normalized_set(predicted)
    if not pred_set:
        return 0.0
    overlap = len(pred_set & gold_set)
    # 2PR/(P+R) reduced to counts; one division keeps round values exact.
    return 2 * overlap / (len(pred_set) + len(gold_set))


def accuracy(predicted: AnswerSet, gold: Iterable[str]) -> int:
    """1 iff the normalized predicted set intersects the gold set."""
    gold_set = _normalized_set(gold)
    if not gold_set:
        raise ValueError("gold answers must be non-empty")
    return 1 if _normalized_set(predicted.answers) & gold_set else 0


def validity_ratio(g: KnowledgeGraph, paths: Iterable[ReasoningPath]) -> float | None:
    """Fraction of steps across all paths that exist in the graph; None when
    there are no steps to judge."""
    valid = 0
    total = 0
    for path in paths:
        report = validate_path(g, path)
        valid += report.valid_step_count
        total += report.total_step_count
    if total == 0:
        return None
    return valid / total


def avg_depth(depths_per_question: Sequence[Sequence[int]]) -> float | None:
    """Per-question mean path depth, macro-averaged over questions that
    produced at least one path."""
    means = [sum(ds) / len(ds) for ds in depths_per_question if ds]
    if not means:
        return None
    return sum(means) / len(means)


# --- Batch evaluation -------------------------------------------------------

@dataclass(frozen=True)
class QuestionResult:
    record_id: str
    question: str
    answers: tuple[str, ...]
    paths: tuple[str, ...]
    depths: tuple[int, ...]
    hits_at_1: int
    f1: float
    accuracy: int
    coverage: float | None
    valid_steps: int
    total_steps: int
    verdict_yes: int
    verdict_no: int
    llm_calls: int
    prompt_tokens: int
    completion_tokens: int
    wall_time: float
    failed: bool = False
    failure: str | None = None

    def to_json(self) -> dict:
        return {
            "id": self.record_id,
            "question": self.question,
            "answers": list(self.answers),
            "paths": list(self.paths),
            "depths": list(self.depths),
            "hits_at_1": self.hits_at_1,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "coverage": self.coverage,
            "valid_steps": self.valid_steps,
            "total_steps": self.total_steps,
            "verdict_yes": self.verdict_yes,
            "verdict_no": self.verdict_no,
            "llm_calls": self.llm_calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "wall_time": self.wall_time,
            "failed": self.failed,
            "failure": self.failure,
        }


@dataclass(frozen=True)
class RunReport:
    results: tuple[QuestionResult, ...]
    aggregates: dict
    config: dict

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config": self.config,
            "aggregates": self.aggregates,
            "results": [r.to_json() for r in self.results],
        }

    def to_json_text(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"


def compute_aggregates(results: Sequence[QuestionResult]) -> dict:
    """Aggregate per-question records; failed questions score zero on answer
    metrics and are excluded from path-based ones."""
    n = len(results)
    if n == 0:
        raise ValueError("cannot aggregate an empty result list")
    depth_mean = avg_depth([r.depths for r in results])
    coverages = [r.coverage for r in results if r.coverage is not None]
    total_steps = sum(r.total_steps for r in results)
    valid_steps = sum(r.valid_steps for r in results)
    return {
        "questions": n,
        "failures": sum(1 for r in results if r.failed),
        "hits_at_1": sum(r.hits_at_1 for r in results) / n,
        "f1": sum(r.f1 for r in results) / n,
        "accuracy": sum(r.accuracy for r in results) / n,
        "avg_depth": depth_mean,
        "coverage_ratio": sum(coverages) / len(coverages) if coverages else None,
        "validity_ratio": (valid_steps / total_steps) if total_steps else None,
        "avg_llm_calls": sum(r.llm_calls for r in results) / n,
        "avg_prompt_tokens": sum(r.prompt_tokens for r in results) / n,
        "avg_completion_tokens": sum(r.completion_tokens for r in results) / n,
        "avg_runtime": sum(r.wall_time for r in results) / n,
    }


def _question_coverage(
    g: KnowledgeGraph,
    idx: EmbeddingIndex,
    emb: Embedder,
    keywords: Sequence[str],
    record: QARecord,
    retrieval_config: RetrievalConfig,
) -> float | None:
    if not record.ground_truth_paths or not keywords:
        return None
    query_vec = emb.embed(KeywordSet(tuple(keywords)).joined_text)
    ratios = []
    for gt in record.ground_truth_paths:
        sets = retrieved_steps_along_path(
            g, idx, emb, query_vec, " ".join(keywords), gt, retrieval_config
        )
        ratios.append(coverage_ratio(sets, gt))
    return sum(ratios) / len(ratios)


def _trace_plan_keywords(trace: SearchTrace) -> list[str]:
    for event in trace.events:
        if event.get("event") == "plan":
            return list(event.get("keywords", []))
    return []


def _verdict_counts(trace: SearchTrace) -> tuple[int, int]:
    yes = no = 0
    for event in trace.events:
        if event.get("event") == "verdict":
            if event.get("halted"):
                yes += 1
            else:
                no += 1
    return yes, no


def evaluate_question(
    record: QARecord,
    g: KnowledgeGraph,
    idx: EmbeddingIndex,
    emb: Embedder,
    backend: LlmBackend,
    search_config: SearchConfig,
    retrieval_config: RetrievalConfig,
    demonstrations: Mapping[str, Sequence[str]] | None = None,
) -> tuple[QuestionResult, SearchTrace | None]:
    """Run one question with a fresh ledger and score the outcome."""
    ledger = UsageLedger()
    client = LlmClient(backend, ledger=ledger)
    started = time.monotonic()
    try:
        answers, trace = run_dvbs(
            record.question,
            record.topic_entities,
            g,
            idx,
            emb,
            client,
            search_config,
            retrieval_config,
            demonstrations,
        )
    except Exception as exc:
        logger.warning("question %s failed: %s", record.id, exc)
        usage = ledger.snapshot()
        return (
            QuestionResult(
                record_id=record.id,
                question=record.question,
                answers=(),
                paths=(),
                depths=(),
                hits_at_1=0,
                f1=0.0,
                accuracy=0,
                coverage=None,
                valid_steps=0,
                total_steps=0,
                verdict_yes=0,
                verdict_no=0,
                llm_calls=usage["llm_calls"],
                prompt_tokens=usage["prompt_tokens"],
                completion_tokens=usage["completion_tokens"],
                wall_time=time.monotonic() - started,
                failed=True,
                failure=f"{type(exc).__name__}: {exc}",
            ),
            None,
        )
    wall = time.monotonic() - started
    usage = ledger.snapshot()
    failed = answers.reason == REASON_BACKEND_FAILURE
    emitted = tuple(answers.supporting_paths) + tuple(answers.indirect_paths)
    valid = sum(validate_path(g, p).valid_step_count for p in emitted)
    total = sum(p.depth for p in emitted)
    yes, no = _verdict_counts(trace)
    coverage = None
    if not failed:
        coverage = _question_coverage(
            g, idx, emb, _trace_plan_keywords(trace), record, retrieval_config
        )
    return (
        QuestionResult(
            record_id=record.id,
            question=record.question,
            answers=tuple(answers.answers) if not failed else (),
            paths=tuple(p.to_arrow() for p in emitted),
            depths=tuple(p.depth for p in emitted),
            hits_at_1=0 if failed else hits_at_1(answers, record.answers),
            f1=0.0 if failed else f1_score(answers.answers, record.answers),
            accuracy=0 if failed else accuracy(answers, record.answers),
            coverage=coverage,
            valid_steps=valid,
            total_steps=total,
            verdict_yes=yes,
            verdict_no=no,
            llm_calls=usage["llm_calls"],
            prompt_tokens=usage["prompt_tokens"],
            completion_tokens=usage["completion_tokens"],
            wall_time=wall,
            failed=failed,
            failure=answers.reason if failed else None,
        ),
        trace,
    )


def run_experiment(
    dataset: Sequence[QARecord],
    g: KnowledgeGraph,
    idx: EmbeddingIndex,
    emb: Embedder,
    backend: LlmBackend,
    search_config: SearchConfig = SearchConfig(),
    retrieval_config: RetrievalConfig = RetrievalConfig(),
    demonstrations: Mapping[str, Sequence[str]] | None = None,
    parallelism: int = 1,
) -> RunReport:
    """Evaluate a dataset; per-question failures never abort the batch, and
    the per-question record order always follows the dataset order."""
    if not dataset:
        raise ValueError("no records in dataset")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(record: QARecord) -> QuestionResult:
        result, _ = evaluate_question(
            record, g, idx, emb, backend, search_config, retrieval_config, demonstrations
        )
        return result

    if parallelism == 1 or len(dataset) == 1:
        results = [one(r) for r in dataset]
    else:
        workers = min(parallelism, getattr(backend, "concurrency_limit", 1), len(dataset))
        workers = max(workers, 1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, dataset))
    config = {
        "beam_width": search_config.beam_width,
        "max_depth": search_config.max_depth,
        "adequacy_mode": search_config.adequacy_mode,
        "use_planning": search_config.use_planning,
        "use_deductive_verifier": search_config.use_deductive_verifier,
        "use_beam_search": search_config.use_beam_search,
        "use_last_step_reasoning": search_config.use_last_step_reasoning,
        "retriever_mode": retrieval_config.mode,
        "alpha": retrieval_config.alpha,
        "m": retrieval_config.m,
    }
    return RunReport(
        results=tuple(results),
        aggregates=compute_aggregates(results),
        config=config,
    )
