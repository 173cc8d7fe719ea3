"""Knowledge-graph question answering with verification-gated beam search."""

from .embedding import (
    EmbeddingIndex,
    HashingEmbedder,
    build_index,
    cosine,
    load_index,
    save_index,
    top_m_entities,
    top_m_relations,
)
from .evaluate import (
    QARecord,
    RunReport,
    accuracy,
    avg_depth,
    f1_score,
    hits_at_1,
    load_dataset,
    normalize,
    run_experiment,
    validity_ratio,
)
from .kg import (
    KnowledgeGraph,
    ReasoningPath,
    ReasoningStep,
    Triple,
    load_triples,
    neighbors,
    subgraph,
    validate_path,
)
from .llm import (
    DecodeParams,
    LlmClient,
    MockBackend,
    Plan,
    ReplayBackend,
    ScriptedBackend,
    UsageLedger,
    WireBackend,
    WireConfig,
    generate_plan,
)
from .pathrag import (
    KeywordSet,
    RetrievalConfig,
    ScoredCandidate,
    base_score,
    candidate_steps,
    coverage_ratio,
    kaping_retrieve,
    lookahead_score,
    retrieve_vocab,
)
from .search import (
    AnswerSet,
    Hypothesis,
    SearchConfig,
    SearchTrace,
    call_budget,
    run_dvbs,
)

__version__ = "0.1.0"

__all__ = [
    "AnswerSet",
    "DecodeParams",
    "EmbeddingIndex",
    "HashingEmbedder",
    "Hypothesis",
    "KeywordSet",
    "KnowledgeGraph",
    "LlmClient",
    "MockBackend",
    "Plan",
    "QARecord",
    "ReasoningPath",
    "ReasoningStep",
    "ReplayBackend",
    "RetrievalConfig",
    "RunReport",
    "ScoredCandidate",
    "ScriptedBackend",
    "SearchConfig",
    "SearchTrace",
    "Triple",
    "UsageLedger",
    "WireBackend",
    "WireConfig",
    "accuracy",
    "avg_depth",
    "base_score",
    "build_index",
    "call_budget",
    "candidate_steps",
    "cosine",
    "coverage_ratio",
    "f1_score",
    "generate_plan",
    "hits_at_1",
    "kaping_retrieve",
    "load_dataset",
    "load_index",
    "load_triples",
    "lookahead_score",
    "neighbors",
    "normalize",
    "retrieve_vocab",
    "run_dvbs",
    "run_experiment",
    "save_index",
    "subgraph",
    "top_m_entities",
    "top_m_relations",
    "validate_path",
    "validity_ratio",
]
