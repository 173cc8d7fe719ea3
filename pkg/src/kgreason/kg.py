"""Triple store: load, index and query a directed labeled graph, and check
reasoning paths against it.

The graph is immutable once loaded; every read operation is safe to share
across threads.
"""

from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional

MISSING_TRIPLE = "missing-triple"
FORMAT_ERROR = "format-error"


class TripleParseError(ValueError):
    """Raised when a triple file line cannot be parsed."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class PathParseError(ValueError):
    """Raised when an arrow-format path string cannot be parsed."""


@dataclass(frozen=True)
class Triple:
    """A directed labeled edge: head --relation--> tail."""

    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            if not getattr(self, name):
                raise ValueError(f"triple field {name!r} must be non-empty")


@dataclass(frozen=True)
class ReasoningStep:
    """One hop: a (relation, entity) pair extending a path."""

    relation: str
    entity: str


@dataclass(frozen=True)
class ReasoningPath:
    """A start entity plus an ordered sequence of steps."""

    start: str
    steps: tuple[ReasoningStep, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.steps)

    @property
    def terminal_entity(self) -> str:
        """Last entity on the path (the start for an empty path)."""
        return self.steps[-1].entity if self.steps else self.start

    def extend(self, step: ReasoningStep) -> "ReasoningPath":
        return ReasoningPath(self.start, self.steps + (step,))

    def entities(self) -> tuple[str, ...]:
        return (self.start,) + tuple(s.entity for s in self.steps)

    def to_arrow(self) -> str:
        """Render as ``E0 -> r1 -> E1 -> r2 -> E2``."""
        parts = [self.start]
        for step in self.steps:
            parts.extend([step.relation, step.entity])
        return " -> ".join(parts)

    @classmethod
    def from_arrow(cls, text: str) -> "ReasoningPath":
        """Parse the arrow format produced by :meth:`to_arrow`."""
        parts = [p.strip() for p in text.split("->")]
        if not parts or any(not p for p in parts):
            raise PathParseError(f"empty segment in path: {text!r}")
        if len(parts) % 2 == 0:
            raise PathParseError(
                f"path must alternate entity/relation and end on an entity: {text!r}"
            )
        steps = tuple(
            ReasoningStep(relation=parts[i], entity=parts[i + 1])
            for i in range(1, len(parts), 2)
        )
        return cls(start=parts[0], steps=steps)


@dataclass(frozen=True)
class ValidityReport:
    """Per-step validity of a path checked against a graph."""

    valid_step_count: int
    total_step_count: int
    first_invalid_index: Optional[int] = None
    errors: tuple[tuple[int, str], ...] = ()  # (step index, error kind)

    def __post_init__(self):
        if self.valid_step_count > self.total_step_count:
            raise ValueError("valid_step_count cannot exceed total_step_count")

    @property
    def all_valid(self) -> bool:
        return self.valid_step_count == self.total_step_count


@dataclass
class KnowledgeGraph:
    """Directed labeled edges with an adjacency index.

    Treat instances as immutable after construction.
    """

    entities: set[str] = field(default_factory=set)
    relations: set[str] = field(default_factory=set)
    triples: set[Triple] = field(default_factory=set)
    adjacency: dict[str, set[tuple[str, str]]] = field(default_factory=dict)

    @classmethod
    def from_triples(cls, triples: Iterable[Triple]) -> "KnowledgeGraph":
        g = cls()
        for t in triples:
            g._add(t)
        return g

    def _add(self, t: Triple) -> None:
        if t in self.triples:
            return
        self.triples.add(t)
        self.entities.add(t.head)
        self.entities.add(t.tail)
        self.relations.add(t.relation)
        self.adjacency.setdefault(t.head, set()).add((t.relation, t.tail))

    def __len__(self) -> int:
        return len(self.triples)


def load_triples(source: IO[bytes] | IO[str] | Iterable[str]) -> KnowledgeGraph:
    """Parse a tab-separated triple stream into a graph.

    One ``head<TAB>relation<TAB>tail`` triple per line; ``#`` lines are
    comments and blank lines are skipped. Duplicates are deduplicated and
    line order does not affect the result. An empty stream yields an empty
    graph. Malformed lines raise :class:`TripleParseError` with the line
    number.
    """
    g = KnowledgeGraph()
    for line_number, raw in enumerate(_iter_lines(source), start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise TripleParseError(
                f"expected 3 tab-separated fields, got {len(fields)}", line_number
            )
        head, relation, tail = (f.strip() for f in fields)
        if not head or not relation or not tail:
            raise TripleParseError("empty field after normalization", line_number)
        g._add(Triple(head, relation, tail))
    return g


def _iter_lines(source: IO[bytes] | IO[str] | Iterable[str]) -> Iterator[str]:
    if isinstance(source, io.TextIOBase):
        yield from source
        return
    for item in source:
        if isinstance(item, bytes):
            yield item.decode("utf-8")
        else:
            yield item


def serialize(g: KnowledgeGraph) -> str:
    """Inverse of :func:`load_triples` on the triple set; lines are sorted."""
    lines = sorted(f"{t.head}\t{t.relation}\t{t.tail}" for t in g.triples)
    return "".join(line + "\n" for line in lines)


def neighbors(g: KnowledgeGraph, entity: str) -> set[tuple[str, str]]:
    """All (relation, entity) pairs one hop out from ``entity``.

    Unknown entities have an empty neighborhood.
    """
    return set(g.adjacency.get(entity, ()))


def contains_triple(g: KnowledgeGraph, head: str, relation: str, tail: str) -> bool:
    return Triple(head, relation, tail) in g.triples if head and relation and tail else False


def validate_path(g: KnowledgeGraph, path: ReasoningPath) -> ValidityReport:
    """Check every hop of ``path`` against the graph.

    Step k is valid iff (e_{k-1}, r_k, e_k) is a triple, with e_0 the start
    entity. All steps are classified, including those after the first
    failure; an empty path is vacuously valid.
    """
    errors: list[tuple[int, str]] = []
    valid = 0
    current = path.start
    for k, step in enumerate(path.steps):
        if contains_triple(g, current, step.relation, step.entity):
            valid += 1
        else:
            errors.append((k, MISSING_TRIPLE))
        current = step.entity
    return ValidityReport(
        valid_step_count=valid,
        total_step_count=len(path.steps),
        first_invalid_index=errors[0][0] if errors else None,
        errors=tuple(errors),
    )


def subgraph(g: KnowledgeGraph, seeds: set[str], hops: int) -> KnowledgeGraph:
    """Triples reachable from ``seeds`` by at most ``hops`` directed
    head-to-tail traversals (breadth-first)."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    collected: set[Triple] = set()
    visited: set[str] = set()
    frontier = deque((e, 0) for e in sorted(seeds))
    while frontier:
        entity, depth = frontier.popleft()
        if entity in visited or depth >= hops:
            continue
        visited.add(entity)
        for relation, tail in g.adjacency.get(entity, ()):
            collected.add(Triple(entity, relation, tail))
            if tail not in visited:
                frontier.append((tail, depth + 1))
    return KnowledgeGraph.from_triples(collected)
