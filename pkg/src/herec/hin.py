"""Typed heterogeneous graph, schema checks, meta-paths and rating ingestion."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, TextIO


class DataError(ValueError):
    """Input data violates a format or schema constraint."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class NetworkSchema:
    node_types: frozenset
    relations: frozenset  # canonical (A, B) tuples, one orientation each

    def __init__(self, node_types: Iterable[str], relations: Iterable[Iterable[str]]):
        types = list(node_types)
        if any(not t for t in types):
            raise DataError("node type codes must be non-empty")
        if len(set(types)) != len(types):
            raise DataError("duplicate node type code in schema")
        rels = set()
        for rel in relations:
            a, b = tuple(rel)
            if a not in types or b not in types:
                raise DataError(f"relation {a}-{b} uses an undeclared node type")
            rels.add((a, b))
        if len(types) + len(rels) <= 2:
            raise DataError("schema is not heterogeneous: need |types| + |relations| > 2")
        object.__setattr__(self, "node_types", frozenset(types))
        object.__setattr__(self, "relations", frozenset(rels))

    def allows(self, a: str, b: str) -> bool:
        return (a, b) in self.relations or (b, a) in self.relations

    @classmethod
    def from_json(cls, fh: TextIO) -> "NetworkSchema":
        try:
            data = json.load(fh)
            return cls(data["node_types"], data["relations"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed schema file: {exc}") from exc

    def to_json(self) -> dict:
        return {
            "node_types": sorted(self.node_types),
            "relations": [list(r) for r in sorted(self.relations)],
        }


@dataclass
class HinGraph:
    """Undirected typed graph. Immutable by convention once loaded."""

    schema: NetworkSchema
    node_type: dict = field(default_factory=dict)  # node id -> type code
    adjacency: dict = field(default_factory=dict)  # (node id, type code) -> sorted tuple of ids
    n_edges: int = 0

    def nodes_of_type(self, t: str) -> list:
        return sorted(v for v, vt in self.node_type.items() if vt == t)

    def edges(self):
        """Yield each undirected edge once, as (smaller id, larger id)."""
        for (v, _), nbrs in self.adjacency.items():
            for x in nbrs:
                if v < x:
                    yield v, x

    def with_edges(self, extra: Iterable[tuple], drop: tuple | None = None) -> "HinGraph":
        """Copy of the graph with additional (validated) edges.

        ``drop`` names a pair of node types whose existing edges are left out.
        """
        builder = _GraphBuilder(self.schema)
        for v, t in self.node_type.items():
            builder.add_node(v, t)
        drop = set(drop) if drop else None
        for a, b in self.edges():
            if drop is not None and {self.node_type[a], self.node_type[b]} == drop:
                continue
            builder.add_edge(a, b)
        for a, b in extra:
            builder.add_edge(a, b)
        return builder.build()


class _GraphBuilder:
    def __init__(self, schema: NetworkSchema):
        self.schema = schema
        self.node_type: dict = {}
        self.adj: dict = defaultdict(set)
        self.edge_set: set = set()

    def add_node(self, v: str, t: str, line: int | None = None):
        if t not in self.schema.node_types:
            raise DataError(f"unknown node type {t!r} for node {v!r}", line)
        prev = self.node_type.get(v)
        if prev is not None and prev != t:
            raise DataError(f"node {v!r} declared with two types ({prev}, {t})", line)
        self.node_type[v] = t

    def add_edge(self, a: str, b: str, line: int | None = None):
        for v in (a, b):
            if v not in self.node_type:
                raise DataError(f"edge references undeclared node {v!r}", line)
        ta, tb = self.node_type[a], self.node_type[b]
        if not self.schema.allows(ta, tb):
            raise DataError(f"edge {a}-{b} has type pair {ta}-{tb} not in schema", line)
        if a == b:
            raise DataError(f"self-loop on {a!r}", line)
        key = (a, b) if a < b else (b, a)
        if key in self.edge_set:
            return
        self.edge_set.add(key)
        self.adj[(a, tb)].add(b)
        self.adj[(b, ta)].add(a)

    def build(self) -> HinGraph:
        adjacency = {k: tuple(sorted(v)) for k, v in self.adj.items()}
        return HinGraph(self.schema, dict(self.node_type), adjacency, len(self.edge_set))


def _rows(source: TextIO, min_fields: int):
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < min_fields:
            raise DataError(f"expected {min_fields} tab-separated fields, got {len(parts)}", lineno)
        yield lineno, [p.strip() for p in parts]


def load_graph(nodes_source: TextIO, edges_source: TextIO, schema: NetworkSchema) -> HinGraph:
    builder = _GraphBuilder(schema)
    for lineno, (v, t, *_) in _rows(nodes_source, 2):
        builder.add_node(v, t, lineno)
    for lineno, (a, b, *_) in _rows(edges_source, 2):
        builder.add_edge(a, b, lineno)
    return builder.build()


def write_graph(g: HinGraph, nodes_out: TextIO, edges_out: TextIO):
    for v in sorted(g.node_type):
        nodes_out.write(f"{v}\t{g.node_type[v]}\n")
    for a, b in sorted(g.edges()):
        edges_out.write(f"{a}\t{b}\n")


def neighbors_of_type(g: HinGraph, v: str, t: str) -> tuple:
    if v not in g.node_type:
        raise KeyError(f"unknown node id {v!r}")
    return g.adjacency.get((v, t), ())


@dataclass(frozen=True)
class MetaPath:
    types: tuple

    @property
    def target(self) -> str:
        return self.types[0]

    @property
    def label(self) -> str:
        # multi-character codes are joined with '-' so the label stays parseable
        if all(len(t) == 1 for t in self.types):
            return "".join(self.types)
        return "-".join(self.types)

    def __str__(self):
        return self.label


def _split_codes(text: str, schema: NetworkSchema) -> list:
    text = text.strip()
    if "-" in text:
        return [c.strip() for c in text.split("-")]
    # greedy longest-match tokenisation over the schema's codes (handles "Ci", "Ca")
    codes = sorted(schema.node_types, key=len, reverse=True)
    out, pos = [], 0
    while pos < len(text):
        for c in codes:
            if text.startswith(c, pos):
                out.append(c)
                pos += len(c)
                break
        else:
            raise DataError(f"unknown type code at {text[pos:]!r} in meta-path {text!r}")
    return out


def parse_meta_path(text: str, schema: NetworkSchema, target_type: str) -> MetaPath:
    types = _split_codes(text, schema)
    for t in types:
        if t not in schema.node_types:
            raise DataError(f"unknown type code {t!r} in meta-path {text!r}")
    if len(types) < 2:
        raise DataError(f"meta-path {text!r} needs at least two types")
    for a, b in zip(types, types[1:]):
        if not schema.allows(a, b):
            raise DataError(f"meta-path {text!r}: {a}-{b} is not a schema relation")
    if types[0] != types[-1]:
        raise DataError(f"meta-path {text!r} must start and end with the same type")
    if types[0] != target_type:
        raise DataError(f"meta-path {text!r} starts with {types[0]}, expected {target_type}")
    return MetaPath(tuple(types))


def load_meta_paths(source: TextIO, schema: NetworkSchema, user_type: str, item_type: str) -> dict:
    """Read a sectioned meta-path file into {"user": [...], "item": [...]}."""
    out = {"user": [], "item": []}
    section = None
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in out:
                raise DataError(f"unknown section {line!r}", lineno)
            continue
        if section is None:
            raise DataError("meta-path listed before any [user]/[item] section", lineno)
        target = user_type if section == "user" else item_type
        try:
            out[section].append(parse_meta_path(line, schema, target))
        except DataError as exc:
            raise DataError(str(exc), lineno) from None
    return out


@dataclass(frozen=True)
class RatingRecord:
    user: str
    item: str
    rating: float


@dataclass
class RatingDataset:
    records: list
    scale: tuple

    def __post_init__(self):
        lo, hi = self.scale
        if not lo < hi:
            raise DataError(f"bad rating scale {self.scale}")
        seen = set()
        for rec in self.records:
            if not lo <= rec.rating <= hi:
                raise DataError(f"rating {rec.rating} outside scale {self.scale}")
            key = (rec.user, rec.item)
            if key in seen:
                raise DataError(f"duplicate rating for {key}")
            seen.add(key)

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "RatingDataset":
        return RatingDataset([self.records[k] for k in indices], self.scale)

    def mean(self) -> float:
        if not self.records:
            return 0.5 * (self.scale[0] + self.scale[1])
        return sum(r.rating for r in self.records) / len(self.records)

    def users(self) -> list:
        return sorted({r.user for r in self.records})

    def items(self) -> list:
        return sorted({r.item for r in self.records})

    def check_types(self, g: HinGraph, user_type: str, item_type: str):
        for rec in self.records:
            if g.node_type.get(rec.user) != user_type:
                raise DataError(f"rating user {rec.user!r} is not a {user_type} node")
            if g.node_type.get(rec.item) != item_type:
                raise DataError(f"rating item {rec.item!r} is not a {item_type} node")


def load_ratings(source: TextIO, scale: tuple) -> RatingDataset:
    lo, hi = scale
    records, seen = [], set()
    for lineno, (u, i, r, *_) in _rows(source, 3):
        try:
            value = float(r)
        except ValueError:
            raise DataError(f"rating {r!r} is not a number", lineno) from None
        if not lo <= value <= hi:
            raise DataError(f"rating {value} outside scale [{lo}, {hi}]", lineno)
        if (u, i) in seen:
            raise DataError(f"duplicate rating for ({u}, {i})", lineno)
        seen.add((u, i))
        records.append(RatingRecord(u, i, value))
    return RatingDataset(records, (lo, hi))


def write_ratings(ds: RatingDataset, out: TextIO):
    for rec in ds.records:
        out.write(f"{rec.user}\t{rec.item}\t{rec.rating!r}\n")
