"""Activity-graph query language: vocabulary, parsing, validation, canonical serialization.

A query is a connected graph whose nodes describe objects (class plus
attribute concepts) and whose edges carry one or more pairwise
relationships. Documents are JSON:

    {"nodes": [{"id": "p1", "class": "person", "attributes": ["speed:moving"]}],
     "edges": [{"a": "p1", "b": "v1", "rel": ["near"]}]}

Serialization is byte-deterministic (sorted keys, compact separators,
trailing newline) so committed fixtures can be diffed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

CLASSES = ("person", "object", "vehicle")
ATTRIBUTE_BASES = ("size", "appearing", "disappearing", "speed")
RELATIONSHIPS = ("same_entity", "near", "not_near", "later")

# "later" reads a-before-b and lives on ordered endpoints; everything else
# is symmetric.
DIRECTIONAL_RELATIONSHIPS = ("later",)


class QueryParseError(ValueError):
    """Document is not well-formed (JSON syntax or schema shape)."""


class QueryValidationError(ValueError):
    """Document parsed but violates graph invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def attribute_base(token: str) -> str:
    return token.split(":", 1)[0]


@dataclass(frozen=True)
class QueryNode:
    node_id: str
    class_name: str
    attributes: tuple[str, ...] = ()


@dataclass(frozen=True)
class QueryEdge:
    a: str
    b: str
    relationships: tuple[str, ...] = ()

    def pair(self) -> frozenset[str]:
        return frozenset((self.a, self.b))


@dataclass(frozen=True)
class ActivityGraph:
    nodes: tuple[QueryNode, ...]
    edges: tuple[QueryEdge, ...] = ()

    def node(self, node_id: str) -> QueryNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def node_ids(self) -> list[str]:
        return [n.node_id for n in self.nodes]


def _canonical(nodes: list[QueryNode], edges: list[QueryEdge]) -> ActivityGraph:
    nodes = sorted(nodes, key=lambda n: n.node_id)
    edges = sorted(edges, key=lambda e: (e.a, e.b))
    return ActivityGraph(tuple(nodes), tuple(edges))


def _merge_duplicate_edges(edges: list[QueryEdge], violations: list[str]) -> list[QueryEdge]:
    # Multiple raw edges on one unordered pair merge into a single edge
    # carrying the union. Orientation is canonical: a < b unless "later"
    # (directional) pins it; two "later" edges in opposite directions on
    # the same pair are a violation.
    groups: dict[frozenset[str], list[QueryEdge]] = {}
    order: list[frozenset[str]] = []
    for e in edges:
        key = e.pair()
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(e)

    out: list[QueryEdge] = []
    for key in order:
        group = groups[key]
        directed = [e for e in group if "later" in e.relationships]
        if directed:
            a, b = directed[0].a, directed[0].b
            if any((e.a, e.b) != (a, b) for e in directed[1:]):
                violations.append(
                    f"edge ({a},{b}): conflicting direction for 'later' on duplicate pair"
                )
                continue
        else:
            a, b = min(key), max(key)
        rels = sorted({r for e in group for r in e.relationships})
        out.append(QueryEdge(a, b, tuple(rels)))
    return out


def validate(graph: ActivityGraph) -> list[str]:
    """Check every graph invariant; returns [] iff the graph is valid.

    Violations are data, not exceptions: each entry names the offending
    node/edge and the rule it breaks.
    """
    violations: list[str] = []
    if not graph.nodes:
        return ["graph has no nodes"]

    seen_ids: set[str] = set()
    for n in graph.nodes:
        if n.node_id in seen_ids:
            violations.append(f"node '{n.node_id}': duplicate node id")
        seen_ids.add(n.node_id)
        if n.class_name not in CLASSES:
            violations.append(f"node '{n.node_id}': unknown class '{n.class_name}'")
        bases: set[str] = set()
        for attr in n.attributes:
            base = attribute_base(attr)
            if base not in ATTRIBUTE_BASES:
                violations.append(f"node '{n.node_id}': unknown attribute '{attr}'")
            if base in bases:
                violations.append(f"node '{n.node_id}': duplicate attribute '{base}'")
            bases.add(base)

    pairs: set[frozenset[str]] = set()
    for e in graph.edges:
        label = f"edge ({e.a},{e.b})"
        if e.a == e.b:
            violations.append(f"{label}: self-edge")
            continue
        for endpoint in (e.a, e.b):
            if endpoint not in seen_ids:
                violations.append(f"{label}: unknown endpoint '{endpoint}'")
        if not e.relationships:
            violations.append(f"{label}: empty relationship set")
        for rel in e.relationships:
            if rel not in RELATIONSHIPS:
                violations.append(f"{label}: unknown relationship '{rel}'")
        if e.pair() in pairs:
            violations.append(f"{label}: duplicate edge for node pair")
        pairs.add(e.pair())

    if not violations:
        reached = {graph.nodes[0].node_id}
        frontier = [graph.nodes[0].node_id]
        adjacency: dict[str, set[str]] = {n.node_id: set() for n in graph.nodes}
        for e in graph.edges:
            adjacency[e.a].add(e.b)
            adjacency[e.b].add(e.a)
        while frontier:
            for nbr in adjacency[frontier.pop()]:
                if nbr not in reached:
                    reached.add(nbr)
                    frontier.append(nbr)
        if len(reached) != len(graph.nodes):
            missing = sorted(set(seen_ids) - reached)
            violations.append(f"disconnected: unreachable nodes {missing}")
    return violations


def from_document(doc: dict) -> ActivityGraph:
    """Build a validated graph from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise QueryParseError("query document must be a JSON object")
    raw_nodes = doc.get("nodes")
    raw_edges = doc.get("edges", [])
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise QueryParseError("'nodes' and 'edges' must be arrays")

    nodes: list[QueryNode] = []
    for i, rn in enumerate(raw_nodes):
        if not isinstance(rn, dict) or "id" not in rn or "class" not in rn:
            raise QueryParseError(f"nodes[{i}]: expected object with 'id' and 'class'")
        attrs = rn.get("attributes", [])
        if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
            raise QueryParseError(f"nodes[{i}]: 'attributes' must be an array of strings")
        nodes.append(QueryNode(str(rn["id"]), str(rn["class"]), tuple(sorted(attrs))))

    edges: list[QueryEdge] = []
    for i, re_ in enumerate(raw_edges):
        if not isinstance(re_, dict) or "a" not in re_ or "b" not in re_:
            raise QueryParseError(f"edges[{i}]: expected object with 'a' and 'b'")
        rels = re_.get("rel", [])
        if not isinstance(rels, list) or not all(isinstance(r, str) for r in rels):
            raise QueryParseError(f"edges[{i}]: 'rel' must be an array of strings")
        edges.append(QueryEdge(str(re_["a"]), str(re_["b"]), tuple(sorted(set(rels)))))

    violations: list[str] = []
    edges = _merge_duplicate_edges(edges, violations)
    graph = _canonical(nodes, edges)
    violations += validate(graph)
    if violations:
        raise QueryValidationError(violations)
    return graph


def parse_activity_graph(document: str) -> ActivityGraph:
    """Parse a JSON query document into a validated ActivityGraph.

    Raises QueryParseError with the character position for syntax errors,
    QueryValidationError (carrying the violation list) for vocabulary or
    structural violations.
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise QueryParseError(
            f"JSON syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    return from_document(doc)


def to_document(graph: ActivityGraph) -> dict:
    return {
        "nodes": [
            {"id": n.node_id, "class": n.class_name, "attributes": sorted(n.attributes)}
            for n in sorted(graph.nodes, key=lambda n: n.node_id)
        ],
        "edges": [
            {"a": e.a, "b": e.b, "rel": sorted(e.relationships)}
            for e in sorted(graph.edges, key=lambda e: (e.a, e.b))
        ],
    }


def serialize_activity_graph(graph: ActivityGraph) -> str:
    """Canonical byte-deterministic serialization (sorted keys, compact)."""
    return json.dumps(to_document(graph), sort_keys=True, separators=(",", ":")) + "\n"
