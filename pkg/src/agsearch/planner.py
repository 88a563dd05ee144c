"""Query planning: highest-precision spanning tree and recall-constrained thresholds.

The spanning tree minimizes the summed log archive-frequency of its edge
relationships (rare relationships are kept, common ones dropped), which is
a minimum spanning tree under those weights. Thresholds allocate the
recall target equally across components and, within a component, across
its concept factors, reading each factor's cutoff from empirical positive
score samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .archive import RelFreqTable
from .errors import InfeasibleRecallError, OversizedInstanceError
from .querymodel import ActivityGraph, QueryEdge, QueryNode

ENUMERATION_NODE_LIMIT = 8


def edge_weight(edge: QueryEdge, freqs: RelFreqTable) -> float:
    """Sum of ln p(r) over the edge's relationships; always <= 0."""
    return sum(math.log(freqs.get(r)) for r in edge.relationships)


@dataclass(frozen=True)
class SpanningTree:
    root: str
    parent: dict[str, str]  # child -> parent, root excluded
    tree_edges: tuple[QueryEdge, ...]
    total_weight: float
    # node definitions travel with the tree so candidate scoring needs no
    # separate copy of the query
    nodes: tuple[QueryNode, ...] = ()

    def query_node(self, node_id: str) -> QueryNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for child, par in self.parent.items():
            out.setdefault(par, []).append(child)
        for v in out.values():
            v.sort()
        return out

    def topological_order(self) -> list[str]:
        """Root first, every parent before its children."""
        children = self.children()
        order = [self.root]
        i = 0
        while i < len(order):
            order.extend(children.get(order[i], []))
            i += 1
        return order

    def edge_to_parent(self, child: str) -> QueryEdge:
        par = self.parent[child]
        for e in self.tree_edges:
            if {e.a, e.b} == {child, par}:
                return e
        raise KeyError(child)

    def node_ids(self) -> list[str]:
        if self.nodes:
            return sorted(n.node_id for n in self.nodes)
        ids = {self.root, *self.parent.keys(), *self.parent.values()}
        return sorted(ids)


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.rank = {x: 0 for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def _build_tree(graph: ActivityGraph, chosen: list[QueryEdge], freqs: RelFreqTable | None) -> SpanningTree:
    weights = {e: (edge_weight(e, freqs) if freqs is not None else 0.0) for e in chosen}
    total = sum(weights.values())
    if chosen:
        # Root at the most discriminative (most negative) tree edge; among
        # ties take the first in (weight, endpoints) order, then the
        # lexicographically smaller endpoint.
        anchor = min(chosen, key=lambda e: (weights[e], e.a, e.b))
        root = min(anchor.a, anchor.b)
    else:
        root = graph.nodes[0].node_id

    adjacency: dict[str, list[str]] = {n.node_id: [] for n in graph.nodes}
    for e in chosen:
        adjacency[e.a].append(e.b)
        adjacency[e.b].append(e.a)
    parent: dict[str, str] = {}
    seen = {root}
    frontier = [root]
    while frontier:
        cur = frontier.pop(0)
        for nbr in sorted(adjacency[cur]):
            if nbr not in seen:
                seen.add(nbr)
                parent[nbr] = cur
                frontier.append(nbr)
    if len(seen) != len(graph.nodes):
        raise ValueError("edges do not span the graph")
    return SpanningTree(
        root, parent, tuple(chosen), total, tuple(sorted(graph.nodes, key=lambda n: n.node_id))
    )


def hpst(graph: ActivityGraph, freqs: RelFreqTable) -> SpanningTree:
    """Minimum-total-log-frequency spanning tree (Kruskal, deterministic ties)."""
    ids = graph.node_ids
    if len(ids) == 0:
        raise ValueError("empty graph")
    edges = sorted(graph.edges, key=lambda e: (edge_weight(e, freqs), e.a, e.b))
    uf = _UnionFind(ids)
    chosen: list[QueryEdge] = []
    for e in edges:
        if uf.union(e.a, e.b):
            chosen.append(e)
            if len(chosen) == len(ids) - 1:
                break
    if len(chosen) != len(ids) - 1:
        raise ValueError("graph is disconnected; no spanning tree exists")
    return _build_tree(graph, chosen, freqs)


def enumerate_spanning_trees(
    graph: ActivityGraph, freqs: RelFreqTable | None = None
) -> list[SpanningTree]:
    """Every spanning tree of the query graph (test oracle; small graphs only)."""
    n = len(graph.nodes)
    if n > ENUMERATION_NODE_LIMIT:
        raise OversizedInstanceError(
            f"refusing to enumerate spanning trees of a {n}-node graph"
        )
    if n == 0:
        raise ValueError("empty graph")
    trees: list[SpanningTree] = []
    if n == 1:
        return [_build_tree(graph, [], freqs)]
    for subset in combinations(graph.edges, n - 1):
        uf = _UnionFind(graph.node_ids)
        if all(uf.union(e.a, e.b) for e in subset):
            trees.append(_build_tree(graph, list(subset), freqs))
    return trees


# ---------------------------------------------------------------------------
# threshold selection

@dataclass(frozen=True)
class ScoreSample:
    """Empirical score histograms for one concept."""

    positives: tuple[float, ...]
    background: tuple[float, ...] = ()


@dataclass
class ConceptStats:
    samples: dict[str, ScoreSample]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "samples": {
                k: {"positives": list(v.positives), "background": list(v.background)}
                for k, v in sorted(self.samples.items())
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "ConceptStats":
        return ConceptStats(
            {
                k: ScoreSample(tuple(v["positives"]), tuple(v.get("background", ())))
                for k, v in d["samples"].items()
            }
        )


@dataclass
class ThresholdAssignment:
    node_tau: dict[str, float]
    edge_tau: dict[tuple[str, str], float]
    eta: float

    def scaled(self, factor: float) -> "ThresholdAssignment":
        return ThresholdAssignment(
            {k: v * factor for k, v in self.node_tau.items()},
            {k: v * factor for k, v in self.edge_tau.items()},
            self.eta,
        )

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "node_tau": dict(sorted(self.node_tau.items())),
            "edge_tau": {f"{a}--{b}": v for (a, b), v in sorted(self.edge_tau.items())},
        }


def node_concept_keys(node) -> list[str]:
    return [f"class:{node.class_name}"] + [f"attr:{a}" for a in node.attributes]


def edge_concept_keys(edge: QueryEdge) -> list[str]:
    return [f"rel:{r}" for r in edge.relationships]


def _concept_tau(stats: ConceptStats, key: str, per_factor_recall: float) -> float:
    sample = stats.samples.get(key)
    if sample is None or len(sample.positives) == 0:
        raise InfeasibleRecallError(
            f"no positive score samples for concept '{key}'; recall cannot be certified"
        )
    scores = np.sort(np.asarray(sample.positives, dtype=np.float64))
    n = len(scores)
    k = int(math.floor(n * (1.0 - per_factor_recall) + 1e-12))
    if k <= 0:
        return 0.0
    return float(scores[min(k, n - 1)])


def select_thresholds(
    graph: ActivityGraph, stats: ConceptStats, eta: float
) -> ThresholdAssignment:
    """Per-component thresholds meeting the recall target.

    The target is allocated equally: with m components each gets recall
    eta^(1/m); a component with f concept factors gives each the per-factor
    share, and its threshold is the product of the factor cutoffs (every
    scored probability is epsilon-floored, so a passing factor set implies
    a passing product).
    """
    if not (0.0 < eta <= 1.0):
        raise ValueError("eta must be in (0, 1]")
    m = len(graph.nodes) + len(graph.edges)
    q = eta ** (1.0 / m)

    node_tau: dict[str, float] = {}
    for node in graph.nodes:
        keys = node_concept_keys(node)
        q_f = q ** (1.0 / len(keys))
        tau = 1.0
        for key in keys:
            tau *= _concept_tau(stats, key, q_f)
        node_tau[node.node_id] = tau

    edge_tau: dict[tuple[str, str], float] = {}
    for edge in graph.edges:
        keys = edge_concept_keys(edge)
        q_f = q ** (1.0 / len(keys))
        tau = 1.0
        for key in keys:
            tau *= _concept_tau(stats, key, q_f)
        edge_tau[(edge.a, edge.b)] = tau
    return ThresholdAssignment(node_tau, edge_tau, eta)


def threshold_report(
    graph: ActivityGraph, stats: ConceptStats, taus: ThresholdAssignment
) -> dict:
    """Per-component cutoffs with positive and background pass rates."""

    def _rates(keys: list[str], tau: float) -> dict:
        rows = {}
        for key in keys:
            sample = stats.samples.get(key)
            if sample is None:
                continue
            pos = np.asarray(sample.positives)
            bg = np.asarray(sample.background)
            rows[key] = {
                "n_positives": int(len(pos)),
                "n_background": int(len(bg)),
                "background_pass_rate": float(np.mean(bg >= tau)) if len(bg) else None,
                "positive_pass_rate": float(np.mean(pos >= tau)) if len(pos) else None,
            }
        return rows

    report = {"eta": taus.eta, "nodes": {}, "edges": {}}
    for node in graph.nodes:
        tau = taus.node_tau[node.node_id]
        report["nodes"][node.node_id] = {
            "tau": tau,
            "concepts": _rates(node_concept_keys(node), tau),
        }
    for edge in graph.edges:
        tau = taus.edge_tau[(edge.a, edge.b)]
        report["edges"][f"{edge.a}--{edge.b}"] = {
            "tau": tau,
            "concepts": _rates(edge_concept_keys(edge), tau),
        }
    return report
