"""Retrieval execution: matching graph, tree dynamic program, rescoring, ranking.

The matching graph holds (query node, observation) assignments that pass
their node threshold, linked along spanning-tree edges that pass their
edge threshold; assignments unreachable from a surviving parent are
pruned during root-to-leaf construction. A leaf-to-root max-sum pass with
backpointers then yields, for every surviving root assignment, the
grounding maximizing the tree objective. Full-graph rescoring evaluates
the edges the tree dropped, filters on their thresholds, and produces the
final log score. All scores live in natural-log domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import ArchiveStore, RelFreqTable, Volume, hull_volume, volume_iou
from .concepts import (
    CalibrationModel,
    ScoringConfig,
    edge_factor_log_probs,
    node_log_probability,
    node_probability_array,
    relationship_prob_pairs,
)
from .planner import SpanningTree, ThresholdAssignment, hpst, select_thresholds
from .querymodel import ActivityGraph, QueryEdge

# Pairwise edge scoring is chunked over parent assignments to bound memory.
_PAIR_CHUNK = 512

# Short groundings are padded to this many seconds when volumes are
# compared for duplicate suppression; wider than the evaluation pad so
# time-shifted re-returns of one event collapse onto the best one.
DEDUP_MIN_DURATION = 40.0


@dataclass
class MatchingGraph:
    # query node -> {obs_id: node log prob}
    assignments: dict[str, dict[int, float]]
    # (parent node, child node) -> {parent obs: [(child obs, edge log prob), ...]}
    links: dict[tuple[str, str], dict[int, list[tuple[int, float]]]]

    def assignment_set(self) -> set[tuple[str, int]]:
        return {(q, o) for q, m in self.assignments.items() for o in m}

    def link_set(self) -> set[tuple[str, int, str, int]]:
        out = set()
        for (pq, cq), per_parent in self.links.items():
            for po, children in per_parent.items():
                for co, _ in children:
                    out.add((pq, po, cq, co))
        return out

    def n_links(self) -> int:
        return sum(
            len(children) for per_parent in self.links.values() for children in per_parent.values()
        )


@dataclass
class Grounding:
    mapping: dict[str, int]
    tree_log_score: float
    full_log_score: float | None = None
    volume: Volume | None = None

    def sort_key(self, store: ArchiveStore) -> tuple:
        times = sorted(store.get(o).time for o in self.mapping.values())
        obs = tuple(sorted(self.mapping.values()))
        score = self.full_log_score if self.full_log_score is not None else self.tree_log_score
        return (-score, times[0], obs)

    def to_dict(self) -> dict:
        d = {
            "mapping": dict(sorted(self.mapping.items())),
            "tree_log_score": self.tree_log_score,
        }
        if self.full_log_score is not None:
            d["full_log_score"] = self.full_log_score
        if self.volume is not None:
            d["volume"] = self.volume.to_dict()
        return d


@dataclass
class RetrievalResult:
    ranked: list[Grounding]
    thresholds_used: ThresholdAssignment
    refinement_rounds: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "refinement_rounds": self.refinement_rounds,
            "thresholds": self.thresholds_used.to_dict(),
            "ranked": [
                {"rank": i + 1, **g.to_dict()} for i, g in enumerate(self.ranked)
            ],
            "diagnostics": self.diagnostics,
        }


def _edge_direction(edge: QueryEdge, parent: str) -> bool:
    """True when the tree parent is the edge's 'a' endpoint."""
    return edge.a == parent


def build_matching_graph(
    tree: SpanningTree,
    store: ArchiveStore,
    taus: ThresholdAssignment,
    models: CalibrationModel,
    config: ScoringConfig | None = None,
) -> MatchingGraph:
    """Root-to-leaf construction of threshold-passing assignments and links.

    A non-root assignment survives only if at least one surviving parent
    assignment links to it above the edge threshold.
    """
    config = config or ScoringConfig()
    assignments: dict[str, dict[int, float]] = {}
    links: dict[tuple[str, str], dict[int, list[tuple[int, float]]]] = {}
    if len(store) == 0:
        return MatchingGraph({q: {} for q in tree.node_ids()}, {})

    table = store.table()
    order = tree.topological_order()
    node_rows: dict[str, np.ndarray] = {}
    node_logs: dict[str, np.ndarray] = {}

    def _node_candidates(query_node, tau: float) -> tuple[np.ndarray, np.ndarray]:
        probs = node_probability_array(store, query_node, models, config)
        keep = np.flatnonzero(probs >= tau)
        return keep, np.log(probs[keep])

    for node_id in order:
        rows, logs = _node_candidates(tree.query_node(node_id), taus.node_tau[node_id])
        if node_id == tree.root:
            node_rows[node_id] = rows
            node_logs[node_id] = logs
            assignments[node_id] = {
                int(table.obs_ids[r]): float(lp) for r, lp in zip(rows, logs)
            }
            continue
        parent = tree.parent[node_id]
        edge = tree.edge_to_parent(node_id)
        parent_rows = node_rows[parent]
        if len(parent_rows) == 0 or len(rows) == 0:
            node_rows[node_id] = np.empty(0, dtype=np.int64)
            node_logs[node_id] = np.empty(0)
            assignments[node_id] = {}
            links[(parent, node_id)] = {}
            continue
        edge_tau = taus.edge_tau[(edge.a, edge.b)]
        parent_first = _edge_direction(edge, parent)
        per_parent: dict[int, list[tuple[int, float]]] = {}
        surviving_child_rows: set[int] = set()
        for start in range(0, len(parent_rows), _PAIR_CHUNK):
            chunk = parent_rows[start : start + _PAIR_CHUNK]
            idx_p = np.repeat(chunk, len(rows))
            idx_c = np.tile(rows, len(chunk))
            if parent_first:
                idx_a, idx_b = idx_p, idx_c
            else:
                idx_a, idx_b = idx_c, idx_p
            prob = np.ones(len(idx_p))
            for rel in edge.relationships:
                prob = prob * relationship_prob_pairs(store, idx_a, idx_b, rel, models, config)
            prob = prob.reshape(len(chunk), len(rows))
            passing = prob >= edge_tau
            log_prob = np.where(passing, np.log(np.maximum(prob, 1e-300)), 0.0)
            for i, prow in enumerate(chunk):
                cols = np.flatnonzero(passing[i])
                if len(cols) == 0:
                    continue
                p_obs = int(table.obs_ids[prow])
                entries = [
                    (int(table.obs_ids[rows[c]]), float(log_prob[i, c])) for c in cols
                ]
                per_parent[p_obs] = entries
                surviving_child_rows.update(int(rows[c]) for c in cols)
        keep_mask = np.isin(rows, np.fromiter(surviving_child_rows, dtype=np.int64, count=len(surviving_child_rows))) if surviving_child_rows else np.zeros(len(rows), dtype=bool)
        node_rows[node_id] = rows[keep_mask]
        node_logs[node_id] = logs[keep_mask]
        assignments[node_id] = {
            int(table.obs_ids[r]): float(lp)
            for r, lp in zip(node_rows[node_id], node_logs[node_id])
        }
        links[(parent, node_id)] = per_parent

    # backward feasibility sweep: an assignment whose required subtree has
    # no surviving completion cannot ground anything, so drop it and the
    # links that point at it
    children = tree.children()
    for node_id in reversed(order):
        kids = children.get(node_id, [])
        if not kids:
            continue
        alive = {}
        for obs, lp in assignments[node_id].items():
            ok = True
            for child in kids:
                entries = [
                    (c_obs, elp)
                    for c_obs, elp in links.get((node_id, child), {}).get(obs, [])
                    if c_obs in assignments[child]
                ]
                if entries:
                    links[(node_id, child)][obs] = entries
                else:
                    links.get((node_id, child), {}).pop(obs, None)
                    ok = False
            if ok:
                alive[obs] = lp
            else:
                for child in kids:
                    links.get((node_id, child), {}).pop(obs, None)
        assignments[node_id] = alive
    return MatchingGraph(assignments, links)


def optimize_groundings(
    tree: SpanningTree, matching: MatchingGraph, top_r: int = 1
) -> list[tuple[int, Grounding, float]]:
    """Leaf-to-root max-sum with backpointers.

    Returns, per surviving root assignment, its top_r tree-optimal
    groundings as (root obs_id, grounding, tree log score), sorted by score
    descending with deterministic ties. Roots whose required subtree has no
    feasible assignment are dropped.
    """
    children = tree.children()
    order = tree.topological_order()

    # best[node][obs] = list of (score, {child: (child_obs, rank)}), len <= top_r
    best: dict[str, dict[int, list[tuple[float, dict]]]] = {}
    for node_id in reversed(order):
        table_entries: dict[int, list[tuple[float, dict]]] = {}
        kids = children.get(node_id, [])
        for obs, node_lp in matching.assignments.get(node_id, {}).items():
            partial: list[tuple[float, dict]] = [(node_lp, {})]
            feasible = True
            for child in kids:
                options: list[tuple[float, int, int]] = []
                for c_obs, edge_lp in matching.links.get((node_id, child), {}).get(obs, []):
                    for rank, (c_score, _) in enumerate(best.get(child, {}).get(c_obs, [])):
                        options.append((edge_lp + c_score, c_obs, rank))
                if not options:
                    feasible = False
                    break
                options.sort(key=lambda x: (-x[0], x[1], x[2]))
                options = options[:top_r]
                merged: list[tuple[float, dict]] = []
                for score, choice in partial:
                    for opt_score, c_obs, rank in options:
                        nxt = dict(choice)
                        nxt[child] = (c_obs, rank)
                        merged.append((score + opt_score, nxt))
                merged.sort(key=lambda e: (-e[0], sorted(e[1].items())))
                partial = merged[:top_r]
            if feasible:
                table_entries[obs] = partial
        best[node_id] = table_entries

    def _reconstruct(node_id: str, obs: int, rank: int, mapping: dict[str, int]) -> None:
        mapping[node_id] = obs
        _, choice = best[node_id][obs][rank]
        for child, (c_obs, c_rank) in sorted(choice.items()):
            _reconstruct(child, c_obs, c_rank, mapping)

    results: list[tuple[int, Grounding, float]] = []
    for obs, entries in best.get(tree.root, {}).items():
        for rank, (score, _) in enumerate(entries):
            mapping: dict[str, int] = {}
            _reconstruct(tree.root, obs, rank, mapping)
            results.append((obs, Grounding(mapping, score), score))
    results.sort(key=lambda r: (-r[2], r[0]))
    return results


def rescore_full_graph(
    candidates: list[Grounding],
    graph: ActivityGraph,
    taus: ThresholdAssignment,
    models: CalibrationModel,
    store: ArchiveStore,
    tree: SpanningTree | None = None,
    config: ScoringConfig | None = None,
) -> list[Grounding]:
    """Filter on non-tree edge thresholds and score the full graph objective.

    Survivors carry full_log_score (every node and every edge of the query)
    and their spatio-temporal volume.
    """
    config = config or ScoringConfig()
    tree_pairs = (
        {frozenset((e.a, e.b)) for e in tree.tree_edges} if tree is not None else set()
    )
    survivors: list[Grounding] = []
    for g in candidates:
        obs = {q: store.get(o) for q, o in g.mapping.items()}
        total = 0.0
        for node in graph.nodes:
            total += node_log_probability(node, obs[node.node_id], models, config)
        ok = True
        for edge in graph.edges:
            factors = edge_factor_log_probs(
                obs[edge.a], obs[edge.b], edge.relationships, models, store, config
            )
            edge_lp = sum(factors.values())
            if frozenset((edge.a, edge.b)) not in tree_pairs:
                if np.exp(edge_lp) < taus.edge_tau[(edge.a, edge.b)]:
                    ok = False
                    break
            total += edge_lp
        if not ok:
            continue
        g.full_log_score = total
        g.volume = hull_volume(list(obs.values()))
        survivors.append(g)
    return survivors


def deduplicate(
    ranked: list[Grounding], iou_threshold: float = 0.5, min_duration: float = DEDUP_MIN_DURATION
) -> list[Grounding]:
    """Greedy suppression of groundings overlapping a kept higher-scoring one."""
    kept: list[Grounding] = []
    for g in ranked:
        if g.volume is None:
            raise ValueError("deduplicate needs scored groundings with volumes")
        if all(volume_iou(g.volume, other.volume, min_duration) <= iou_threshold for other in kept):
            kept.append(g)
    return kept


def retrieve(
    graph: ActivityGraph,
    store: ArchiveStore,
    models: CalibrationModel,
    freqs: RelFreqTable,
    stats,
    eta: float = 0.9,
    k: int = 20,
    config: ScoringConfig | None = None,
    refine_rounds: int = 3,
    refine_decay: float = 0.5,
    top_r: int = 4,
    dedup_iou: float = 0.5,
    dedup_min_duration: float = DEDUP_MIN_DURATION,
) -> RetrievalResult:
    """End-to-end retrieval for one query.

    Plans the tree and thresholds, builds the matching graph, solves the
    tree DP per root, rescores survivors on the full graph, deduplicates by
    volume overlap and returns the top k. If nothing survives, thresholds
    relax geometrically (refine_decay) for up to refine_rounds retries.

    top_r keeps that many tree-optimal groundings per root before
    rescoring: with symmetric queries the single best tree grounding often
    collapses sibling subtrees onto one observation and then fails the
    dropped-edge thresholds, while a short per-root list retains diverse
    assignments for the full-graph stage.
    """
    config = config or ScoringConfig()
    tree = hpst(graph, freqs)
    taus = select_thresholds(graph, stats, eta)
    diagnostics: dict = {"rounds": []}

    rounds = 0
    ranked: list[Grounding] = []
    while True:
        matching = build_matching_graph(tree, store, taus, models, config)
        per_root = optimize_groundings(tree, matching, top_r=top_r)
        candidates = [g for _, g, _ in per_root]
        survivors = rescore_full_graph(candidates, graph, taus, models, store, tree, config)
        survivors.sort(key=lambda g: g.sort_key(store))
        ranked = deduplicate(survivors, dedup_iou, dedup_min_duration)
        diagnostics["rounds"].append(
            {
                "round": rounds,
                "assignments": {q: len(m) for q, m in sorted(matching.assignments.items())},
                "links": matching.n_links(),
                "roots_surviving": len({o for o, _, _ in per_root}),
                "roots_total": len(matching.assignments.get(tree.root, {})),
                "tree_groundings": len(candidates),
                "full_survivors": len(survivors),
                "after_dedup": len(ranked),
            }
        )
        if ranked or rounds >= refine_rounds:
            break
        taus = taus.scaled(refine_decay)
        rounds += 1

    diagnostics["tree"] = {
        "root": tree.root,
        "edges": [f"{e.a}--{e.b}" for e in tree.tree_edges],
        "total_weight": tree.total_weight,
    }
    return RetrievalResult(ranked[:k], taus, rounds, diagnostics)
