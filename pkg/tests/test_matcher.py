import itertools
import json
import math

import numpy as np
import pytest

from agsearch.archive import ArchiveStore, Observation, RelFreqTable, Volume
from agsearch.concepts import (
    CalibrationModel,
    LinearConcept,
    PAIR_FEATURES,
    PlattParams,
    margin_concept,
)
from agsearch.matcher import (
    Grounding,
    MatchingGraph,
    build_matching_graph,
    deduplicate,
    optimize_groundings,
    rescore_full_graph,
    retrieve,
)
from agsearch.planner import SpanningTree, ThresholdAssignment, hpst
from agsearch.querymodel import from_document
from agsearch.synthlab import (
    brute_force_ground,
    match_returns,
    stats_from_archive,
)


def _obs(obs_id, track_id, t, x, y=0.0, person=-3.0, vehicle=-3.0):
    return Observation(
        obs_id, track_id, t, (x, y, 16.0, 16.0),
        {"person": person, "vehicle": vehicle}, {},
    )


def _models():
    platt = PlattParams(-1.2, 0.0)
    near_w = tuple(-1.0 / 40.0 if f == "center_dist" else 0.0 for f in PAIR_FEATURES)
    return CalibrationModel(
        {"person": margin_concept("person", platt), "vehicle": margin_concept("vehicle", platt)},
        {},
        {"near": LinearConcept("near", near_w, 2.0, PlattParams(-1.5, 0.0), PAIR_FEATURES)},
        None,
    )


def _pv_query():
    return from_document(
        {
            "nodes": [
                {"id": "p", "class": "person"},
                {"id": "v", "class": "vehicle"},
            ],
            "edges": [{"a": "p", "b": "v", "rel": ["near"]}],
        }
    )


def _pv_world():
    store = ArchiveStore(
        [
            _obs(1, 1, 10.0, x=100.0, person=3.0),
            _obs(2, 2, 10.0, x=600.0, y=600.0, person=3.0),
            _obs(3, 3, 10.0, x=140.0, vehicle=3.0),
        ]
    )
    graph = _pv_query()
    tree = hpst(graph, RelFreqTable({"near": 0.1}, 10))
    return store, graph, tree


def _taus(node=0.5, edge=0.5):
    return ThresholdAssignment({"p": node, "v": node}, {("p", "v"): edge}, 0.9)


def test_matching_graph_prunes_parentless_and_infeasible():
    store, graph, tree = _pv_world()
    matching = build_matching_graph(tree, store, _taus(), _models())
    # near(p1, v1) passes, near(p2, v1) fails; p2 has no surviving subtree
    assert set(matching.assignments["p"]) == {1}
    assert set(matching.assignments["v"]) == {3}
    assert matching.link_set() == {("p", 1, "v", 3)}


def test_matching_graph_zero_thresholds_grow_all_links():
    store, graph, tree = _pv_world()
    matching = build_matching_graph(tree, store, _taus(node=0.0, edge=0.0), _models())
    # nothing pruned: every observation is a candidate for both nodes
    assert set(matching.assignments["p"]) == {1, 2, 3}
    assert set(matching.assignments["v"]) == {1, 2, 3}
    assert matching.n_links() == 9  # n_parents * m_children


def test_matching_graph_empty_when_no_root_candidates():
    store, graph, tree = _pv_world()
    taus = ThresholdAssignment({"p": 0.999, "v": 0.5}, {("p", "v"): 0.5}, 0.9)
    matching = build_matching_graph(tree, store, taus, _models())
    assert matching.assignments["p"] == {}
    assert matching.assignments["v"] == {}


def test_refinement_monotonicity():
    store, graph, tree = _pv_world()
    strict = build_matching_graph(tree, store, _taus(0.6, 0.6), _models())
    relaxed = build_matching_graph(tree, store, _taus(0.3, 0.3), _models())
    assert strict.assignment_set() <= relaxed.assignment_set()
    assert strict.link_set() <= relaxed.link_set()


def _manual_tree():
    from agsearch.querymodel import QueryEdge, QueryNode

    nodes = (QueryNode("c", "person"), QueryNode("r", "person"))
    edge = QueryEdge("c", "r", ("near",))
    return SpanningTree("r", {"c": "r"}, (edge,), 0.0, nodes)


def test_optimize_single_path_product():
    tree = _manual_tree()
    matching = MatchingGraph(
        {"r": {11: math.log(0.9)}, "c": {22: math.log(0.8)}},
        {("r", "c"): {11: [(22, math.log(0.5))]}},
    )
    results = optimize_groundings(tree, matching)
    assert len(results) == 1
    root_obs, grounding, score = results[0]
    assert root_obs == 11
    assert grounding.mapping == {"r": 11, "c": 22}
    assert score == pytest.approx(math.log(0.36))


def test_optimize_matches_exhaustive_enumeration_on_chain():
    from agsearch.querymodel import QueryEdge, QueryNode

    nodes = (QueryNode("a", "person"), QueryNode("b", "person"), QueryNode("c", "person"))
    tree = SpanningTree(
        "a", {"b": "a", "c": "b"},
        (QueryEdge("a", "b", ("near",)), QueryEdge("b", "c", ("near",))), 0.0, nodes,
    )
    rng = np.random.default_rng(8)
    node_scores = {q: {1: float(rng.uniform(-2, 0)), 2: float(rng.uniform(-2, 0))} for q in "abc"}
    e_ab = {pa: [(cb, float(rng.uniform(-2, 0))) for cb in (1, 2)] for pa in (1, 2)}
    e_bc = {pb: [(cc, float(rng.uniform(-2, 0))) for cc in (1, 2)] for pb in (1, 2)}
    matching = MatchingGraph(
        {q: dict(node_scores[q]) for q in "abc"},
        {("a", "b"): e_ab, ("b", "c"): e_bc},
    )
    results = {root: score for root, _, score in optimize_groundings(tree, matching)}
    link_ab = {(p, c): lp for p, lst in e_ab.items() for c, lp in lst}
    link_bc = {(p, c): lp for p, lst in e_bc.items() for c, lp in lst}
    for root in (1, 2):
        best = max(
            node_scores["a"][root] + node_scores["b"][b] + node_scores["c"][c]
            + link_ab[(root, b)] + link_bc[(b, c)]
            for b, c in itertools.product((1, 2), repeat=2)
        )
        assert results[root] == pytest.approx(best, abs=1e-9)


def test_optimize_single_candidate_per_node():
    tree = _manual_tree()
    matching = MatchingGraph(
        {"r": {5: -0.4}, "c": {7: -0.3}},
        {("r", "c"): {5: [(7, -0.2)]}},
    )
    results = optimize_groundings(tree, matching)
    assert len(results) == 1
    assert results[0][1].mapping == {"r": 5, "c": 7}
    assert results[0][2] == pytest.approx(-0.9)


def test_optimize_drops_root_with_childless_subtree():
    tree = _manual_tree()
    matching = MatchingGraph(
        {"r": {5: -0.4, 6: -0.1}, "c": {7: -0.3}},
        {("r", "c"): {5: [(7, -0.2)]}},  # root 6 has no feasible child
    )
    results = optimize_groundings(tree, matching)
    assert [r for r, _, _ in results] == [5]


def _triangle_world(far_c=True):
    platt = PlattParams(-1.2, 0.0)
    near_w = tuple(-1.0 / 40.0 if f == "center_dist" else 0.0 for f in PAIR_FEATURES)
    models = CalibrationModel(
        {"person": margin_concept("person", platt), "vehicle": margin_concept("vehicle", platt)},
        {},
        {"near": LinearConcept("near", near_w, 2.0, PlattParams(-1.5, 0.0), PAIR_FEATURES)},
        None,
    )
    graph = from_document(
        {
            "nodes": [
                {"id": "a", "class": "person"},
                {"id": "b", "class": "person"},
                {"id": "c", "class": "vehicle"},
            ],
            "edges": [
                {"a": "a", "b": "b", "rel": ["near"]},
                {"a": "b", "b": "c", "rel": ["near"]},
                {"a": "a", "b": "c", "rel": ["near"]},
            ],
        }
    )
    store = ArchiveStore(
        [
            _obs(1, 1, 10.0, x=0.0, person=3.0),
            _obs(2, 2, 10.0, x=60.0, person=3.0),
            _obs(3, 3, 10.0, x=120.0 if far_c else 80.0, vehicle=3.0),
        ]
    )
    freqs = RelFreqTable({"near": 0.1}, 10)
    tree = hpst(graph, freqs)
    taus = ThresholdAssignment(
        {"a": 0.5, "b": 0.5, "c": 0.5},
        {("a", "b"): 0.5, ("b", "c"): 0.5, ("a", "c"): 0.5},
        0.9,
    )
    return store, graph, tree, taus, models


def test_rescore_tree_query_keeps_tree_score():
    store, graph, tree = _pv_world()
    taus = _taus()
    models = _models()
    matching = build_matching_graph(tree, store, taus, models)
    candidates = [g for _, g, _ in optimize_groundings(tree, matching)]
    survivors = rescore_full_graph(candidates, graph, taus, models, store, tree)
    assert len(survivors) == 1
    g = survivors[0]
    assert g.full_log_score == pytest.approx(g.tree_log_score, abs=1e-9)
    assert g.volume is not None


def test_rescore_filters_failing_non_tree_edge():
    store, graph, tree, taus, models = _triangle_world(far_c=True)
    matching = build_matching_graph(tree, store, taus, models)
    candidates = [g for _, g, _ in optimize_groundings(tree, matching)]
    survivors = rescore_full_graph(candidates, graph, taus, models, store, tree)
    assert survivors == []


def test_rescore_survivor_matches_full_product_oracle():
    store, graph, tree, taus, models = _triangle_world(far_c=False)
    matching = build_matching_graph(tree, store, taus, models)
    candidates = [g for _, g, _ in optimize_groundings(tree, matching)]
    survivors = rescore_full_graph(candidates, graph, taus, models, store, tree)
    assert survivors
    oracle = brute_force_ground(graph, store, models)
    # the two persons are interchangeable here; every survivor hits the
    # oracle's optimum and the oracle's mapping is among them
    assert oracle.mapping in [s.mapping for s in survivors]
    for s in survivors:
        assert s.full_log_score == pytest.approx(oracle.full_log_score, abs=1e-9)


def _vol(x, w=40.0):
    return Volume(x, 0.0, w, 40.0, 0.0, 100.0)


def _grounding(score, volume):
    g = Grounding({"a": 1}, score, score, volume)
    return g


def test_deduplicate_identical_and_disjoint():
    a = _grounding(-0.1, _vol(0.0))
    b = _grounding(-0.2, _vol(0.0))
    assert deduplicate([a, b]) == [a]
    c = _grounding(-0.3, _vol(500.0))
    assert deduplicate([a, c]) == [a, c]


def test_deduplicate_greedy_chain():
    # pairwise IoUs: (1,2)=0.6, (2,3)=0.6, (1,3)=1/3 -> first and third survive
    g1 = _grounding(-0.1, _vol(0.0))
    g2 = _grounding(-0.2, _vol(10.0))
    g3 = _grounding(-0.3, _vol(20.0))
    kept = deduplicate([g1, g2, g3])
    assert kept == [g1, g3]


def test_retrieve_planted_instance_ranks_first(deposit_lab):
    ds, models, stats, freqs = deposit_lab
    graph = from_document(
        json.loads(json.dumps({
            "nodes": [
                {"id": "o", "class": "object", "attributes": ["disappearing"]},
                {"id": "p", "class": "person", "attributes": []},
                {"id": "v", "class": "vehicle", "attributes": ["speed:stationary"]},
            ],
            "edges": [
                {"a": "o", "b": "p", "rel": ["near"]},
                {"a": "o", "b": "v", "rel": ["near"]},
                {"a": "p", "b": "v", "rel": ["near"]},
            ],
        }))
    )
    result = retrieve(graph, ds.store, models, freqs, stats, eta=0.9, k=10)
    assert result.ranked
    hits = match_returns(result.ranked, ds.truths)
    assert hits[0]
    scores = [g.full_log_score for g in result.ranked]
    assert scores == sorted(scores, reverse=True)
    assert all(np.isfinite(s) for s in scores)


def test_retrieve_empty_archive_exhausts_refinement(deposit_lab):
    _, models, stats, freqs = deposit_lab
    graph = _pv_query()
    result = retrieve(graph, ArchiveStore([]), models, freqs, stats, eta=0.9, k=5)
    assert result.ranked == []
    assert result.refinement_rounds == 3


def test_retrieve_top1_matches_map_oracle_on_tree_query():
    from agsearch.synthlab import random_archive, standard_test_models

    store = random_archive(17, n_obs=25)
    models = standard_test_models()
    graph = _pv_query()
    freqs = RelFreqTable({"near": 0.1}, 10)
    stats = stats_from_archive(store, models, seed=1)
    result = retrieve(graph, store, models, freqs, stats, eta=1.0, k=1)
    oracle = brute_force_ground(graph, store, models)
    assert len(result.ranked) == 1
    assert result.ranked[0].mapping == oracle.mapping
    assert result.ranked[0].full_log_score == pytest.approx(
        oracle.full_log_score, abs=1e-9
    )


def test_retrieve_is_deterministic(deposit_lab):
    ds, models, stats, freqs = deposit_lab
    graph = _pv_query()
    r1 = retrieve(graph, ds.store, models, freqs, stats, eta=0.9, k=8)
    r2 = retrieve(graph, ds.store, models, freqs, stats, eta=0.9, k=8)
    assert json.dumps(r1.to_dict(), sort_keys=True) == json.dumps(r2.to_dict(), sort_keys=True)
