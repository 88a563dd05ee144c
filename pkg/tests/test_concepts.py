import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agsearch.archive import ArchiveStore, Observation, Tracklet
from agsearch.concepts import (
    CalibrationModel,
    LinearConcept,
    PAIR_FEATURES,
    PlattParams,
    ReIdModel,
    ScoringConfig,
    TRACKLET_FEATURES,
    edge_probability,
    fit_platt,
    margin_concept,
    margin_to_probability,
    model_from_dict,
    model_to_dict,
    node_log_probability,
    node_probability,
    pair_features,
    reid_probability,
    relationship_probability,
    tracklet_features,
    train_reid,
    train_relationship,
)
from agsearch.errors import ConfigurationError, DataError, DegenerateTrainingError
from agsearch.querymodel import QueryNode
from agsearch.synthlab import SynthConfig, _reid_examples, generate_dataset


def _obs(obs_id, track_id, t, x=0.0, y=0.0, w=16.0, h=16.0, class_margins=None, attr_margins=None):
    return Observation(
        obs_id, track_id, t, (x, y, w, h), class_margins or {}, attr_margins or {}
    )


# --- margin_to_probability ---------------------------------------------------

def test_logistic_midpoint():
    assert margin_to_probability(0.0, PlattParams(-1.0, 0.0)) == pytest.approx(0.5)


def test_logistic_displayed_formula_value():
    # P = 1 / (1 + exp(s f + t)) with s=-2, t=0, f=1
    assert margin_to_probability(1.0, PlattParams(-2.0, 0.0)) == pytest.approx(
        1.0 / (1.0 + math.exp(-2.0)), abs=1e-12
    )
    assert margin_to_probability(1.0, PlattParams(-2.0, 0.0)) == pytest.approx(0.88080, abs=5e-6)


def test_logistic_saturates_to_one():
    p = margin_to_probability(1e6, PlattParams(-1.0, 0.0))
    assert abs(p - 1.0) < 1e-12
    assert 0.0 < p < 1.0


@given(st.lists(st.integers(-30_000_000, 30_000_000), min_size=2, max_size=200, unique=True))
@settings(max_examples=50, deadline=None)
def test_logistic_strictly_monotone(grid):
    # margins separated by at least 1e-6 so float resolution cannot tie
    margins = sorted(g / 1e6 for g in grid)
    platt = PlattParams(-0.9, 0.2)
    probs = [margin_to_probability(m, platt) for m in margins]
    assert all(b > a for a, b in zip(probs, probs[1:]))


# --- fit_platt ----------------------------------------------------------------

def test_platt_orientation_on_separable_margins():
    platt = fit_platt([-1.0, -1.0, 1.0, 1.0], [0, 0, 1, 1])
    assert margin_to_probability(1.0, platt) > 0.5
    assert margin_to_probability(-1.0, platt) < 0.5
    assert platt.s < 0


def test_platt_inverted_labels_flip_sign():
    p1 = fit_platt([-1.0, -1.0, 1.0, 1.0], [0, 0, 1, 1])
    p2 = fit_platt([-1.0, -1.0, 1.0, 1.0], [1, 1, 0, 0])
    assert p2.s == pytest.approx(-p1.s, rel=1e-6)


def test_platt_brier_beats_constant_baseline():
    rng = np.random.default_rng(42)
    n = 2000
    labels = rng.integers(0, 2, n)
    margins = np.where(labels == 1, rng.normal(1, 1, n), rng.normal(-1, 1, n))
    platt = fit_platt(margins[: n // 2], labels[: n // 2])
    probs = np.array([margin_to_probability(m, platt) for m in margins[n // 2:]])
    brier = float(np.mean((probs - labels[n // 2:]) ** 2))
    assert brier < 0.25


def test_platt_single_class_rejected():
    with pytest.raises(DegenerateTrainingError):
        fit_platt([0.0, 1.0, 2.0, 3.0], [1, 1, 1, 1])


def test_platt_needs_four_examples():
    with pytest.raises(ValueError):
        fit_platt([0.0, 1.0], [0, 1])


# --- node probability ----------------------------------------------------------

def _node_models(class_prob=0.9, attr_prob=0.8):
    # margin values that map to the wanted probabilities under s=-1, t=0
    platt = PlattParams(-1.0, 0.0)
    return CalibrationModel(
        {"person": margin_concept("person", platt)},
        {"speed:moving": margin_concept("speed:moving", platt)},
        {},
        None,
    ), math.log(class_prob / (1 - class_prob)), math.log(attr_prob / (1 - attr_prob))


def test_node_probability_product_rule():
    models, m_class, m_attr = _node_models()
    obs = _obs(1, 1, 0.0, class_margins={"person": m_class},
               attr_margins={"speed:moving": m_attr})
    node = QueryNode("p", "person", ("speed:moving",))
    assert node_probability(node, obs, models) == pytest.approx(0.72, abs=1e-9)


def test_node_probability_empty_attributes_is_class_alone():
    models, m_class, _ = _node_models()
    obs = _obs(1, 1, 0.0, class_margins={"person": m_class})
    assert node_probability(QueryNode("p", "person"), obs, models) == pytest.approx(0.9, abs=1e-9)


def test_node_probability_matches_log_domain():
    rng = np.random.default_rng(3)
    models, _, _ = _node_models()
    node = QueryNode("p", "person", ("speed:moving",))
    for _ in range(200):
        obs = _obs(1, 1, 0.0,
                   class_margins={"person": float(rng.normal(0, 3))},
                   attr_margins={"speed:moving": float(rng.normal(0, 3))})
        direct = node_probability(node, obs, models)
        assert direct == pytest.approx(math.exp(node_log_probability(node, obs, models)), abs=1e-12)


def test_node_probability_missing_margin_names_concept():
    models, m_class, _ = _node_models()
    obs = _obs(1, 1, 0.0, class_margins={"person": m_class})
    with pytest.raises(DataError) as exc:
        node_probability(QueryNode("p", "person", ("speed:moving",)), obs, models)
    assert "speed:moving" in str(exc.value)


def test_unknown_class_is_configuration_error():
    models, _, _ = _node_models()
    with pytest.raises(ConfigurationError):
        node_probability(QueryNode("x", "vehicle"), _obs(1, 1, 0.0), models)


# --- pair features --------------------------------------------------------------

def test_pair_features_identity_case():
    a = _obs(1, 1, 5.0, x=10, y=20, w=15, h=30)
    f = pair_features(a, a)
    named = dict(zip(PAIR_FEATURES, f))
    assert named["norm_center_dist"] == 0.0
    assert named["center_dist"] == 0.0
    assert named["size_ratio"] == 1.0
    assert named["time_gap"] == 0.0
    assert named["overlap_frac"] == pytest.approx(1.0)


def test_pair_features_swap_antisymmetry():
    a = _obs(1, 1, 5.0, x=0, y=0, w=10, h=20)
    b = _obs(2, 2, 9.0, x=50, y=10, w=30, h=15)
    fa = dict(zip(PAIR_FEATURES, pair_features(a, b)))
    fb = dict(zip(PAIR_FEATURES, pair_features(b, a)))
    for name in PAIR_FEATURES:
        if name == "time_gap":
            assert fb[name] == -fa[name]
        else:
            assert fb[name] == pytest.approx(fa[name])


def test_pair_features_fixture_vector():
    # hand-computed from the feature definitions
    a = _obs(1, 1, 5.0, x=100, y=200, w=20, h=40)
    b = _obs(2, 2, 9.0, x=160, y=230, w=30, h=30)
    dist = math.hypot(175 - 110, 245 - 220)
    mean_diag = (math.hypot(20, 40) + math.hypot(30, 30)) / 2.0
    expected = [
        dist / mean_diag,
        dist,
        800.0 / 900.0,
        0.5,
        1.0,
        4.0,
        4.0,
        0.0,
    ]
    assert pair_features(a, b) == pytest.approx(expected, abs=1e-12)


# --- relationship training -------------------------------------------------------

def _near_far_examples(rng, n=200):
    out = []
    for i in range(n // 2):
        d = float(rng.uniform(0, 50))
        out.append((_obs(4 * i, 4 * i, 10.0, x=0.0), _obs(4 * i + 1, 4 * i + 1, 10.0, x=d), 1))
    for i in range(n // 2):
        d = float(rng.uniform(200, 700))
        out.append((_obs(10_000 + 4 * i, 10_000 + 4 * i, 10.0, x=0.0),
                    _obs(10_001 + 4 * i, 10_001 + 4 * i, 10.0, x=d), 0))
    return out


def test_train_relationship_threshold_separable_data():
    rng = np.random.default_rng(5)
    examples = _near_far_examples(rng, 200)
    order = rng.permutation(len(examples))
    train = [examples[i] for i in order[:140]]
    test = [examples[i] for i in order[140:]]
    concept = train_relationship(train, name="near")
    correct = sum(
        (concept.probability(pair_features(a, b)) > 0.5) == bool(label)
        for a, b, label in test
    )
    assert correct / len(test) >= 0.95
    # linearly separable training data is classified perfectly
    train_ok = sum(
        (concept.margin(pair_features(a, b)) > 0) == bool(label) for a, b, label in train
    )
    assert train_ok == len(train)


def test_train_relationship_single_class_rejected():
    rng = np.random.default_rng(5)
    examples = [(a, b, 1) for a, b, _ in _near_far_examples(rng, 40)]
    with pytest.raises(DegenerateTrainingError):
        train_relationship(examples)


def test_train_relationship_permutation_determinism():
    rng = np.random.default_rng(5)
    examples = _near_far_examples(rng, 80)
    c1 = train_relationship(examples, name="near")
    shuffled = [examples[i] for i in np.random.default_rng(99).permutation(len(examples))]
    c2 = train_relationship(shuffled, name="near")
    probe = pair_features(_obs(1, 1, 0.0, x=0.0), _obs(2, 2, 0.0, x=120.0))
    assert abs(c1.probability(probe) - c2.probability(probe)) < 1e-9
    assert np.allclose(c1.weights, c2.weights, atol=1e-9)


# --- edge probability -------------------------------------------------------------

def _prob_concept(name, p):
    # constant-margin concept returning exactly p under s=-1, t=0
    margin = math.log(p / (1.0 - p))
    return LinearConcept(name, tuple(0.0 for _ in PAIR_FEATURES), margin,
                         PlattParams(-1.0, 0.0), PAIR_FEATURES)


def test_edge_probability_singleton_product():
    models = CalibrationModel({}, {}, {"near": _prob_concept("near", 0.7)}, None)
    a = _obs(1, 1, 0.0)
    b = _obs(2, 2, 1.0)
    assert edge_probability(a, b, ["near"], models) == pytest.approx(0.7, abs=1e-9)


def test_edge_probability_product_of_configured_factors():
    models = CalibrationModel({}, {}, {"near": _prob_concept("near", 0.7)}, None)
    config = ScoringConfig(epsilon=0.02)
    a = _obs(1, 1, 0.0)
    b = _obs(2, 2, 5.0)  # later satisfied -> 1 - eps = 0.98
    p = edge_probability(a, b, ["near", "later"], models, config=config)
    assert p == pytest.approx(0.686, abs=1e-9)


def test_same_entity_by_track_id():
    models = CalibrationModel({}, {}, {}, None)
    a = _obs(1, 7, 0.0)
    b = _obs(2, 7, 5.0)
    assert relationship_probability(a, b, "same_entity", models) == pytest.approx(1 - 1e-3)


def test_identical_observation_pair_scores_epsilon():
    models = CalibrationModel({}, {}, {"near": _prob_concept("near", 0.9)}, None)
    a = _obs(1, 1, 5.0)
    assert relationship_probability(a, a, "near", models) == pytest.approx(1e-3)
    assert relationship_probability(a, a, "later", models) == pytest.approx(1e-3)


def test_later_window():
    models = CalibrationModel({}, {}, {}, None)
    a = _obs(1, 1, 100.0)
    assert relationship_probability(a, _obs(2, 2, 150.0), "later", models) == pytest.approx(0.999)
    assert relationship_probability(a, _obs(2, 2, 50.0), "later", models) == pytest.approx(1e-3)
    assert relationship_probability(a, _obs(2, 2, 800.0), "later", models) == pytest.approx(1e-3)


def test_unknown_relationship_is_configuration_error():
    models = CalibrationModel({}, {}, {}, None)
    with pytest.raises(ConfigurationError):
        relationship_probability(_obs(1, 1, 0.0), _obs(2, 2, 1.0), "orbits", models)


# --- re-ID ---------------------------------------------------------------------

def test_reid_identity_matrix_unit_vector_scores_one():
    d = len(TRACKLET_FEATURES)
    W = tuple(tuple(1.0 if i == j else 0.0 for j in range(d)) for i in range(d))
    model = ReIdModel(W, PlattParams(-1.0, 0.0))
    e1 = np.zeros(d)
    e1[0] = 1.0
    assert model.score(e1, e1) == pytest.approx(1.0)


def test_reid_zero_score_maps_to_half():
    d = len(TRACKLET_FEATURES)
    W = tuple(tuple(0.0 for _ in range(d)) for _ in range(d))
    model = ReIdModel(W, PlattParams(-1.0, 0.0))
    x = np.ones(d)
    assert model.probability(x, x) == pytest.approx(0.5)


def test_reid_empty_tracklet_rejected():
    store = ArchiveStore([_obs(1, 1, 0.0)])
    with pytest.raises(ValueError):
        tracklet_features(store, Tracklet(9, (), (0.0, 0.0)))


@pytest.fixture(scope="module")
def reid_world():
    config = SynthConfig(
        n_clutter_tracklets=450, planted=(("car_following_stop", 10),), seed=5
    )
    return generate_dataset(config)


def test_train_reid_broken_track_accuracy(reid_world):
    ds = reid_world
    rng = np.random.default_rng(9)
    tracks = sorted(ds.store.tracklets.values(), key=lambda t: t.track_id)
    train = _reid_examples(ds.store, rng, 200, tracklets=tracks[::2])
    test = _reid_examples(ds.store, rng, 200, tracklets=tracks[1::2])
    model = train_reid(ds.store, train)
    correct = sum(
        (reid_probability(a, b, model, ds.store) > 0.5) == bool(label)
        for a, b, label in test
    )
    assert correct / len(test) >= 0.9


def test_train_reid_single_class_rejected(reid_world):
    ds = reid_world
    rng = np.random.default_rng(9)
    examples = [(a, b, 1) for a, b, label in _reid_examples(ds.store, rng, 40) if label]
    with pytest.raises(DegenerateTrainingError):
        train_reid(ds.store, examples)


def test_train_reid_permutation_determinism(reid_world):
    ds = reid_world
    rng = np.random.default_rng(9)
    examples = _reid_examples(ds.store, rng, 60)
    m1 = train_reid(ds.store, examples)
    shuffled = [examples[i] for i in np.random.default_rng(3).permutation(len(examples))]
    m2 = train_reid(ds.store, shuffled)
    assert np.allclose(m1.matrix(), m2.matrix(), atol=1e-9)
    tr = sorted(ds.store.tracklets.values(), key=lambda t: t.track_id)[:2]
    p1 = reid_probability(tr[0], tr[1], m1, ds.store)
    p2 = reid_probability(tr[0], tr[1], m2, ds.store)
    assert abs(p1 - p2) < 1e-9


# --- serialization ----------------------------------------------------------------

def test_model_bundle_round_trip(deposit_lab):
    _, models, _, _ = deposit_lab
    doc = model_to_dict(models)
    assert doc["version"] == 1
    again = model_from_dict(json.loads(json.dumps(doc)))
    assert model_to_dict(again) == doc


def test_model_bundle_requires_version():
    with pytest.raises(ConfigurationError):
        model_from_dict({"classes": {}})


def test_training_is_bitwise_deterministic(reid_world):
    ds = reid_world
    from agsearch.synthlab import calibrate_models

    m1 = calibrate_models(ds.store, ds.labels, seed=4)
    m2 = calibrate_models(ds.store, ds.labels, seed=4)
    assert json.dumps(model_to_dict(m1), sort_keys=True) == json.dumps(
        model_to_dict(m2), sort_keys=True
    )
