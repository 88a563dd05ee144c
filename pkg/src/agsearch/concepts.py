"""Concept probability models: linear scorers with Platt-calibrated logistic outputs.

Covers four kinds of concepts:
  * class / attribute concepts — the archive already stores detector
    margins per observation; the model holds the calibration that maps a
    margin to a probability,
  * relationship concepts — linear classifiers over pairwise geometric
    features, trained from labelled observation pairs,
  * "later" — a deterministic temporal-order check,
  * "same entity" — track identity, backed by a bilinear re-ID model over
    elementary tracklet features when tracks differ.

Every probability that enters a score product is clamped to
[epsilon, 1 - epsilon] (default 1e-3) so log scores stay finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .archive import ArchiveStore, Observation, Tracklet
from .errors import ConfigurationError, DataError, DegenerateTrainingError

# Float-level guard keeping calibrated outputs strictly inside (0, 1)
# even for saturating margins; distinct from the scoring epsilon.
_P_GUARD = 1e-15

PAIR_FEATURES = (
    "norm_center_dist",
    "center_dist",
    "size_ratio",
    "aspect_min",
    "aspect_max",
    "time_gap",
    "abs_time_gap",
    "overlap_frac",
)

_TRACKLET_BASE_FEATURES = ("aspect", "cx", "cy", "size", "speed", "t_mid")
# squared copies let the symmetric bilinear form express (x1 - x2)^2 terms
TRACKLET_FEATURES = (
    _TRACKLET_BASE_FEATURES
    + tuple(f"{name}_sq" for name in _TRACKLET_BASE_FEATURES)
    + ("const",)
)

MODEL_BUNDLE_VERSION = 1


@dataclass(frozen=True)
class ScoringConfig:
    epsilon: float = 1e-3
    later_min: float = 0.0
    later_max: float = 600.0
    use_reid: bool = True
    # plausibility gate for re-ID bridging: tracklets overlapping in time
    # cannot be one entity, and a bridge must be continuous in time/space
    reid_max_gap: float = 12.0
    reid_max_jump: float = 200.0


def scoring_defaults() -> ScoringConfig:
    return ScoringConfig()


@dataclass(frozen=True)
class PlattParams:
    s: float
    t: float


def margin_to_probability(margin: float, platt: PlattParams) -> float:
    """Logistic map P = 1 / (1 + exp(s * margin + t)), strictly inside (0, 1)."""
    z = platt.s * margin + platt.t
    p = float(expit(-z))
    return min(max(p, _P_GUARD), 1.0 - _P_GUARD)


def _margin_to_probability_array(margins: np.ndarray, platt: PlattParams) -> np.ndarray:
    z = platt.s * margins + platt.t
    return np.clip(expit(-z), _P_GUARD, 1.0 - _P_GUARD)


def fit_platt(margins: Sequence[float], labels: Sequence[int]) -> PlattParams:
    """Fit (s, t) by Newton steps on the regularized log-likelihood with the
    prior-corrected targets of the standard calibration procedure.

    At most 5 Newton iterations, stopping early below step tolerance 1e-10.
    """
    m = np.asarray(margins, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if len(m) != len(y):
        raise ValueError("margins and labels must have equal length")
    if len(m) < 4:
        raise ValueError("need at least 4 examples to fit a calibration")
    pos = y > 0.5
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTrainingError("calibration needs both positive and negative labels")

    hi_target = (n_pos + 1.0) / (n_pos + 2.0)
    lo_target = 1.0 / (n_neg + 2.0)
    target = np.where(pos, hi_target, lo_target)

    s = 0.0
    t = math.log((n_neg + 1.0) / (n_pos + 1.0))
    ridge = 1e-8
    for _ in range(5):
        z = s * m + t
        p = expit(-z)
        d = target - p  # dNLL/dz
        g_s = float(d @ m) + ridge * s
        g_t = float(d.sum()) + ridge * t
        w = p * (1.0 - p)
        h_ss = float(w @ (m * m)) + ridge
        h_st = float(w @ m)
        h_tt = float(w.sum()) + ridge
        det = h_ss * h_tt - h_st * h_st
        if det <= 0.0:
            break
        step_s = (h_tt * g_s - h_st * g_t) / det
        step_t = (-h_st * g_s + h_ss * g_t) / det
        s -= step_s
        t -= step_t
        if max(abs(step_s), abs(step_t)) < 1e-10:
            break
    return PlattParams(s, t)


@dataclass(frozen=True)
class LinearConcept:
    name: str
    weights: tuple[float, ...]
    bias: float
    platt: PlattParams
    feature_spec: tuple[str, ...]

    def margin(self, features: Sequence[float]) -> float:
        return float(np.dot(self.weights, features) + self.bias)

    def probability(self, features: Sequence[float]) -> float:
        return margin_to_probability(self.margin(features), self.platt)


def margin_concept(name: str, platt: PlattParams) -> LinearConcept:
    """Identity scorer over a stored detector margin, plus its calibration."""
    return LinearConcept(name, (1.0,), 0.0, platt, ("margin",))


@dataclass(frozen=True)
class ReIdModel:
    """Bilinear same-entity scorer over elementary tracklet features.

    The raw score of a tracklet pair with feature vectors x1, x2 is
    x2' W x1 (W symmetric), mapped through the Platt calibration.
    """

    W: tuple[tuple[float, ...], ...]
    platt: PlattParams
    feature_spec: tuple[str, ...] = TRACKLET_FEATURES

    def matrix(self) -> np.ndarray:
        return np.asarray(self.W, dtype=np.float64)

    def score(self, x1: np.ndarray, x2: np.ndarray) -> float:
        return float(x2 @ self.matrix() @ x1)

    def probability(self, x1: np.ndarray, x2: np.ndarray) -> float:
        return margin_to_probability(self.score(x1, x2), self.platt)


@dataclass
class CalibrationModel:
    class_models: dict[str, LinearConcept]
    attr_models: dict[str, LinearConcept]
    rel_models: dict[str, LinearConcept]
    reid: ReIdModel | None = None

    def class_concept(self, name: str) -> LinearConcept:
        try:
            return self.class_models[name]
        except KeyError:
            raise ConfigurationError(f"no model for class '{name}'") from None

    def attr_concept(self, name: str) -> LinearConcept:
        try:
            return self.attr_models[name]
        except KeyError:
            raise ConfigurationError(f"no model for attribute '{name}'") from None

    def rel_concept(self, name: str) -> LinearConcept:
        try:
            return self.rel_models[name]
        except KeyError:
            raise ConfigurationError(f"no model for relationship '{name}'") from None


# ---------------------------------------------------------------------------
# serialization

def _concept_to_dict(c: LinearConcept) -> dict:
    return {
        "weights": list(c.weights),
        "bias": c.bias,
        "platt": {"s": c.platt.s, "t": c.platt.t},
        "features": list(c.feature_spec),
    }


def _concept_from_dict(name: str, d: dict) -> LinearConcept:
    return LinearConcept(
        name,
        tuple(float(w) for w in d["weights"]),
        float(d["bias"]),
        PlattParams(float(d["platt"]["s"]), float(d["platt"]["t"])),
        tuple(d["features"]),
    )


def model_to_dict(models: CalibrationModel) -> dict:
    doc = {
        "version": MODEL_BUNDLE_VERSION,
        "classes": {k: _concept_to_dict(v) for k, v in sorted(models.class_models.items())},
        "attributes": {k: _concept_to_dict(v) for k, v in sorted(models.attr_models.items())},
        "relationships": {k: _concept_to_dict(v) for k, v in sorted(models.rel_models.items())},
    }
    if models.reid is not None:
        doc["reid"] = {
            "W": [list(row) for row in models.reid.W],
            "platt": {"s": models.reid.platt.s, "t": models.reid.platt.t},
            "features": list(models.reid.feature_spec),
        }
    return doc


def model_from_dict(doc: dict) -> CalibrationModel:
    if "version" not in doc:
        raise ConfigurationError("model bundle lacks a version field")
    if doc["version"] != MODEL_BUNDLE_VERSION:
        raise ConfigurationError(f"unsupported model bundle version {doc['version']!r}")
    reid = None
    if "reid" in doc:
        r = doc["reid"]
        reid = ReIdModel(
            tuple(tuple(float(v) for v in row) for row in r["W"]),
            PlattParams(float(r["platt"]["s"]), float(r["platt"]["t"])),
            tuple(r["features"]),
        )
    return CalibrationModel(
        {k: _concept_from_dict(k, v) for k, v in doc.get("classes", {}).items()},
        {k: _concept_from_dict(k, v) for k, v in doc.get("attributes", {}).items()},
        {k: _concept_from_dict(k, v) for k, v in doc.get("relationships", {}).items()},
        reid,
    )


# ---------------------------------------------------------------------------
# node scoring

def _clamp(p: float, eps: float) -> float:
    return min(max(p, eps), 1.0 - eps)


def _margin_concept_value(concept: LinearConcept, raw_margin: float) -> float:
    if len(concept.weights) != 1:
        raise ConfigurationError(
            f"concept '{concept.name}' must score a single stored margin"
        )
    return concept.weights[0] * raw_margin + concept.bias


def node_factor_probabilities(
    node, obs: Observation, models: CalibrationModel, config: ScoringConfig | None = None
) -> dict[str, float]:
    """Per-concept clamped probabilities for one node/observation pairing."""
    config = config or ScoringConfig()
    factors: dict[str, float] = {}
    concept = models.class_concept(node.class_name)
    if node.class_name not in obs.class_margins:
        raise DataError(
            f"observation {obs.obs_id} lacks margin for class '{node.class_name}'"
        )
    margin = _margin_concept_value(concept, obs.class_margins[node.class_name])
    factors[f"class:{node.class_name}"] = _clamp(
        margin_to_probability(margin, concept.platt), config.epsilon
    )
    for attr in node.attributes:
        concept = models.attr_concept(attr)
        if attr not in obs.attr_margins:
            raise DataError(f"observation {obs.obs_id} lacks margin for attribute '{attr}'")
        margin = _margin_concept_value(concept, obs.attr_margins[attr])
        factors[f"attr:{attr}"] = _clamp(
            margin_to_probability(margin, concept.platt), config.epsilon
        )
    return factors


def node_probability(
    node, obs: Observation, models: CalibrationModel, config: ScoringConfig | None = None
) -> float:
    """P(node | observation): class probability times each attribute probability."""
    prob = 1.0
    for p in node_factor_probabilities(node, obs, models, config).values():
        prob *= p
    return prob


def node_log_probability(
    node, obs: Observation, models: CalibrationModel, config: ScoringConfig | None = None
) -> float:
    return sum(
        math.log(p) for p in node_factor_probabilities(node, obs, models, config).values()
    )


def node_probability_array(
    store: ArchiveStore, node, models: CalibrationModel, config: ScoringConfig | None = None
) -> np.ndarray:
    """Vectorized node probability over every archive observation (table order)."""
    config = config or ScoringConfig()
    table = store.table()
    concept = models.class_concept(node.class_name)
    margins = table.class_margin(node.class_name)
    if np.isnan(margins).any():
        raise DataError(f"some observations lack margin for class '{node.class_name}'")
    prob = np.clip(
        _margin_to_probability_array(concept.weights[0] * margins + concept.bias, concept.platt),
        config.epsilon, 1.0 - config.epsilon,
    )
    for attr in node.attributes:
        c = models.attr_concept(attr)
        margins = table.attr_margin(attr)
        if np.isnan(margins).any():
            raise DataError(f"some observations lack margin for attribute '{attr}'")
        prob = prob * np.clip(
            _margin_to_probability_array(c.weights[0] * margins + c.bias, c.platt),
            config.epsilon, 1.0 - config.epsilon,
        )
    return prob


# ---------------------------------------------------------------------------
# pairwise features

def _side_arrays(obs_list: Sequence[Observation]) -> dict[str, np.ndarray]:
    box = np.array([o.box for o in obs_list], dtype=np.float64).reshape(len(obs_list), 4)
    x, y, w, h = box[:, 0], box[:, 1], box[:, 2], box[:, 3]
    return {
        "x": x, "y": y, "w": w, "h": h,
        "cx": x + w / 2.0, "cy": y + h / 2.0,
        "area": w * h, "diag": np.hypot(w, h), "aspect": w / h,
        "t": np.array([o.time for o in obs_list], dtype=np.float64),
    }


def _table_side(table, idx: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "x": table.x[idx], "y": table.y[idx], "w": table.w[idx], "h": table.h[idx],
        "cx": table.cx[idx], "cy": table.cy[idx],
        "area": table.area[idx], "diag": table.diag[idx], "aspect": table.aspect[idx],
        "t": table.t[idx],
    }


def _pair_feature_matrix(sa: dict[str, np.ndarray], sb: dict[str, np.ndarray]) -> np.ndarray:
    """Stack of PAIR_FEATURES columns for aligned observation arrays."""
    dist = np.hypot(sb["cx"] - sa["cx"], sb["cy"] - sa["cy"])
    mean_diag = (sa["diag"] + sb["diag"]) / 2.0
    norm_dist = dist / mean_diag
    size_ratio = np.minimum(sa["area"], sb["area"]) / np.maximum(sa["area"], sb["area"])
    aspect_min = np.minimum(sa["aspect"], sb["aspect"])
    aspect_max = np.maximum(sa["aspect"], sb["aspect"])
    time_gap = sb["t"] - sa["t"]
    ix = np.maximum(
        0.0, np.minimum(sa["x"] + sa["w"], sb["x"] + sb["w"]) - np.maximum(sa["x"], sb["x"])
    )
    iy = np.maximum(
        0.0, np.minimum(sa["y"] + sa["h"], sb["y"] + sb["h"]) - np.maximum(sa["y"], sb["y"])
    )
    inter = ix * iy
    overlap = inter / (sa["area"] + sb["area"] - inter)
    # |time gap| lets a linear model express temporal locality, which the
    # signed gap alone cannot
    return np.column_stack(
        [norm_dist, dist, size_ratio, aspect_min, aspect_max, time_gap,
         np.abs(time_gap), overlap]
    )


def pair_features(a: Observation, b: Observation) -> np.ndarray:
    """Ordered geometric feature vector for an observation pair (see PAIR_FEATURES)."""
    return _pair_feature_matrix(_side_arrays([a]), _side_arrays([b]))[0]


# ---------------------------------------------------------------------------
# relationship scoring

def _learned_rel_probs(features: np.ndarray, concept: LinearConcept, eps: float) -> np.ndarray:
    margins = features @ np.asarray(concept.weights) + concept.bias
    return np.clip(_margin_to_probability_array(margins, concept.platt), eps, 1.0 - eps)


def _tracklet_feature_cache(store: ArchiveStore, track_ids: Iterable[int]) -> dict[int, np.ndarray]:
    return {tid: tracklet_features(store, store.tracklets[tid]) for tid in set(track_ids)}


def reid_track_prob_matrix(store: ArchiveStore, models: CalibrationModel) -> np.ndarray:
    """All-pairs tracklet re-ID probabilities, cached on the archive table.

    Rows/columns follow table.track_list order; entry [i, j] is the
    calibrated probability that tracklets i and j are one entity.
    """
    table = store.table()
    key = ("reid_matrix", id(models.reid))
    cached = table.scratch.get(key)
    if cached is not None:
        return cached
    feats = np.vstack(
        [tracklet_features(store, store.tracklets[t]) for t in table.track_list]
    )
    W = models.reid.matrix()
    scores = feats @ W @ feats.T
    probs = _margin_to_probability_array(scores, models.reid.platt)
    table.scratch[key] = probs
    return probs


def _track_endpoint_arrays(store: ArchiveStore) -> dict[str, np.ndarray]:
    """Per-tracklet first/last times and positions, in table.track_list order."""
    table = store.table()
    cached = table.scratch.get("track_endpoints")
    if cached is not None:
        return cached
    t_first, t_last, x_first, y_first, x_last, y_last = [], [], [], [], [], []
    for tid in table.track_list:
        tr = store.tracklets[tid]
        first = store.get(tr.observations[0])
        last = store.get(tr.observations[-1])
        t_first.append(first.time)
        t_last.append(last.time)
        x_first.append(first.center[0])
        y_first.append(first.center[1])
        x_last.append(last.center[0])
        y_last.append(last.center[1])
    out = {
        "t_first": np.array(t_first), "t_last": np.array(t_last),
        "x_first": np.array(x_first), "y_first": np.array(y_first),
        "x_last": np.array(x_last), "y_last": np.array(y_last),
    }
    table.scratch["track_endpoints"] = out
    return out


def _reid_gate_rows(
    store: ArchiveStore, row_a: np.ndarray, row_b: np.ndarray, config: ScoringConfig
) -> np.ndarray:
    """True where a re-ID bridge between the track pairs is physically plausible."""
    ep = _track_endpoint_arrays(store)
    a_first, a_last = ep["t_first"][row_a], ep["t_last"][row_a]
    b_first, b_last = ep["t_first"][row_b], ep["t_last"][row_b]
    a_before = a_last < b_first
    b_before = b_last < a_first
    gap = np.where(a_before, b_first - a_last, np.where(b_before, a_first - b_last, -1.0))
    jump = np.where(
        a_before,
        np.hypot(ep["x_first"][row_b] - ep["x_last"][row_a],
                 ep["y_first"][row_b] - ep["y_last"][row_a]),
        np.hypot(ep["x_first"][row_a] - ep["x_last"][row_b],
                 ep["y_first"][row_a] - ep["y_last"][row_b]),
    )
    disjoint = a_before | b_before
    return disjoint & (gap <= config.reid_max_gap) & (jump <= config.reid_max_jump)


def _reid_bridge_plausible(
    store: ArchiveStore, a: Tracklet, b: Tracklet, config: ScoringConfig
) -> bool:
    if a.span[1] < b.span[0]:
        earlier, later_ = a, b
    elif b.span[1] < a.span[0]:
        earlier, later_ = b, a
    else:
        return False  # concurrent tracks cannot be one entity
    gap = later_.span[0] - earlier.span[1]
    if gap > config.reid_max_gap:
        return False
    end = store.get(earlier.observations[-1]).center
    start = store.get(later_.observations[0]).center
    return math.hypot(start[0] - end[0], start[1] - end[1]) <= config.reid_max_jump


def relationship_prob_pairs(
    store: ArchiveStore,
    idx_a: np.ndarray,
    idx_b: np.ndarray,
    relationship: str,
    models: CalibrationModel,
    config: ScoringConfig | None = None,
) -> np.ndarray:
    """Vectorized single-relationship probability for aligned table-row pairs."""
    config = config or ScoringConfig()
    eps = config.epsilon
    table = store.table()
    idx_a = np.asarray(idx_a)
    idx_b = np.asarray(idx_b)
    # a single detection cannot instantiate a relationship between two objects
    identical = idx_a == idx_b
    if relationship == "later":
        dt = table.t[idx_b] - table.t[idx_a]
        ok = (dt >= config.later_min) & (dt <= config.later_max) & ~identical
        return np.where(ok, 1.0 - eps, eps)
    if relationship == "same_entity":
        row_a = table.track_row[idx_a]
        row_b = table.track_row[idx_b]
        same = row_a == row_b
        probs = np.where(same, 1.0 - eps, eps)
        if config.use_reid and models.reid is not None:
            pair_probs = reid_track_prob_matrix(store, models)
            plausible = _reid_gate_rows(store, row_a, row_b, config)
            probs = np.where(same, probs, np.where(plausible, pair_probs[row_a, row_b], eps))
        probs = np.where(identical, eps, probs)
        return np.clip(probs, eps, 1.0 - eps)
    concept = models.rel_concept(relationship)
    features = _pair_feature_matrix(_table_side(table, idx_a), _table_side(table, idx_b))
    probs = _learned_rel_probs(features, concept, eps)
    # spatial relations hold between distinct objects; a track paired with
    # itself at another time is not an object pair
    same_track = table.track_ids[idx_a] == table.track_ids[idx_b]
    return np.where(identical | same_track, eps, probs)


def relationship_probability(
    a: Observation,
    b: Observation,
    relationship: str,
    models: CalibrationModel,
    store: ArchiveStore | None = None,
    config: ScoringConfig | None = None,
) -> float:
    config = config or ScoringConfig()
    eps = config.epsilon
    if a.obs_id == b.obs_id:
        return eps
    if relationship == "later":
        dt = b.time - a.time
        ok = config.later_min <= dt <= config.later_max
        return 1.0 - eps if ok else eps
    if relationship == "same_entity":
        if a.track_id == b.track_id:
            return 1.0 - eps
        if not config.use_reid or models.reid is None:
            return eps
        if store is None:
            raise DataError("same-entity scoring across tracks needs the archive store")
        ta = store.tracklets[a.track_id]
        tb = store.tracklets[b.track_id]
        if not _reid_bridge_plausible(store, ta, tb, config):
            return eps
        prob = reid_probability(ta, tb, models.reid, store)
        return _clamp(prob, eps)
    if a.track_id == b.track_id:
        return eps
    concept = models.rel_concept(relationship)
    return _clamp(concept.probability(pair_features(a, b)), eps)


def edge_probability(
    a: Observation,
    b: Observation,
    relationships: Iterable[str],
    models: CalibrationModel,
    store: ArchiveStore | None = None,
    config: ScoringConfig | None = None,
) -> float:
    """Product of per-relationship probabilities for one observation pair."""
    prob = 1.0
    for rel in sorted(set(relationships)):
        prob *= relationship_probability(a, b, rel, models, store, config)
    return prob


def edge_factor_log_probs(
    a: Observation,
    b: Observation,
    relationships: Iterable[str],
    models: CalibrationModel,
    store: ArchiveStore | None = None,
    config: ScoringConfig | None = None,
) -> dict[str, float]:
    return {
        rel: math.log(relationship_probability(a, b, rel, models, store, config))
        for rel in sorted(set(relationships))
    }


# ---------------------------------------------------------------------------
# re-ID

def tracklet_features(store: ArchiveStore, tracklet: Tracklet) -> np.ndarray:
    """Elementary tracklet features (TRACKLET_FEATURES order, constant last)."""
    if not tracklet.observations:
        raise ValueError(f"tracklet {tracklet.track_id} has no observations")
    obs = [store.get(i) for i in tracklet.observations]
    w = np.array([o.box[2] for o in obs])
    h = np.array([o.box[3] for o in obs])
    cx = np.array([o.center[0] for o in obs])
    cy = np.array([o.center[1] for o in obs])
    t = np.array([o.time for o in obs])
    if len(obs) > 1:
        steps = np.hypot(np.diff(cx), np.diff(cy)) / np.diff(t)
        speed = float(np.mean(steps))
    else:
        speed = 0.0
    base = np.array(
        [
            float(np.mean(w / h)),
            float(np.mean(cx)),
            float(np.mean(cy)),
            float(np.mean(np.sqrt(w * h))),
            speed,
            float((t[0] + t[-1]) / 2.0),
        ]
    )
    return np.concatenate([base, base * base, [1.0]])


def reid_probability(
    a: Tracklet, b: Tracklet, model: ReIdModel, store: ArchiveStore
) -> float:
    """Probability that two tracklets are the same physical entity."""
    xa = tracklet_features(store, a)
    xb = tracklet_features(store, b)
    return model.probability(xa, xb)


# ---------------------------------------------------------------------------
# training

def _train_logistic(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = 1e-4,
    fit_intercept: bool = True,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> tuple[np.ndarray, float]:
    """Deterministic full-batch Newton (IRLS) fit of a regularized logistic model."""
    n, d = X.shape
    if fit_intercept:
        Xb = np.column_stack([X, np.ones(n)])
    else:
        Xb = X
    k = Xb.shape[1]
    reg = np.full(k, l2)
    if fit_intercept:
        reg[-1] = 0.0
    w = np.zeros(k)
    for _ in range(max_iter):
        u = Xb @ w
        p = expit(u)
        g = Xb.T @ (p - y) + reg * w
        s = np.maximum(p * (1.0 - p), 1e-12)
        H = Xb.T @ (Xb * s[:, None]) + np.diag(reg + 1e-12)
        step = np.linalg.solve(H, g)
        w = w - step
        if float(np.max(np.abs(step))) < tol:
            break
    if fit_intercept:
        return w[:-1], float(w[-1])
    return w, 0.0


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row order independent of input permutation (sort by label then features)."""
    keys = [(float(y[i]),) + tuple(float(v) for v in X[i]) for i in range(len(y))]
    return np.array(sorted(range(len(y)), key=lambda i: keys[i]), dtype=np.int64)


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0.0] = 1.0
    return (X - mu) / sd, mu, sd


def _heldout_margins(
    Xs: np.ndarray, y: np.ndarray, l2: float, n_folds: int, fit_intercept: bool
) -> np.ndarray:
    """Cross-validated margins for the Platt fit (deterministic folds)."""
    n = len(y)
    folds = np.arange(n) % n_folds
    margins = np.zeros(n)
    for f in range(n_folds):
        hold = folds == f
        if hold.all() or (~hold).sum() == 0:
            continue
        if len(np.unique(y[~hold])) < 2:
            continue
        w, b = _train_logistic(Xs[~hold], y[~hold], l2=l2, fit_intercept=fit_intercept)
        margins[hold] = Xs[hold] @ w + b
    return margins


def train_relationship(
    examples: Sequence[tuple[Observation, Observation, int]],
    name: str = "relationship",
    l2: float = 0.1,
    n_folds: int = 5,
) -> LinearConcept:
    """Train a relationship classifier on labelled observation pairs.

    Regularized logistic fit over pair_features plus a Platt map fitted on
    held-out folds. Deterministic: examples are canonically reordered before
    training, so permuting the input changes nothing.
    """
    if len(examples) < 10:
        raise ValueError("need at least 10 relationship examples")
    X = np.vstack([pair_features(a, b) for a, b, _ in examples])
    y = np.array([1.0 if lbl else 0.0 for _, _, lbl in examples])
    if len(np.unique(y)) < 2:
        raise DegenerateTrainingError(f"relationship '{name}': single-class training data")
    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    Xs, mu, sd = _standardize(X)
    heldout = _heldout_margins(Xs, y, l2, n_folds, fit_intercept=True)
    platt = fit_platt(heldout, y)
    w_std, b_std = _train_logistic(Xs, y, l2=l2, fit_intercept=True)
    w_raw = w_std / sd
    b_raw = b_std - float(np.dot(w_std, mu / sd))
    return LinearConcept(name, tuple(w_raw), b_raw, platt, PAIR_FEATURES)


def _symmetric_outer(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    outer = np.einsum("ni,nj->nij", z1, z2)
    sym = (outer + outer.transpose(0, 2, 1)) / 2.0
    return sym.reshape(len(z1), -1)


def train_reid(
    store: ArchiveStore,
    examples: Sequence[tuple[Tracklet, Tracklet, int]],
    l2: float = 0.05,
    n_folds: int = 5,
) -> ReIdModel:
    """Train the bilinear same-entity model from labelled tracklet pairs.

    Features are symmetrized outer products of standardized tracklet
    features; standardization folds back into W so the model applies to raw
    features. Deterministic under permutation of examples.
    """
    if len(examples) < 10:
        raise ValueError("need at least 10 re-ID examples")
    xa = np.vstack([tracklet_features(store, a) for a, _, _ in examples])
    xb = np.vstack([tracklet_features(store, b) for _, b, _ in examples])
    y = np.array([1.0 if lbl else 0.0 for _, _, lbl in examples])
    if len(np.unique(y)) < 2:
        raise DegenerateTrainingError("re-ID: single-class training data")

    d = xa.shape[1]
    pooled = np.vstack([xa, xb])
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd[sd == 0.0] = 1.0
    mu[-1], sd[-1] = 0.0, 1.0  # constant feature stays 1
    za = (xa - mu) / sd
    zb = (xb - mu) / sd

    Phi = _symmetric_outer(za, zb)
    order = _canonical_order(Phi, y)
    Phi, y = Phi[order], y[order]
    heldout = _heldout_margins(Phi, y, l2, n_folds, fit_intercept=False)
    platt = fit_platt(heldout, y)
    w, _ = _train_logistic(Phi, y, l2=l2, fit_intercept=False)
    Wz = w.reshape(d, d)
    Wz = (Wz + Wz.T) / 2.0

    # Fold standardization into W: z = A @ x with affine A on the augmented vector.
    A = np.zeros((d, d))
    A[np.arange(d - 1), np.arange(d - 1)] = 1.0 / sd[:-1]
    A[: d - 1, d - 1] = -mu[:-1] / sd[:-1]
    A[d - 1, d - 1] = 1.0
    W_raw = A.T @ Wz @ A
    return ReIdModel(tuple(tuple(float(v) for v in row) for row in W_raw), platt)
