"""Observation archive: ingest, tracklets, time index, volumes, relationship frequencies.

The archive is immutable after ingest and safe to share across query
workers. The grounding unit is the single observation; tracklet identity
lives on the observation via track_id.
"""
from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigurationError, DegenerateArchiveError, IngestError


@dataclass(frozen=True)
class Observation:
    obs_id: int
    track_id: int
    time: float
    box: tuple[float, float, float, float]  # x, y, w, h in px
    class_margins: Mapping[str, float]
    attr_margins: Mapping[str, float]

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return (x + w / 2.0, y + h / 2.0)


@dataclass(frozen=True)
class Tracklet:
    track_id: int
    observations: tuple[int, ...]  # obs_ids in strictly increasing time order
    span: tuple[float, float]


@dataclass(frozen=True)
class Volume:
    x: float
    y: float
    w: float
    h: float
    t_start: float
    t_end: float

    def to_dict(self) -> dict:
        return {
            "x": self.x, "y": self.y, "w": self.w, "h": self.h,
            "t_start": self.t_start, "t_end": self.t_end,
        }

    @staticmethod
    def from_dict(d: dict) -> "Volume":
        return Volume(d["x"], d["y"], d["w"], d["h"], d["t_start"], d["t_end"])


@dataclass
class RelFreqTable:
    """Empirical archive frequencies p(r) in (0, 1]; unseen relationships are 1.0."""

    freq: dict[str, float]
    sample_size: int

    def get(self, relationship: str) -> float:
        return self.freq.get(relationship, 1.0)

    def to_dict(self) -> dict:
        return {"freq": dict(sorted(self.freq.items())), "sample_size": self.sample_size}

    @staticmethod
    def from_dict(d: dict) -> "RelFreqTable":
        return RelFreqTable(dict(d["freq"]), int(d["sample_size"]))


class _ObsTable:
    """Dense numpy view over the archive, ordered by (time, obs_id)."""

    def __init__(self, observations: list[Observation]):
        ordered = sorted(observations, key=lambda o: (o.time, o.obs_id))
        n = len(ordered)
        self.obs_ids = np.array([o.obs_id for o in ordered], dtype=np.int64)
        self.track_ids = np.array([o.track_id for o in ordered], dtype=np.int64)
        self.t = np.array([o.time for o in ordered], dtype=np.float64)
        box = np.array([o.box for o in ordered], dtype=np.float64).reshape(n, 4)
        self.x, self.y, self.w, self.h = box[:, 0], box[:, 1], box[:, 2], box[:, 3]
        self.cx = self.x + self.w / 2.0
        self.cy = self.y + self.h / 2.0
        self.area = self.w * self.h
        self.diag = np.hypot(self.w, self.h)
        self.aspect = self.w / self.h
        self._class_margins: dict[str, np.ndarray] = {}
        self._attr_margins: dict[str, np.ndarray] = {}
        class_names = {name for o in ordered for name in o.class_margins}
        attr_names = {name for o in ordered for name in o.attr_margins}
        for name in class_names:
            self._class_margins[name] = np.array(
                [o.class_margins.get(name, np.nan) for o in ordered], dtype=np.float64
            )
        for name in attr_names:
            self._attr_margins[name] = np.array(
                [o.attr_margins.get(name, np.nan) for o in ordered], dtype=np.float64
            )
        self.row_of = {int(oid): i for i, oid in enumerate(self.obs_ids)}
        self.track_list = sorted({int(t) for t in self.track_ids})
        track_index = {t: i for i, t in enumerate(self.track_list)}
        self.track_row = np.array(
            [track_index[int(t)] for t in self.track_ids], dtype=np.int64
        )
        # scratch for scoring-layer caches (re-ID pair matrix)
        self.scratch: dict = {}

    def __len__(self) -> int:
        return len(self.obs_ids)

    def class_margin(self, name: str) -> np.ndarray:
        try:
            return self._class_margins[name]
        except KeyError:
            raise ConfigurationError(f"archive carries no class margin '{name}'") from None

    def attr_margin(self, name: str) -> np.ndarray:
        try:
            return self._attr_margins[name]
        except KeyError:
            raise ConfigurationError(f"archive carries no attribute margin '{name}'") from None


class ArchiveStore:
    """Immutable set of observations grouped into tracklets, with a time index."""

    def __init__(self, observations: list[Observation]):
        self._observations: dict[int, Observation] = {}
        for obs in observations:
            if obs.obs_id in self._observations:
                raise IngestError(f"duplicate obs_id {obs.obs_id}")
            self._observations[obs.obs_id] = obs
        self._tracklets = _build_tracklets(self._observations.values())
        ordered = sorted(self._observations.values(), key=lambda o: (o.time, o.obs_id))
        self._times = [o.time for o in ordered]
        self._time_order = [o.obs_id for o in ordered]
        self._table: _ObsTable | None = None

    @property
    def observations(self) -> dict[int, Observation]:
        return self._observations

    @property
    def tracklets(self) -> dict[int, Tracklet]:
        return self._tracklets

    def __len__(self) -> int:
        return len(self._observations)

    def get(self, obs_id: int) -> Observation:
        return self._observations[obs_id]

    def tracklet_of(self, obs_id: int) -> Tracklet:
        return self._tracklets[self._observations[obs_id].track_id]

    def time_index(self, t_start: float, t_end: float) -> list[int]:
        """All obs_ids with time in [t_start, t_end], by binary search."""
        lo = bisect_left(self._times, t_start)
        hi = bisect_right(self._times, t_end)
        return self._time_order[lo:hi]

    def time_span(self) -> tuple[float, float]:
        if not self._times:
            return (0.0, 0.0)
        return (self._times[0], self._times[-1])

    def table(self) -> _ObsTable:
        if self._table is None:
            self._table = _ObsTable(list(self._observations.values()))
        return self._table

    def export_jsonl(self) -> Iterator[str]:
        for obs in self._observations.values():
            yield observation_to_json(obs)


def _build_tracklets(observations: Iterable[Observation]) -> dict[int, Tracklet]:
    grouped: dict[int, list[Observation]] = {}
    for obs in observations:
        grouped.setdefault(obs.track_id, []).append(obs)
    tracklets: dict[int, Tracklet] = {}
    for track_id, members in grouped.items():
        members.sort(key=lambda o: o.time)
        times = [o.time for o in members]
        for earlier, later_ in zip(times, times[1:]):
            if later_ <= earlier:
                raise IngestError(
                    f"track {track_id}: observation times not strictly increasing"
                )
        tracklets[track_id] = Tracklet(
            track_id,
            tuple(o.obs_id for o in members),
            (times[0], times[-1]),
        )
    return tracklets


def _validate_record(rec: dict, where: str) -> Observation:
    try:
        obs_id = int(rec["obs_id"])
        track_id = int(rec["track_id"])
        time = float(rec["t"])
        x, y, w, h = (float(v) for v in rec["box"])
        class_margins = {str(k): float(v) for k, v in rec.get("class_margins", {}).items()}
        attr_margins = {str(k): float(v) for k, v in rec.get("attr_margins", {}).items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"{where}: malformed record ({exc})") from exc
    if w <= 0 or h <= 0:
        raise IngestError(f"{where}: box must have positive width and height")
    if not math.isfinite(time) or time < 0:
        raise IngestError(f"{where}: time must be finite and non-negative")
    for name, value in list(class_margins.items()) + list(attr_margins.items()):
        if not math.isfinite(value):
            raise IngestError(f"{where}: non-finite margin for '{name}'")
    return Observation(obs_id, track_id, time, (x, y, w, h), class_margins, attr_margins)


def ingest_observations(record_stream: Iterable[str | dict]) -> ArchiveStore:
    """Parse and validate observation records (JSON Lines text or dicts).

    Parse failures name the 1-based line number; duplicate obs_ids are
    rejected.
    """
    observations: list[Observation] = []
    seen: set[int] = set()
    for lineno, record in enumerate(record_stream, start=1):
        where = f"line {lineno}"
        if isinstance(record, str):
            if not record.strip():
                continue
            try:
                record = json.loads(record)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{where}: invalid JSON ({exc.msg})") from exc
        obs = _validate_record(record, where)
        if obs.obs_id in seen:
            raise IngestError(f"{where}: duplicate obs_id {obs.obs_id}")
        seen.add(obs.obs_id)
        observations.append(obs)
    return ArchiveStore(observations)


def load_archive(path) -> ArchiveStore:
    with open(path, "r", encoding="utf-8") as fh:
        return ingest_observations(fh)


def observation_to_json(obs: Observation) -> str:
    rec = {
        "obs_id": obs.obs_id,
        "track_id": obs.track_id,
        "t": obs.time,
        "box": list(obs.box),
        "class_margins": dict(sorted(obs.class_margins.items())),
        "attr_margins": dict(sorted(obs.attr_margins.items())),
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_archive(store: ArchiveStore, path) -> dict:
    """Write JSONL plus a manifest recording source, counts and checksum."""
    digest = hashlib.sha256()
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for line in store.export_jsonl():
            fh.write(line + "\n")
            digest.update(line.encode("utf-8"))
            count += 1
    span = store.time_span()
    return {
        "source": str(path),
        "n_observations": count,
        "n_tracklets": len(store.tracklets),
        "sha256": digest.hexdigest(),
        "time_span": list(span),
        "frequency_scope": "global",
    }


def spatio_temporal_volume(store: ArchiveStore, obs_ids: Iterable[int]) -> Volume:
    """Smallest axis-aligned spatio-temporal hull of the given observations."""
    obs = [store.get(i) for i in obs_ids]
    return hull_volume(obs)


def hull_volume(observations: list[Observation]) -> Volume:
    if not observations:
        raise ValueError("spatio_temporal_volume of an empty set")
    x0 = min(o.box[0] for o in observations)
    y0 = min(o.box[1] for o in observations)
    x1 = max(o.box[0] + o.box[2] for o in observations)
    y1 = max(o.box[1] + o.box[3] for o in observations)
    t0 = min(o.time for o in observations)
    t1 = max(o.time for o in observations)
    return Volume(x0, y0, x1 - x0, y1 - y0, t0, t1)


def _padded_interval(t_start: float, t_end: float, min_duration: float) -> tuple[float, float]:
    if t_end - t_start >= min_duration:
        return t_start, t_end
    mid = (t_start + t_end) / 2.0
    return mid - min_duration / 2.0, mid + min_duration / 2.0


def volume_iou(a: Volume, b: Volume, min_duration: float = 0.0) -> float:
    """Spatio-temporal intersection-over-union of two volumes.

    min_duration > 0 pads each time interval (symmetrically about its
    midpoint) to at least that length, so instantaneous groundings remain
    comparable to extended ones.
    """
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    area_i = ix * iy
    if area_i <= 0.0:
        return 0.0
    a0, a1 = _padded_interval(a.t_start, a.t_end, min_duration)
    b0, b1 = _padded_interval(b.t_start, b.t_end, min_duration)
    dt = min(a1, b1) - max(a0, b0)
    if dt < 0.0:
        return 0.0
    dur_a, dur_b = a1 - a0, b1 - b0
    if dur_a == 0.0 and dur_b == 0.0:
        # Both instantaneous at the same moment: fall back to area IoU.
        union_area = a.w * a.h + b.w * b.h - area_i
        return area_i / union_area
    vol_i = area_i * dt
    vol_u = a.w * a.h * dur_a + b.w * b.h * dur_b - vol_i
    if vol_u <= 0.0:
        return 0.0
    return vol_i / vol_u


def query_candidates(store: ArchiveStore, node, models, tau: float) -> set[int]:
    """Observations whose node probability reaches tau (coarse retrieval)."""
    from .concepts import node_probability_array

    if len(store) == 0:
        return set()
    probs = node_probability_array(store, node, models)
    table = store.table()
    keep = probs >= tau
    return {int(oid) for oid in table.obs_ids[keep]}


def estimate_relationship_frequencies(
    store: ArchiveStore,
    models,
    n_samples: int | None = None,
    seed: int = 0,
    relationships: Iterable[str] | None = None,
    decision_threshold: float = 0.5,
    config=None,
) -> RelFreqTable:
    """Empirical p(r): fraction of sampled ordered observation pairs for which
    relationship r holds (factor probability above the decision threshold).

    With n_samples covering all ordered pairs the enumeration is exhaustive.
    Relationships that never pass map to exactly 1.0 (nondiscriminative).
    """
    from .concepts import relationship_prob_pairs, scoring_defaults

    n = len(store)
    if n < 2:
        raise DegenerateArchiveError("need at least 2 observations to sample pairs")
    config = config or scoring_defaults()
    if relationships is None:
        relationships = sorted(set(models.rel_models) | {"later", "same_entity"})
    total_pairs = n * (n - 1)
    if n_samples is None:
        n_samples = min(100_000, total_pairs)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")

    if n_samples >= total_pairs:
        grid_a, grid_b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        mask = grid_a != grid_b
        idx_a = grid_a[mask].ravel()
        idx_b = grid_b[mask].ravel()
    else:
        rng = np.random.default_rng(seed)
        idx_a = np.empty(0, dtype=np.int64)
        idx_b = np.empty(0, dtype=np.int64)
        while len(idx_a) < n_samples:
            need = n_samples - len(idx_a)
            cand_a = rng.integers(0, n, size=need + 16)
            cand_b = rng.integers(0, n, size=need + 16)
            ok = cand_a != cand_b
            idx_a = np.concatenate([idx_a, cand_a[ok][:need]])
            idx_b = np.concatenate([idx_b, cand_b[ok][:need]])

    freq: dict[str, float] = {}
    for rel in relationships:
        probs = relationship_prob_pairs(store, idx_a, idx_b, rel, models, config)
        fraction = float(np.mean(probs > decision_threshold))
        freq[rel] = fraction if fraction > 0.0 else 1.0
    return RelFreqTable(freq, int(len(idx_a)))
