"""HTTP API for the analyst console.

Endpoints (all JSON):
  POST /api/query                      run a query, returns ranked groundings
  GET  /api/archive/summary            archive counts, span, frequencies
  GET  /api/result/{id}/grounding/{n}  per-factor breakdown of one return
  GET  /api/health                     liveness
Static web-console assets are served from ui_dir when configured.

Responses are pure functions of (archive, models, request body); results
are cached in a bounded LRU keyed by the canonical request hash, so
replaying a logged request reproduces the logged response byte-for-byte.
"""
from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import OrderedDict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .archive import ArchiveStore, RelFreqTable
from .concepts import (
    CalibrationModel,
    ScoringConfig,
    edge_factor_log_probs,
    node_factor_probabilities,
)
from .errors import InfeasibleRecallError
from .matcher import RetrievalResult, retrieve
from .planner import ConceptStats
from .querymodel import ActivityGraph, QueryValidationError, from_document

import math

_CACHE_SIZE = 64

_GUESSED_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json; charset=utf-8",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


class ServiceState:
    """Loaded archive/models plus the query log and bounded result cache."""

    def __init__(
        self,
        store: ArchiveStore | None,
        models: CalibrationModel | None,
        stats: ConceptStats | None,
        freqs: RelFreqTable | None,
        config: ScoringConfig | None = None,
    ):
        self.store = store
        self.models = models
        self.stats = stats
        self.freqs = freqs
        self.config = config or ScoringConfig()
        self._results: OrderedDict[str, tuple[ActivityGraph, RetrievalResult, dict]] = OrderedDict()
        self._log: list[dict] = []
        self._lock = threading.Lock()

    @property
    def loaded(self) -> bool:
        return self.store is not None and self.models is not None

    def query_log(self) -> list[dict]:
        with self._lock:
            return list(self._log)

    def run_query(self, body: dict) -> tuple[int, dict]:
        if not self.loaded:
            return 409, {"error": "no_archive", "detail": "no archive loaded"}
        if not isinstance(body, dict) or "graph" not in body:
            return 400, {"error": "invalid_request", "detail": "body must carry 'graph'"}
        eta = float(body.get("eta", 0.9))
        k = int(body.get("k", 20))
        canonical = json.dumps(
            {"graph": body["graph"], "eta": eta, "k": k}, sort_keys=True, separators=(",", ":")
        )
        result_id = hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
        with self._lock:
            cached = self._results.get(result_id)
            if cached is not None:
                self._results.move_to_end(result_id)
        if cached is not None:
            return 200, cached[2]
        try:
            graph = from_document(body["graph"])
        except QueryValidationError as exc:
            return 400, {"error": "invalid_query", "detail": exc.violations}
        except ValueError as exc:
            return 400, {"error": "invalid_query", "detail": str(exc)}
        try:
            result = retrieve(
                graph, self.store, self.models, self.freqs, self.stats,
                eta=eta, k=k, config=self.config,
            )
        except InfeasibleRecallError as exc:
            return 422, {"error": "infeasible_eta", "detail": str(exc)}
        doc = {
            "result_id": result_id,
            "eta": eta,
            "k": k,
            "refinement_rounds": result.refinement_rounds,
            "thresholds": result.thresholds_used.to_dict(),
            "ranked": [
                {"rank": i + 1, **g.to_dict()} for i, g in enumerate(result.ranked)
            ],
        }
        with self._lock:
            self._results[result_id] = (graph, result, doc)
            self._results.move_to_end(result_id)
            while len(self._results) > _CACHE_SIZE:
                self._results.popitem(last=False)
            self._log.append(
                {
                    "time": time.time(),
                    "result_id": result_id,
                    "eta": eta,
                    "k": k,
                    "graph": body["graph"],
                    "n_returned": len(result.ranked),
                }
            )
        return 200, doc

    def archive_summary(self) -> tuple[int, dict]:
        if not self.loaded:
            return 409, {"error": "no_archive", "detail": "no archive loaded"}
        store = self.store
        counts: dict[str, int] = {}
        for obs in store.observations.values():
            if obs.class_margins:
                best = max(sorted(obs.class_margins), key=lambda c: obs.class_margins[c])
                counts[best] = counts.get(best, 0) + 1
        span = store.time_span()
        return 200, {
            "n_observations": len(store),
            "n_tracklets": len(store.tracklets),
            "time_span": list(span),
            "class_counts": dict(sorted(counts.items())),
            "relationship_frequencies": self.freqs.to_dict() if self.freqs else None,
        }

    def grounding_detail(self, result_id: str, rank: int) -> tuple[int, dict]:
        with self._lock:
            entry = self._results.get(result_id)
        if entry is None:
            return 404, {"error": "unknown_result", "detail": result_id}
        graph, result, _ = entry
        if rank < 1 or rank > len(result.ranked):
            return 404, {"error": "unknown_rank", "detail": f"rank {rank} of {len(result.ranked)}"}
        g = result.ranked[rank - 1]
        obs = {q: self.store.get(o) for q, o in g.mapping.items()}
        node_factors = {}
        for node in graph.nodes:
            factors = node_factor_probabilities(node, obs[node.node_id], self.models, self.config)
            node_factors[node.node_id] = {
                name: math.log(p) for name, p in sorted(factors.items())
            }
        edge_factors = []
        for edge in graph.edges:
            factors = edge_factor_log_probs(
                obs[edge.a], obs[edge.b], edge.relationships, self.models, self.store, self.config
            )
            edge_factors.append({"a": edge.a, "b": edge.b, "factors": dict(sorted(factors.items()))})
        return 200, {
            "rank": rank,
            "full_log_score": g.full_log_score,
            "mapping": dict(sorted(g.mapping.items())),
            "node_factors": node_factors,
            "edge_factors": edge_factors,
            "volume": g.volume.to_dict() if g.volume else None,
            "observations": {
                str(o.obs_id): {
                    "box": list(o.box),
                    "t": o.time,
                    "track_id": o.track_id,
                }
                for o in obs.values()
            },
        }


def _make_handler(state: ServiceState, ui_dir: str | None):
    ui_root = Path(ui_dir).resolve() if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *log_args):
            pass

        def _send_json(self, status: int, doc: dict) -> None:
            payload = (json.dumps(doc, sort_keys=True) + "\n").encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _serve_static(self, raw_path: str) -> None:
            if ui_root is None:
                self._send_json(404, {"error": "not_found", "detail": raw_path})
                return
            rel = raw_path.lstrip("/") or "index.html"
            target = (ui_root / rel).resolve()
            if not str(target).startswith(str(ui_root)) or not target.is_file():
                self._send_json(404, {"error": "not_found", "detail": raw_path})
                return
            payload = target.read_bytes()
            self.send_response(200)
            self.send_header(
                "Content-Type", _GUESSED_TYPES.get(target.suffix, "application/octet-stream")
            )
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path == "/api/health":
                self._send_json(200, {"status": "ok", "archive_loaded": state.loaded})
                return
            if path == "/api/archive/summary":
                self._send_json(*state.archive_summary())
                return
            parts = path.strip("/").split("/")
            if len(parts) == 5 and parts[:2] == ["api", "result"] and parts[3] == "grounding":
                try:
                    rank = int(parts[4])
                except ValueError:
                    self._send_json(404, {"error": "unknown_rank", "detail": parts[4]})
                    return
                self._send_json(*state.grounding_detail(parts[2], rank))
                return
            if path.startswith("/api/"):
                self._send_json(404, {"error": "not_found", "detail": path})
                return
            self._serve_static(path)

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path != "/api/query":
                self._send_json(404, {"error": "not_found", "detail": path})
                return
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                self._send_json(400, {"error": "invalid_json", "detail": str(exc)})
                return
            self._send_json(*state.run_query(body))

    return Handler


def make_server(
    store: ArchiveStore | None,
    models: CalibrationModel | None,
    stats: ConceptStats | None,
    freqs: RelFreqTable | None,
    host: str = "127.0.0.1",
    port: int = 0,
    config: ScoringConfig | None = None,
    ui_dir: str | None = None,
) -> tuple[ThreadingHTTPServer, ServiceState]:
    state = ServiceState(store, models, stats, freqs, config)
    server = ThreadingHTTPServer((host, port), _make_handler(state, ui_dir))
    return server, state


def run_service(store, models, stats, freqs, host, port, config=None, ui_dir=None) -> None:
    server, _ = make_server(store, models, stats, freqs, host, port, config, ui_dir)
    print(f"serving on http://{host}:{server.server_address[1]}/ "
          f"({len(store)} observations loaded)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
