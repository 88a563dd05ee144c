"""Command-line front end: generate, calibrate, plan, query, evaluate, serve.

Exit codes: 0 success, 1 usage error, 2 data error, 3 infeasible recall
target.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .archive import (
    estimate_relationship_frequencies,
    load_archive,
    write_archive,
    RelFreqTable,
)
from .concepts import ScoringConfig, model_from_dict, model_to_dict
from .errors import AgsearchError, InfeasibleRecallError
from .matcher import Grounding, RetrievalResult, retrieve
from .planner import ConceptStats, hpst, select_thresholds, threshold_report
from .querymodel import parse_activity_graph
from .synthlab import (
    GroundTruthInstance,
    NoiseParams,
    SynthConfig,
    TEMPLATE_NAMES,
    brute_force_ground,
    calibrate_models,
    collect_concept_stats,
    evaluate,
    generate_dataset,
    inject_noise,
    stats_from_archive,
)
from .archive import Volume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INFEASIBLE = 3

DEFAULT_ETA = 0.9
DEFAULT_K = 20
DEFAULT_REFINE_ROUNDS = 3
DEFAULT_DECAY = 0.5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(obj, path: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_json(path: str):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _load_models(path: str):
    return model_from_dict(_load_json(path))


def _load_stats(args, store, models, seed: int) -> ConceptStats:
    if getattr(args, "stats", None):
        return ConceptStats.from_dict(_load_json(args.stats))
    return stats_from_archive(store, models, seed=seed)


def _scoring_config(args) -> ScoringConfig:
    return ScoringConfig(use_reid=not getattr(args, "no_reid", False))


def _estimate_freqs(store, models, args, config) -> RelFreqTable:
    return estimate_relationship_frequencies(
        store,
        models,
        n_samples=getattr(args, "freq_samples", None),
        seed=getattr(args, "seed", 0),
        config=config,
    )


def cmd_generate(args) -> int:
    noise = NoiseParams(args.miss_rate, args.track_break_rate, args.margin_noise)
    config = SynthConfig(
        extent=args.extent,
        duration=args.duration,
        n_clutter_tracklets=args.clutter,
        planted=((args.template, args.count),) if args.count > 0 else (),
        noise=noise,
        seed=args.seed,
    )
    ds = generate_dataset(config)
    store = ds.store
    if noise.miss_rate or noise.track_break_rate or noise.margin_noise_sigma:
        store = inject_noise(store, noise, seed=args.seed + 1)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_archive(store, out / "archive.jsonl")
    manifest["generator"] = config.manifest()
    _dump_json(manifest, str(out / "manifest.json"))
    _dump_json([t.to_dict() for t in ds.truths], str(out / "truth.json"))
    _dump_json(ds.labels, str(out / "labels.json"))
    print(
        f"generated {manifest['n_observations']} observations / "
        f"{manifest['n_tracklets']} tracklets, {len(ds.truths)} planted instances -> {out}"
    )
    return EXIT_OK


def cmd_ingest(args) -> int:
    store = load_archive(args.archive)
    manifest = write_archive(store, args.archive) if args.rewrite else {
        "source": str(args.archive),
        "n_observations": len(store),
        "n_tracklets": len(store.tracklets),
        "time_span": list(store.time_span()),
        "frequency_scope": "global",
    }
    if args.models:
        models = _load_models(args.models)
        freqs = _estimate_freqs(store, models, args, ScoringConfig())
        manifest["relationship_frequencies"] = freqs.to_dict()
        manifest["frequency_seed"] = args.seed
    _dump_json(manifest, args.out)
    print(f"ingested {len(store)} observations in {len(store.tracklets)} tracklets")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    store = load_archive(args.archive)
    labels = _load_json(args.labels)
    labels = {"obs": {int(k): v for k, v in labels["obs"].items()}}
    models = calibrate_models(store, labels, seed=args.seed)
    _dump_json(model_to_dict(models), args.out)
    if args.stats_out:
        stats = collect_concept_stats(store, models, labels, seed=args.seed)
        _dump_json(stats.to_dict(), args.stats_out)
    print(f"calibrated {len(models.class_models)} class / {len(models.attr_models)} attribute / "
          f"{len(models.rel_models)} relationship concepts -> {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    graph = parse_activity_graph(Path(args.query).read_text(encoding="utf-8"))
    store = load_archive(args.archive)
    models = _load_models(args.models)
    config = _scoring_config(args)
    freqs = _estimate_freqs(store, models, args, config)
    stats = _load_stats(args, store, models, args.seed)
    tree = hpst(graph, freqs)
    taus = select_thresholds(graph, stats, args.eta)
    doc = {
        "tree": {
            "root": tree.root,
            "parent": dict(sorted(tree.parent.items())),
            "edges": [f"{e.a}--{e.b}" for e in tree.tree_edges],
            "total_weight": tree.total_weight,
        },
        "frequencies": freqs.to_dict(),
        "thresholds": taus.to_dict(),
        "report": threshold_report(graph, stats, taus),
    }
    _dump_json(doc, args.out)
    print(f"tree rooted at '{tree.root}' with weight {tree.total_weight:.4f}")
    return EXIT_OK


def _result_document(result: RetrievalResult, args) -> dict:
    doc = result.to_dict()
    doc["eta"] = args.eta
    doc["k"] = args.k
    doc["seed"] = args.seed
    return doc


def cmd_query(args) -> int:
    graph = parse_activity_graph(Path(args.query).read_text(encoding="utf-8"))
    store = load_archive(args.archive)
    models = _load_models(args.models)
    config = _scoring_config(args)
    freqs = _estimate_freqs(store, models, args, config)
    stats = _load_stats(args, store, models, args.seed)
    result = retrieve(
        graph,
        store,
        models,
        freqs,
        stats,
        eta=args.eta,
        k=args.k,
        config=config,
        refine_rounds=args.refine_rounds,
        refine_decay=args.decay,
        top_r=args.top_r,
    )
    _dump_json(_result_document(result, args), args.out)
    print(
        f"{len(result.ranked)} groundings (refinement rounds: {result.refinement_rounds})"
    )
    for i, g in enumerate(result.ranked[: min(5, len(result.ranked))]):
        print(f"  #{i + 1} log-score {g.full_log_score:.4f} mapping {dict(sorted(g.mapping.items()))}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    graph = parse_activity_graph(Path(args.query).read_text(encoding="utf-8"))
    store = load_archive(args.archive)
    models = _load_models(args.models)
    best = brute_force_ground(graph, store, models, _scoring_config(args))
    _dump_json(
        {
            "mapping": dict(sorted(best.mapping.items())),
            "full_log_score": best.full_log_score,
            "volume": best.volume.to_dict(),
        },
        args.out,
    )
    print(f"MAP grounding log-score {best.full_log_score:.4f}")
    return EXIT_OK


def _load_result_groundings(doc: dict) -> RetrievalResult:
    ranked = []
    for item in doc["ranked"]:
        g = Grounding(
            {k: int(v) for k, v in item["mapping"].items()},
            item.get("tree_log_score", 0.0),
            item.get("full_log_score"),
            Volume.from_dict(item["volume"]) if "volume" in item else None,
        )
        ranked.append(g)
    from .planner import ThresholdAssignment

    return RetrievalResult(ranked, ThresholdAssignment({}, {}, doc.get("eta", 0.0)),
                           doc.get("refinement_rounds", 0))


def cmd_eval(args) -> int:
    from .report import write_report_bundle

    result = _load_result_groundings(_load_json(args.result))
    truths = [GroundTruthInstance.from_dict(d) for d in _load_json(args.truth)]
    report = evaluate(result, truths)
    doc = report.to_dict()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc["artifacts"] = write_report_bundle(report, out_dir)
    _dump_json(doc, str(out_dir / "report.json"))
    print(f"AUC: {report.auc:.4f}   matched {report.n_matched}/{report.n_truth} truths "
          f"over {report.n_returns} returns")
    for k in sorted(report.precision_at_k):
        v = report.precision_at_k[k]
        print(f"  P@{k}: {'-' if v is None else f'{v:.3f}'}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import run_service

    store = load_archive(args.archive)
    models = _load_models(args.models)
    stats = _load_stats(args, store, models, args.seed)
    config = _scoring_config(args)
    freqs = _estimate_freqs(store, models, args, config)
    run_service(
        store,
        models,
        stats,
        freqs,
        host=args.host,
        port=args.port,
        config=config,
        ui_dir=args.ui_dir,
    )
    return EXIT_OK


def _add_common_query_flags(p: _Parser) -> None:
    p.add_argument("--eta", type=float, default=DEFAULT_ETA,
                   help=f"recall target in (0,1] (default {DEFAULT_ETA})")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument("--freq-samples", type=int, default=None,
                   help="pair samples for relationship frequencies (default min(1e5, all pairs))")
    p.add_argument("--stats", help="concept stats JSON from calibrate --stats-out")
    p.add_argument("--no-reid", action="store_true",
                   help="disable re-ID bridging for same-entity edges")


def build_parser() -> _Parser:
    parser = _Parser(prog="agsearch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"agsearch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic archive with planted activities")
    p.add_argument("--template", choices=TEMPLATE_NAMES, default="object_deposit")
    p.add_argument("--count", type=int, default=20, help="planted instances (default 20)")
    p.add_argument("--clutter", type=int, default=200, help="clutter tracklets (default 200)")
    p.add_argument("--extent", type=float, default=2000.0, help="scene extent in px")
    p.add_argument("--duration", type=float, default=600.0, help="archive duration in s")
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--track-break-rate", type=float, default=0.0)
    p.add_argument("--margin-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="validate an archive and write its manifest")
    p.add_argument("--archive", required=True)
    p.add_argument("--models", help="optional model bundle for frequency estimation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freq-samples", type=int, default=None)
    p.add_argument("--rewrite", action="store_true", help="rewrite the archive canonically")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("calibrate", help="train the model bundle from a labelled archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-out", help="also write concept score statistics")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("plan", help="show the spanning tree and thresholds for a query")
    p.add_argument("--query", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--models", required=True)
    _add_common_query_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("query", help="retrieve ranked groundings for an activity graph")
    p.add_argument("--query", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--models", required=True)
    _add_common_query_flags(p)
    p.add_argument("--k", type=int, default=DEFAULT_K, help=f"returns (default {DEFAULT_K})")
    p.add_argument("--refine-rounds", type=int, default=DEFAULT_REFINE_ROUNDS,
                   help=f"max threshold relaxations (default {DEFAULT_REFINE_ROUNDS})")
    p.add_argument("--decay", type=float, default=DEFAULT_DECAY,
                   help=f"relaxation factor per round (default {DEFAULT_DECAY})")
    p.add_argument("--top-r", type=int, default=4,
                   help="tree groundings kept per root before rescoring (default 4)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("oracle", help="brute-force MAP grounding (small archives only)")
    p.add_argument("--query", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--no-reid", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="score a result file against ground truth")
    p.add_argument("--result", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the analyst console HTTP service")
    p.add_argument("--archive", required=True)
    p.add_argument("--models", required=True)
    _add_common_query_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ui-dir", help="static assets directory for the web console")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleRecallError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AgsearchError, ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
