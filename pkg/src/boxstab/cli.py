"""Command-line front door.

Subcommands: validate, score, map, fit, predict, loo, synth, report, stats.
Every artifact is written atomically and is byte-identical across re-runs with
the same inputs and seed. Exit codes: 0 success, 1 validation failure,
2 computation error; errors are emitted as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace

from scipy import stats as scipy_stats

from . import autoeval, baselines, detmetrics, synthworld
from .dumps import (SampleSetManifest, _write_text_atomic, load_manifest,
                    load_manifest_records, parse_dump, validate_manifest)
from .errors import (BoxStabError, DumpParseError, RegressionError,
                     ScoreUndefinedError, SearchError, ValidationError)
from .matching import ScoreKind, StabilityOptions

OUT_DIR_ENV = "BOXSTAB_OUT_DIR"


def _out_path(arg: str | None, default_name: str) -> str:
    if arg is not None:
        return arg
    return os.path.join(os.environ.get(OUT_DIR_ENV, "."), default_name)


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _load_manifests(paths: list[str]) -> list[tuple[str, SampleSetManifest]]:
    out = []
    for path in paths:
        out.append((path, load_manifest(path)))
    out.sort(key=lambda item: item[1].set_id)
    return out


def _records_for(path: str, manifest: SampleSetManifest, base_dir: str | None):
    base = base_dir if base_dir is not None else (os.path.dirname(path) or ".")
    return load_manifest_records(manifest, base_dir=base)


def _stability_options(args) -> StabilityOptions:
    return StabilityOptions(score_threshold=args.score_threshold,
                            classwise=not args.no_classwise,
                            pair_score=args.pair_score,
                            count_penalty=args.count_penalty)


def _add_manifest_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", nargs="+", required=True,
                        help="sample-set manifest file(s)")
    parser.add_argument("--base-dir", default=None,
                        help="directory dump paths are relative to "
                             "(default: each manifest's directory)")


def _add_stability_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--score-threshold", type=float, default=0.3,
                        help="drop detections below this confidence (default 0.3)")
    parser.add_argument("--no-classwise", action="store_true",
                        help="match across classes instead of within each class")
    parser.add_argument("--pair-score", choices=["iou", "giou_rescaled"], default="iou",
                        help="per-pair agreement measure (default iou)")
    parser.add_argument("--count-penalty", action="store_true",
                        help="scale stability by matched fraction")


def cmd_validate(args) -> int:
    findings = []
    for path in args.manifest or []:
        try:
            manifest = load_manifest(path)
        except (ValidationError, OSError, json.JSONDecodeError) as err:
            findings.append({"input": path, "location": "manifest", "message": str(err)})
            continue
        base = args.base_dir if args.base_dir is not None else (os.path.dirname(path) or ".")
        report = validate_manifest(manifest, base_dir=base)
        findings.extend({"input": path, "location": f.location, "message": f.message}
                        for f in report.findings)
    for path in args.dump or []:
        try:
            parse_dump(path)
        except (DumpParseError, ValidationError) as err:
            location = f"line {err.line}" if getattr(err, "line", None) else "dump"
            findings.append({"input": path, "location": location, "message": str(err)})
        except OSError as err:
            findings.append({"input": path, "location": "dump", "message": str(err)})
    text = json.dumps({"findings": findings}, ensure_ascii=False, indent=2) + "\n"
    if args.out is not None:
        _write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 1 if findings else 0


def cmd_score(args) -> int:
    opts = _stability_options(args)
    reference = None
    kind = ScoreKind(args.kind)
    if kind is ScoreKind.FD:
        if args.reference is None:
            raise ValidationError("--reference is required for kind fd", field="reference")
        reference = baselines.load_gaussian_stats(args.reference)
    rows = []
    for path, manifest in _load_manifests(args.manifest):
        records = _records_for(path, manifest, args.base_dir)
        score = autoeval.measure_set(records, kind, opts, tau=args.tau,
                                     reference_stats=reference)
        rows.append([manifest.set_id, manifest.source_name, score.kind.value,
                     _fmt(score.value), str(score.valid_images), str(score.skipped_images)])
    header = ["set_id", "source_name", "kind", "value", "valid_images", "skipped_images"]
    _write_text_atomic(_out_path(args.out, "scores.csv"), _csv_text(header, rows))
    return 0


def cmd_map(args) -> int:
    rows = []
    for path, manifest in _load_manifests(args.manifest):
        records = _records_for(path, manifest, args.base_dir)
        report = detmetrics.evaluate_detections(records, pass_selector=args.pass_selector)
        rows.append([manifest.set_id, manifest.source_name, _fmt(report.map_all),
                     _fmt(report.map50), _fmt(report.map75)])
    header = ["set_id", "source_name", "map_all", "map50", "map75"]
    _write_text_atomic(_out_path(args.out, "maps.csv"), _csv_text(header, rows))
    return 0


def _read_csv(path: str) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _score_lookup(score_paths: list[str]) -> dict[tuple[str, str], tuple[str, float]]:
    """(set_id, kind) -> (source_name, value) pooled over score tables."""
    table: dict[tuple[str, str], tuple[str, float]] = {}
    for path in score_paths:
        for row in _read_csv(path):
            key = (row["set_id"], row["kind"])
            if key in table:
                raise ValidationError(f"duplicate score row for {key}", field="scores")
            table[key] = (row["source_name"], float(row["value"]))
    return table


def _meta_samples_from_tables(score_paths: list[str], maps_path: str,
                              feature_kinds: list[str]) -> list[autoeval.MetaSample]:
    scores = _score_lookup(score_paths)
    samples = []
    for row in sorted(_read_csv(maps_path), key=lambda r: r["set_id"]):
        set_id = row["set_id"]
        features = []
        for kind in feature_kinds:
            entry = scores.get((set_id, kind))
            if entry is None:
                raise ValidationError(f"no {kind} score for set {set_id}", field="scores")
            features.append(entry[1])
        samples.append(autoeval.MetaSample(set_id=set_id, source_name=row["source_name"],
                                           features=tuple(features),
                                           target_map=float(row["map_all"])))
    if not samples:
        raise ValidationError("maps table is empty", field="maps")
    return samples


def _parse_features(spec: str) -> list[str]:
    kinds = [k.strip().lower() for k in spec.split(",") if k.strip()]
    if not kinds:
        raise ValidationError("no feature kinds given", field="features")
    for kind in kinds:
        ScoreKind(kind)
    return kinds


def cmd_fit(args) -> int:
    kinds = _parse_features(args.features)
    samples = _meta_samples_from_tables(args.scores, args.maps, kinds)
    model = autoeval.fit_regressor(samples, feature_kinds=kinds)
    obj = {"feature_kinds": list(model.feature_kinds),
           "weights": list(model.weights),
           "r2": model.r2,
           "rmse": model.rmse}
    text = json.dumps(obj, ensure_ascii=False, indent=2) + "\n"
    _write_text_atomic(_out_path(args.out, "model.json"), text)
    return 0


def _load_model(path: str) -> autoeval.LinearModel:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        return autoeval.LinearModel(weights=tuple(float(w) for w in obj["weights"]),
                                    feature_kinds=tuple(obj["feature_kinds"]),
                                    r2=float(obj["r2"]), rmse=float(obj["rmse"]))
    except (KeyError, TypeError) as err:
        raise ValidationError(f"malformed model file: {err}", field="model") from None


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    scores = _score_lookup(args.scores)
    set_ids = sorted({set_id for set_id, _ in scores})
    rows = []
    for set_id in set_ids:
        features = []
        source = ""
        for kind in model.feature_kinds:
            entry = scores.get((set_id, kind))
            if entry is None:
                raise ValidationError(f"no {kind} score for set {set_id}", field="scores")
            source = entry[0]
            features.append(entry[1])
        estimate = autoeval.predict_map(model, features)
        rows.append([set_id, source, _fmt(estimate)])
    _write_text_atomic(_out_path(args.out, "predictions.csv"),
                       _csv_text(["set_id", "source_name", "estimate"], rows))
    return 0


def cmd_loo(args) -> int:
    kinds = _parse_features(args.features)
    if args.world is not None:
        config = synthworld.load_world_config(args.world)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        provider = synthworld.build_meta_provider(config, feature_kinds=kinds)
        repeats = args.repeats
    elif args.scores and args.maps:
        samples = _meta_samples_from_tables(args.scores, args.maps, kinds)
        provider = autoeval.table_provider(samples)
        repeats = 1
    else:
        raise ValidationError("loo needs either --world or both --scores and --maps",
                              field="loo")
    report = autoeval.loo_evaluate(provider, repeats=repeats, test_cap=args.test_cap)
    _write_text_atomic(_out_path(args.out, "loo.csv"), autoeval.loo_report_csv(report))
    return 0


def cmd_synth(args) -> int:
    if args.config is not None:
        config = synthworld.load_world_config(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    else:
        if args.seed is None:
            raise ValidationError("--seed is required when no --config is given",
                                  field="seed")
        config = synthworld.WorldConfig(seed=args.seed)
    overrides = {}
    if args.sources is not None:
        overrides["sources"] = args.sources
    if args.sets is not None:
        overrides["sets_per_source"] = args.sets
    if args.images is not None:
        overrides["images_per_set"] = args.images
    if args.uncoupled:
        overrides["coupled"] = False
    if overrides:
        config = replace(config, **overrides)
    out_dir = args.out if args.out is not None else \
        os.path.join(os.environ.get(OUT_DIR_ENV, "."), "synth")
    synthworld.gen_meta_set(config, out_dir)
    synthworld.save_world_config(config, os.path.join(out_dir, "world_config.json"))
    return 0


def cmd_report(args) -> int:
    scores = _score_lookup(args.scores)
    kinds = sorted({kind for _, kind in scores})
    rows = []
    columns: dict[str, list[tuple[float, float]]] = {kind: [] for kind in kinds}
    for row in sorted(_read_csv(args.maps), key=lambda r: r["set_id"]):
        set_id = row["set_id"]
        map_all = float(row["map_all"])
        cells = [set_id, row["source_name"]]
        for kind in kinds:
            entry = scores.get((set_id, kind))
            cells.append(_fmt(entry[1]) if entry is not None else "")
            if entry is not None:
                columns[kind].append((entry[1], map_all))
        cells.append(_fmt(map_all))
        rows.append(cells)
    header = ["set_id", "source_name", *kinds, "map_all"]
    _write_text_atomic(_out_path(args.out, "report.csv"), _csv_text(header, rows))

    summary_rows = []
    for kind in kinds:
        pairs = columns[kind]
        if len(pairs) < 2:
            summary_rows.append([kind, str(len(pairs)), "", ""])
            continue
        samples = [autoeval.MetaSample(set_id=str(i), source_name="", features=(v,),
                                       target_map=m)
                   for i, (v, m) in enumerate(pairs)]
        try:
            r2 = autoeval.fit_regressor(samples).r2
        except RegressionError:
            r2 = float("nan")
        rho = float(scipy_stats.spearmanr([v for v, _ in pairs],
                                          [m for _, m in pairs]).statistic)
        summary_rows.append([kind, str(len(pairs)), _fmt(r2), _fmt(rho)])
    _write_text_atomic(_out_path(args.summary, "report_summary.csv"),
                       _csv_text(["kind", "n", "r2", "spearman_rho"], summary_rows))
    return 0


def cmd_stats(args) -> int:
    records = []
    for path, manifest in _load_manifests(args.manifest):
        records.extend(_records_for(path, manifest, args.base_dir))
    stats = baselines.stats_from_records(records)
    baselines.save_gaussian_stats(stats, _out_path(args.out, "stats.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxstab",
        description="Label-free detector evaluation from box stability under "
                    "feature perturbation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check manifests and dumps against the schema")
    p.add_argument("--manifest", nargs="*", default=[])
    p.add_argument("--dump", nargs="*", default=[])
    p.add_argument("--base-dir", default=None)
    p.add_argument("--out", default=None, help="findings JSON (default stdout)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("score", help="compute a dataset-level measure per sample set")
    _add_manifest_args(p)
    p.add_argument("--kind", required=True,
                   choices=[k.value for k in ScoreKind])
    p.add_argument("--tau", type=float, default=None,
                   help="threshold for ps/atc/es (defaults 0.95/0.4/0.3)")
    p.add_argument("--reference", default=None,
                   help="reference feature statistics JSON (required for fd)")
    _add_stability_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("map", help="ground-truth mAP per sample set")
    _add_manifest_args(p)
    p.add_argument("--pass", dest="pass_selector", choices=["original", "perturbed"],
                   default="original")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("fit", help="fit the score-to-mAP linear model")
    p.add_argument("--scores", nargs="+", required=True, help="score CSV file(s)")
    p.add_argument("--maps", required=True, help="maps CSV from the map command")
    p.add_argument("--features", default="bos",
                   help="comma-separated feature kinds (default bos)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict mAP for measured sample sets")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("loo", help="leave-one-source-out evaluation")
    p.add_argument("--world", default=None,
                   help="world config JSON: regenerate measurements per repeat")
    p.add_argument("--scores", nargs="*", default=[])
    p.add_argument("--maps", default=None)
    p.add_argument("--features", default="bos")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--test-cap", type=int, default=5000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("synth", help="generate a synthetic labeled meta-set")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="world config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sources", type=int, default=None)
    p.add_argument("--sets", type=int, default=None)
    p.add_argument("--images", type=int, default=None)
    p.add_argument("--uncoupled", action="store_true",
                   help="decouple perturbation strength from difficulty")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="merge scores and maps into scatter-ready CSV")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--summary", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("stats", help="persist reference feature statistics for fd")
    _add_manifest_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, DumpParseError) as err:
        record = {"error": type(err).__name__, "message": str(err)}
        if getattr(err, "line", None) is not None:
            record["line"] = err.line
        sys.stderr.write(json.dumps(record, ensure_ascii=False) + "\n")
        return 1
    except (BoxStabError, RegressionError, ScoreUndefinedError, SearchError,
            OSError, json.JSONDecodeError) as err:
        record = {"error": type(err).__name__, "message": str(err)}
        sys.stderr.write(json.dumps(record, ensure_ascii=False) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
