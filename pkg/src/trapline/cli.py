"""Operator-facing command surface: one subcommand per pipeline stage.

Deliberately not push-button: ingest, detect, events, export, upload, eval,
synth, stats and check are separate steps so the operator decides when each
runs. Config comes from a key=value file, overridden by flags, overridden by
``TRAPLINE_*`` environment variables; the effective config is logged at
startup. Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Any, Callable, Mapping

from . import archive, detect, evaluate, events as events_mod, export, ingest, synth
from .catalog import Catalog, CatalogError, open_catalog

logger = logging.getLogger("trapline")

ENV_PREFIX = "TRAPLINE_"
CONFIG_BASENAME = "trapline.conf"


class TraplineError(Exception):
    """Operational failure: reported on stderr, exit code 1."""


@dataclass
class RunConfig:
    catalog_root: str = "./catalog"
    dest_root: str = "./sessions"
    remote: str = ""
    adapter: str = "stub"
    threshold: float = 0.2
    gap_minutes: float = 10.0
    remove_flags: str = "human,unknown,bird"
    keep_species: str = "wild turkey"
    jobs: int = 0
    log_level: str = "INFO"


_CONFIG_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str) -> Any:
    kind = _CONFIG_FIELDS[name]
    try:
        if kind in (float, "float"):
            return float(raw)
        if kind in (int, "int"):
            return int(raw)
        return raw
    except ValueError:
        raise TraplineError(f"config value {name}={raw!r} is not a {kind}") from None


def _config_file(args: argparse.Namespace) -> Path | None:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise TraplineError(f"config file {path} not found")
        return path
    local = Path(CONFIG_BASENAME)
    if local.exists():
        return local
    config_home = Path(os.environ.get("XDG_CONFIG_HOME", Path.home() / ".config"))
    user = config_home / "trapline" / CONFIG_BASENAME
    if user.exists():
        return user
    return None


def resolve_config(args: argparse.Namespace, environment: Mapping[str, str]) -> RunConfig:
    """Precedence (lowest to highest): defaults, config file, flags, environment."""
    values: dict[str, Any] = {f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)}
    path = _config_file(args)
    if path is not None:
        from .catalog import read_kv

        for key, raw in read_kv(path).items():
            if key in values:
                values[key] = _coerce(key, raw)
            else:
                logger.warning("unknown config key %r in %s", key, path)
    for name in values:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    for name in values:
        env_value = environment.get(ENV_PREFIX + name.upper())
        if env_value is not None:
            values[name] = _coerce(name, env_value)
    return RunConfig(**values)


def _csv_set(raw: str) -> frozenset[str]:
    return frozenset(s.strip() for s in raw.split(",") if s.strip())


def _parse_range(raw: str) -> tuple[int, int]:
    try:
        lo, _, hi = raw.partition(":")
        return (int(lo), int(hi or lo))
    except ValueError:
        raise TraplineError(f"range {raw!r} must look like LO:HI") from None


def make_adapter(spec: str, threshold: float) -> detect.DetectorAdapter:
    if spec == "stub":
        return detect.StubDetectorAdapter(default_threshold=threshold)
    if spec.startswith("stub:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise detect.AdapterNotFoundError(f"bad stub seed in {spec!r}") from None
        return detect.StubDetectorAdapter(seed=seed, default_threshold=threshold)
    if spec.startswith("stub-json:"):
        path = Path(spec.split(":", 1)[1])
        if not path.exists():
            raise detect.AdapterNotFoundError(f"stub response table {path} not found")
        return detect.StubDetectorAdapter(
            response_table=detect.load_response_table(path),
            default_threshold=threshold,
        )
    if spec.startswith("exec:"):
        return detect.ExternalProcessAdapter(
            command_template=spec.split(":", 1)[1], default_threshold=threshold
        )
    raise detect.AdapterNotFoundError(
        f"detector adapter not found: {spec!r} "
        "(expected stub, stub:SEED, stub-json:PATH, or exec:COMMAND)"
    )


def make_remote(spec: str) -> archive.Remote:
    if spec.startswith("local:"):
        return archive.LocalDirectoryRemote(spec.split(":", 1)[1])
    raise TraplineError(f"unknown remote {spec!r} (expected local:PATH)")


def _catalog(cfg: RunConfig) -> Catalog:
    return open_catalog(cfg.catalog_root)


def _grouping_config(cfg: RunConfig, args: argparse.Namespace) -> events_mod.GroupingConfig:
    key_fields = ("site_id", "species") if getattr(args, "by_species", False) else ("site_id",)
    return events_mod.GroupingConfig(
        gap_minutes=cfg.gap_minutes,
        key_fields=key_fields,
        representative_rule=getattr(args, "rep_rule", None) or "max_confidence",
    )


def _offsets(args: argparse.Namespace) -> dict[str, int]:
    offsets = {}
    for raw in getattr(args, "offset", None) or []:
        site, _, seconds = raw.partition("=")
        try:
            offsets[site] = int(seconds)
        except ValueError:
            raise TraplineError(f"--offset {raw!r} must look like SITE=SECONDS") from None
    return offsets


def _import_labels(catalog: Catalog, path: str) -> tuple[int, int]:
    """Append a labeled CSV to the catalog, skipping rows already present."""
    result = export.import_timelapse_csv(path, catalog=catalog)
    for issue in result.issues:
        print(f"labels row {issue.row}: {issue.message}", file=sys.stderr)
    existing = {
        (lb.asset_id, lb.species, lb.count, lb.temperature_c, lb.labeled_at,
         lb.event_id, lb.annotator, lb.flags)
        for lb in catalog.read_labels()
    }
    fresh = []
    for record in result.records:
        key = (record.asset_id, record.species, record.count, record.temperature_c,
               record.labeled_at, record.event_id, record.annotator, record.flags)
        if key in existing:
            continue
        existing.add(key)
        fresh.append(record)
    if fresh:
        catalog.append_records("labels", fresh)
    return len(fresh), len(result.records) - len(fresh)


def _compute_events(
    catalog: Catalog, cfg: RunConfig, args: argparse.Namespace
) -> tuple[list, list]:
    observations = events_mod.collect_observations(catalog, cfg.threshold)
    offsets = _offsets(args)
    if offsets:
        observations = export.clean_datetimes(
            observations, export.CleaningPolicy(datetime_offsets=offsets)
        )
    grouped = events_mod.group_events(observations, _grouping_config(cfg, args))
    return observations, grouped


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    try:
        collection_date = date.fromisoformat(args.date)
    except ValueError:
        raise TraplineError(f"--date {args.date!r} is not YYYY-MM-DD") from None
    catalog = _catalog(cfg)
    try:
        report = ingest.import_card(
            args.source,
            args.site,
            collection_date,
            catalog,
            cfg.dest_root,
            workers=cfg.jobs or None,
        )
    except ingest.IngestError as exc:
        raise TraplineError(str(exc)) from exc
    out(
        f"imported {report.files_copied} file(s), {report.bytes_copied} bytes "
        f"into {report.session_id}/{report.site_id}; "
        f"{report.duplicates_skipped} duplicate(s) skipped"
    )
    for path, message in report.errors:
        print(f"error: {path}: {message}", file=sys.stderr)
    return {
        "session_id": report.session_id,
        "site_id": report.site_id,
        "files_copied": report.files_copied,
        "bytes_copied": report.bytes_copied,
        "duplicates_skipped": report.duplicates_skipped,
        "duration_seconds": round(report.duration, 3),
        "errors": [{"path": p, "message": m} for p, m in report.errors],
    }


def cmd_detect(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    if args.folder:
        folder = Path(args.folder)
    elif args.session and args.site:
        folder = Path(cfg.dest_root) / args.session / args.site
    else:
        raise TraplineError("need --folder, or --session with --site")
    if not folder.is_dir():
        raise TraplineError(f"asset folder {folder} does not exist")
    adapter_spec = args.adapter or cfg.adapter
    try:
        adapter = make_adapter(adapter_spec, cfg.threshold)
        catalog = None if args.no_catalog else _catalog(cfg)
        batch = detect.run_detector(adapter, folder, catalog)
    except detect.DetectorError as exc:
        detail = f" (stderr: {exc.stderr.strip()})" if getattr(exc, "stderr", "") else ""
        raise TraplineError(f"{exc}{detail}") from exc
    if args.filter_threshold is not None:
        batch = detect.filter_by_confidence(batch, args.filter_threshold)
    if args.out:
        Path(args.out).write_bytes(detect.write_md_json(batch))
    detections = sum(len(e.detections or []) for e in batch.images)
    out(f"{len(batch.images)} image(s), {detections} detection(s) from {adapter_spec}")
    return {
        "folder": str(folder),
        "adapter": adapter_spec,
        "images": len(batch.images),
        "detections": detections,
        "failures": sum(1 for e in batch.images if e.failure is not None),
        "output": args.out or "",
    }


def cmd_events(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    catalog = _catalog(cfg)
    if args.labels:
        added, skipped = _import_labels(catalog, args.labels)
        out(f"imported {added} label(s) from {args.labels} ({skipped} duplicate rows)")
    _, grouped = _compute_events(catalog, cfg, args)
    existing = {e.event_id for e in catalog.read_events()}
    fresh = [e for e in grouped if e.event_id not in existing]
    if fresh:
        catalog.append_records("events", fresh)
    summary = events_mod.dataset_summary(grouped)
    out(f"{summary.event_count} events, {summary.individual_total} individuals "
        f"({len(fresh)} newly journaled)")
    return {
        "event_count": summary.event_count,
        "individual_total": summary.individual_total,
        "per_species": summary.per_species,
        "newly_journaled": len(fresh),
    }


def cmd_export(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    catalog = _catalog(cfg)
    if args.labels:
        added, skipped = _import_labels(catalog, args.labels)
        out(f"imported {added} label(s) from {args.labels} ({skipped} duplicate rows)")
    _, grouped = _compute_events(catalog, cfg, args)
    rows = export.export_timelapse_csv(catalog, grouped, args.out)
    out(f"wrote {rows} row(s) to {args.out}")
    return {"rows": rows, "path": args.out, "events": len(grouped)}


def cmd_upload(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    remote_spec = args.remote or cfg.remote
    if not remote_spec:
        raise TraplineError("no remote configured (use --remote local:PATH)")
    catalog = _catalog(cfg)
    start = datetime.now().replace(microsecond=0)
    window = archive.Window(start, start + timedelta(hours=args.window_hours))
    config = archive.RemoteConfig(
        throughput_bytes_per_sec=args.throughput_mb * 1024 * 1024
    )
    plan = archive.plan_upload(catalog, window, cfg.dest_root, config)
    if args.plan_file:
        archive.write_plan_listing(plan, args.plan_file)
    for note in plan.notes:
        print(f"note: {note}", file=sys.stderr)
    payload: dict[str, Any] = {
        "planned": len(plan.entries),
        "planned_bytes": plan.total_bytes,
        "notes": plan.notes,
    }
    if args.plan_only:
        out(f"planned {len(plan.entries)} session(s), {plan.total_bytes} bytes")
        return payload
    remote = make_remote(remote_spec)
    records = archive.execute_upload(plan, remote, catalog, retry_limit=args.retries)
    stats = archive.summarize_transfers(records)
    failed = [r for r in records if r.outcome == "failed"]
    out(
        f"uploaded {len(records) - len(failed)}/{len(records)} session(s), "
        f"{stats.bytes_total} bytes in {stats.duration_total:.0f}s"
    )
    payload.update(
        {
            "uploaded": len(records) - len(failed),
            "failed": [r.payload_path for r in failed],
            "bytes_total": stats.bytes_total,
        }
    )
    if failed:
        raise TraplineError(f"{len(failed)} session upload(s) failed")
    return payload


def cmd_eval(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    catalog = _catalog(cfg)
    if args.labels:
        added, skipped = _import_labels(catalog, args.labels)
        out(f"imported {added} label(s) from {args.labels} ({skipped} duplicate rows)")
    truth = evaluate.presence_truth_from_catalog(catalog)
    if args.pred:
        batches = []
        for spec in args.pred:
            path, _, prefix = spec.partition("::")
            batch = detect.parse_md_json(Path(path).read_bytes())
            if prefix:
                for entry in batch.images:
                    entry.file = f"{prefix}/{entry.file}"
            batches.append(batch)
        predictions = detect.merge_batches(batches)
    else:
        predictions = evaluate.predictions_from_catalog(catalog)
    confusion = evaluate.image_presence_confusion(predictions, truth, cfg.threshold)
    precision, recall = evaluate.precision_recall(confusion)

    def show(value: float | None) -> str:
        return "n/a" if value is None else f"{value:.4f}"

    out(
        f"images: TP {confusion.true_positive}  FP {confusion.false_positive}  "
        f"TN {confusion.true_negative}  FN {confusion.false_negative}  "
        f"precision {show(precision)}  recall {show(recall)}"
    )
    if confusion.uncovered:
        print(
            f"warning: {len(confusion.uncovered)} prediction(s) without truth "
            f"excluded (e.g. {confusion.uncovered[0]})",
            file=sys.stderr,
        )
    payload: dict[str, Any] = {
        "threshold": cfg.threshold,
        "true_positive": confusion.true_positive,
        "false_positive": confusion.false_positive,
        "true_negative": confusion.true_negative,
        "false_negative": confusion.false_negative,
        "precision": precision,
        "recall": recall,
        "uncovered": len(confusion.uncovered),
    }
    sweep_points = []
    if args.sweep:
        thresholds = sorted(float(t) for t in args.sweep.split(","))
        sweep_points = evaluate.threshold_sweep(predictions, truth, thresholds)
        for point in sweep_points:
            out(
                f"  t={point.threshold:.2f}  precision {show(point.precision)}  "
                f"recall {show(point.recall)}"
            )
        payload["sweep"] = [
            {"threshold": p.threshold, "precision": p.precision, "recall": p.recall}
            for p in sweep_points
        ]
    if args.event_level:
        observations = events_mod.label_observations(catalog)
        truth_events = events_mod.group_events(
            observations, _grouping_config(cfg, args)
        )
        event_recall = evaluate.event_level_recall(
            truth_events,
            predictions,
            cfg.threshold,
            evaluate.asset_file_map(catalog),
        )
        out(f"event-level recall: {show(event_recall)} over {len(truth_events)} events")
        payload["event_recall"] = event_recall
        payload["truth_events"] = len(truth_events)
    if args.report_csv:
        _write_eval_report(args.report_csv, confusion, precision, recall, sweep_points)
    return payload


def _write_eval_report(path, confusion, precision, recall, sweep_points) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["Threshold", "TP", "FP", "TN", "FN", "Precision", "Recall"])
        rows = sweep_points or [
            evaluate.SweepPoint(confusion.threshold, precision, recall, confusion)
        ]
        for point in rows:
            c = point.confusion
            writer.writerow(
                [
                    point.threshold,
                    c.true_positive,
                    c.false_positive,
                    c.true_negative,
                    c.false_negative,
                    "" if point.precision is None else point.precision,
                    "" if point.recall is None else point.recall,
                ]
            )


def cmd_synth(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    noise = synth.DetectorNoise(
        miss_rate=args.miss_rate,
        false_positive_rate=args.fp_rate,
        count_jitter=args.count_jitter,
    )
    config = synth.SynthConfig(
        sites=args.sites,
        days=args.days,
        empty_trigger_fraction=args.empty_fraction,
        visit_rate_per_day=args.rate,
        frames_per_visit=_parse_range(args.frames),
        group_size_range=_parse_range(args.group),
        seed=args.seed,
        detector_noise=noise,
    )
    dataset = synth.generate_dataset(config)
    payload: dict[str, Any] = {"planted": dataset.planted_summary}
    if args.out:
        paths = synth.write_dataset(dataset, args.out, emit_files=args.emit_files)
        if noise != synth.DetectorNoise():
            noisy = synth.perturb_detector(dataset.truth_detections, noise, config.seed)
            noisy_path = Path(args.out) / "truth" / "detections_noisy.json"
            noisy_path.write_bytes(detect.write_md_json(noisy))
            payload["noisy_detections"] = str(noisy_path)
        payload["paths"] = {k: str(v) for k, v in paths.items()}
    if args.into_catalog:
        counts = synth.load_into_catalog(dataset, _catalog(cfg))
        payload["cataloged"] = counts
    out(
        f"generated {dataset.planted_summary['total_images']} trigger(s), "
        f"{dataset.planted_summary['animal_images']} with animals, "
        f"{dataset.planted_summary['event_count']} planted event(s)"
    )
    return payload


def cmd_stats(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    catalog = _catalog(cfg)
    assets = catalog.read_assets()
    animal_assets = set()
    for det in catalog.read_detections():
        if det.category == 1 and det.confidence >= cfg.threshold:
            animal_assets.add(det.asset_id)
    total = len(assets)
    animal = sum(1 for a in assets if a.asset_id in animal_assets)
    animal_fraction = animal / total if total else 0.0
    transfers = catalog.read_transfers()
    payload: dict[str, Any] = {
        "assets": total,
        "animal_images": animal,
        "animal_fraction": animal_fraction,
        "empty_fraction": 1.0 - animal_fraction if total else 0.0,
        "threshold": cfg.threshold,
        "events_journaled": catalog.count("events"),
        "labels": catalog.count("labels"),
    }
    out(
        f"{total} asset(s); {animal} with animals at threshold {cfg.threshold:g} "
        f"({animal_fraction:.4f} animal fraction)"
    )
    for kind in ("card_import", "remote_upload"):
        stats = archive.summarize_transfers([t for t in transfers if t.kind == kind])
        payload[kind] = {
            "count": stats.count,
            "bytes_min": stats.bytes_min,
            "bytes_max": stats.bytes_max,
            "bytes_avg": stats.bytes_avg,
            "bytes_total": stats.bytes_total,
            "duration_min": stats.duration_min,
            "duration_max": stats.duration_max,
            "duration_avg": stats.duration_avg,
            "duration_total": stats.duration_total,
        }
        if stats.count:
            out(
                f"{kind}: {stats.count} transfer(s), bytes min/max/avg "
                f"{stats.bytes_min}/{stats.bytes_max}/{stats.bytes_avg:.0f}, "
                f"duration min/max/avg {stats.duration_min:.0f}/"
                f"{stats.duration_max:.0f}/{stats.duration_avg:.1f}s"
            )
    return payload


def cmd_check(args, cfg: RunConfig, out: Callable[[str], None]) -> dict:
    catalog = _catalog(cfg)
    report = catalog.integrity_check()
    payload: dict[str, Any] = {
        "orphans": [list(o) for o in report.orphans],
        "duplicate_keys": [list(d) for d in report.duplicate_keys],
        "malformed_lines": [list(m) for m in report.malformed_lines],
        "clean": report.is_clean(),
    }
    mismatches = []
    if args.manifests:
        dest = Path(cfg.dest_root)
        for manifest in sorted(dest.glob(f"*/*/{ingest.MANIFEST_NAME}")):
            for mismatch in ingest.verify_manifest(manifest.parent):
                mismatches.append(
                    {
                        "folder": str(manifest.parent),
                        "path": mismatch.relative_path,
                        "kind": mismatch.kind,
                        "detail": mismatch.detail,
                    }
                )
        payload["manifest_mismatches"] = mismatches
    clean = report.is_clean() and not mismatches
    out("catalog consistent" if clean else "problems found")
    if not clean:
        for orphan in report.orphans:
            print(f"orphan: {orphan[0]} references unknown {orphan[1]}", file=sys.stderr)
        for dup in report.duplicate_keys:
            print(f"duplicate key: {dup[1]} in {dup[0]}", file=sys.stderr)
        for table, lineno in report.malformed_lines:
            print(f"malformed line {lineno} in {table}", file=sys.stderr)
        for m in mismatches:
            print(f"manifest mismatch: {m['folder']}/{m['path']} ({m['kind']})", file=sys.stderr)
        raise TraplineError("integrity check failed")
    return payload


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key=value lines)")
    common.add_argument("--catalog-root", dest="catalog_root")
    common.add_argument("--dest-root", dest="dest_root")
    common.add_argument("--threshold", type=float, dest="threshold")
    common.add_argument("--gap", type=float, dest="gap_minutes",
                        help="event grouping gap in minutes")
    common.add_argument("--jobs", type=int, dest="jobs")
    common.add_argument("--log-level", dest="log_level")
    common.add_argument("--json", action="store_true",
                        help="machine-readable output on stdout")

    grouping = argparse.ArgumentParser(add_help=False)
    grouping.add_argument("--by-species", action="store_true",
                          help="include species in the grouping key")
    grouping.add_argument("--rep-rule", choices=events_mod.REPRESENTATIVE_RULES)
    grouping.add_argument("--offset", action="append", metavar="SITE=SECONDS",
                          help="per-site clock-drift correction (repeatable)")
    grouping.add_argument("--labels", metavar="CSV",
                          help="labeled Timelapse CSV to append to the catalog first")

    parser = argparse.ArgumentParser(
        prog="trapline",
        description="On-premise camera-trap pipeline: cards in, label tables out.",
        epilog="Config precedence: defaults < config file < flags < TRAPLINE_* environment.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="import an SD card")
    p.add_argument("--source", required=True, help="mounted card path")
    p.add_argument("--site", required=True, help="camera site id")
    p.add_argument("--date", required=True, help="collection date YYYY-MM-DD")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("detect", parents=[common], help="run the detector on a folder")
    p.add_argument("--folder", help="session/site folder to process")
    p.add_argument("--session", help="session name (with --site, under dest root)")
    p.add_argument("--site", help="site id (with --session)")
    p.add_argument("--adapter", help="stub | stub:SEED | stub-json:PATH | exec:COMMAND")
    p.add_argument("--out", help="write batch JSON here")
    p.add_argument("--filter-threshold", type=float,
                   help="drop detections below this confidence in the output")
    p.add_argument("--no-catalog", action="store_true",
                   help="do not append detections to the catalog")
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("events", parents=[common, grouping],
                       help="group observations into events")
    p.set_defaults(handler=cmd_events)

    p = sub.add_parser("export", parents=[common, grouping],
                       help="write the Timelapse CSV")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("upload", parents=[common], help="archive sessions to the remote")
    p.add_argument("--remote", help="remote spec, e.g. local:/mnt/box")
    p.add_argument("--window-hours", type=float, default=8.0,
                   help="overnight window length (default 8)")
    p.add_argument("--throughput-mb", type=float, default=100.0,
                   help="planning prior, MB/s (default 100)")
    p.add_argument("--retries", type=int, default=archive.DEFAULT_RETRY_LIMIT)
    p.add_argument("--plan-file", help="write the human-readable plan here")
    p.add_argument("--plan-only", action="store_true", help="plan without uploading")
    p.set_defaults(handler=cmd_upload)

    p = sub.add_parser("eval", parents=[common, grouping],
                       help="compare detector output against human labels")
    p.add_argument("--pred", action="append", metavar="PATH[::PREFIX]",
                   help="batch JSON to evaluate (default: catalog detections)")
    p.add_argument("--sweep", help="comma-separated thresholds")
    p.add_argument("--event-level", action="store_true",
                   help="also report event-level recall")
    p.add_argument("--report-csv", help="write the metric table here")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--sites", type=int, default=4)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--empty-fraction", type=float, default=0.96)
    p.add_argument("--rate", type=float, default=2.0, help="visits per site per day")
    p.add_argument("--frames", default="3:8", help="frames per visit LO:HI")
    p.add_argument("--group", default="1:3", help="animals per visit LO:HI")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    p.add_argument("--count-jitter", type=float, default=0.0)
    p.add_argument("--out", help="write the source tree and truth files here")
    p.add_argument("--emit-files", action="store_true",
                   help="write placeholder media files, not just metadata")
    p.add_argument("--into-catalog", action="store_true",
                   help="plant assets/detections/labels straight into the catalog")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("stats", parents=[common], help="corpus and transfer statistics")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("check", parents=[common], help="integrity checks")
    p.add_argument("--manifests", action="store_true",
                   help="also re-hash every session manifest under the dest root")
    p.set_defaults(handler=cmd_check)

    return parser


def run_cli(argv: list[str] | None = None, environment: Mapping[str, str] | None = None) -> int:
    environment = os.environ if environment is None else environment
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = resolve_config(args, environment)
        logging.basicConfig(
            stream=sys.stderr,
            level=getattr(logging, cfg.log_level.upper(), logging.INFO),
            format="%(levelname)s %(name)s: %(message)s",
        )
        logger.info("effective config: %s", cfg)
        payload = args.handler(
            args,
            cfg,
            (lambda line: None) if args.json else (lambda line: print(line)),
        )
        if args.json:
            print(json.dumps(payload, sort_keys=True, ensure_ascii=False))
        return 0
    except (TraplineError, CatalogError, detect.DetectorError,
            ingest.IngestError, export.CsvSchemaError, archive.RemoteError,
            ValueError) as exc:
        if getattr(args, "json", False):
            print(json.dumps({"error": str(exc)}, sort_keys=True, ensure_ascii=False))
        print(f"trapline: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"trapline: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
