"""Append-only journal store for assets, detections, events, labels, transfers.

No database: each table is a newline-delimited JSON journal inside a plain
directory, so catalogs diff cleanly in version control and a torn final
line is skipped at record granularity instead of corrupting the store.
Writers take an advisory lock file and fail fast on contention.
"""

from __future__ import annotations

import json
import logging
import os
import re
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Iterator, Sequence

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
TABLES = ("assets", "detections", "events", "labels", "transfers")
META_FILE = "catalog.meta"
LOCK_FILE = "catalog.lock"
SITES_FILE = "sites.conf"

# Bounding-box / confidence values may drift past [0, 1] by this much after a
# float round trip through an upstream detector; anything worse is rejected.
BBOX_EPSILON = 1e-6

CATEGORY_ANIMAL = 1
CATEGORY_PERSON = 2
CATEGORY_VEHICLE = 3
CATEGORY_NAMES = {
    CATEGORY_ANIMAL: "animal",
    CATEGORY_PERSON: "person",
    CATEGORY_VEHICLE: "vehicle",
}

ASSET_KINDS = ("image", "video")
TRANSFER_KINDS = ("card_import", "remote_upload")
TRANSFER_OUTCOMES = ("ok", "failed", "retried_ok")

_HEX_RE = re.compile(r"[0-9a-f]{16,}")


class CatalogError(Exception):
    """Base class for catalog failures."""


class UnsupportedVersionError(CatalogError):
    """Catalog descriptor declares a format version we cannot read."""


class CatalogLockedError(CatalogError):
    """Another writer holds the advisory lock."""


class RecordValidationError(CatalogError):
    """A record violates its type invariants.

    ``index`` is the position of the offending record within the batch
    passed to ``append_records``.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DuplicateKeyError(CatalogError):
    """A primary key is already present in the journal (or batch)."""

    def __init__(self, table: str, key: str):
        super().__init__(f"duplicate key in {table!r}: {key}")
        self.table = table
        self.key = key


# ---------------------------------------------------------------------------
# Timestamps: cameras record naive local time; journals store seconds only.
# ---------------------------------------------------------------------------

def format_ts(dt: datetime) -> str:
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


def parse_ts(text: str) -> datetime:
    return datetime.fromisoformat(text)


# ---------------------------------------------------------------------------
# Key=value dialect shared by catalog.meta, sites.conf and trapline.conf
# ---------------------------------------------------------------------------

def read_kv(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CatalogError(f"{path}: malformed key=value line: {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def write_kv(path: Path, values: dict[str, str]) -> None:
    body = "".join(f"{k}={v}\n" for k, v in values.items())
    path.write_text(body, encoding="utf-8")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MediaAsset:
    """One image or video file; ``asset_id`` is the content checksum."""

    asset_id: str
    site_id: str
    session_id: str
    relative_path: str
    kind: str
    captured_at: datetime
    size_bytes: int
    checksum: str
    temperature_c: int | None = None
    timestamp_source: str | None = None


@dataclass(frozen=True)
class Detection:
    """One bounding box on one asset, normalized to image dimensions."""

    asset_id: str
    category: int
    confidence: float
    bbox: tuple[float, float, float, float]


@dataclass(frozen=True)
class Event:
    """A maximal same-site run of observations within the grouping gap."""

    event_id: str
    site_id: str
    member_asset_ids: tuple[str, ...]
    start_at: datetime
    end_at: datetime
    representative_asset_id: str
    species: str | None = None
    individual_count: int = 0


@dataclass(frozen=True)
class LabelRecord:
    """A human annotation row; the Timelapse interop unit."""

    asset_id: str
    species: str
    count: int
    annotator: str
    labeled_at: datetime | None
    event_id: str | None = None
    temperature_c: int | None = None
    flags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class TransferRecord:
    """One copy/upload job: a card import or a remote upload."""

    transfer_id: str
    kind: str
    payload_path: str
    bytes: int
    started_at: datetime
    finished_at: datetime
    outcome: str
    attempts: int


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def clamp_unit(value: float, epsilon: float = BBOX_EPSILON) -> float:
    """Clamp a value into [0, 1]; caller checks it was within epsilon first."""
    return min(1.0, max(0.0, value))


def _check_ts(dt: Any, name: str, problems: list[str], *, optional: bool = False) -> None:
    if dt is None:
        if not optional:
            problems.append(f"{name} missing")
        return
    if not isinstance(dt, datetime):
        problems.append(f"{name} is not a datetime")
    elif dt.microsecond != 0:
        problems.append(f"{name} must have seconds resolution")
    elif dt.tzinfo is not None:
        problems.append(f"{name} must be a naive local datetime")


def validate_asset(asset: MediaAsset) -> list[str]:
    problems: list[str] = []
    if not asset.site_id:
        problems.append("site_id empty")
    if not asset.session_id:
        problems.append("session_id empty")
    if not asset.relative_path:
        problems.append("relative_path empty")
    if asset.kind not in ASSET_KINDS:
        problems.append(f"kind {asset.kind!r} not in {ASSET_KINDS}")
    if not isinstance(asset.size_bytes, int) or asset.size_bytes <= 0:
        problems.append(f"size_bytes must be > 0, got {asset.size_bytes!r}")
    if not _HEX_RE.fullmatch(asset.checksum or ""):
        problems.append("checksum is not a hex digest")
    if asset.asset_id != asset.checksum:
        problems.append("asset_id must equal the content checksum")
    _check_ts(asset.captured_at, "captured_at", problems)
    if asset.temperature_c is not None and not isinstance(asset.temperature_c, int):
        problems.append("temperature_c must be an integer or None")
    return problems


def clamp_detection(det: Detection) -> tuple[Detection, list[str]]:
    """Clamp near-miss bbox/confidence values; report real violations."""
    problems: list[str] = []
    if det.category not in CATEGORY_NAMES:
        problems.append(f"category {det.category!r} not in {sorted(CATEGORY_NAMES)}")
    conf = det.confidence
    if not -BBOX_EPSILON <= conf <= 1.0 + BBOX_EPSILON:
        problems.append(f"confidence {conf!r} outside [0, 1]")
    else:
        conf = clamp_unit(conf)
    coords = list(det.bbox)
    if len(coords) != 4:
        problems.append(f"bbox must have 4 values, got {len(coords)}")
        return det, problems
    for i, value in enumerate(coords):
        if not -BBOX_EPSILON <= value <= 1.0 + BBOX_EPSILON:
            problems.append(f"bbox[{i}] = {value!r} outside [0, 1]")
        else:
            coords[i] = clamp_unit(value)
    if not problems:
        x, y, w, h = coords
        if x + w > 1.0 + BBOX_EPSILON:
            problems.append(f"bbox x+w = {x + w!r} exceeds 1")
        else:
            w = min(w, 1.0 - x)
        if y + h > 1.0 + BBOX_EPSILON:
            problems.append(f"bbox y+h = {y + h!r} exceeds 1")
        else:
            h = min(h, 1.0 - y)
        coords = [x, y, w, h]
    if not asset_key_ok(det.asset_id):
        problems.append("asset_id is not a hex digest")
    clamped = replace(det, confidence=conf, bbox=tuple(coords))
    return clamped, problems


def asset_key_ok(asset_id: str) -> bool:
    return bool(_HEX_RE.fullmatch(asset_id or ""))


def validate_event(event: Event) -> list[str]:
    problems: list[str] = []
    if not event.event_id:
        problems.append("event_id empty")
    if not event.site_id:
        problems.append("site_id empty")
    members = event.member_asset_ids
    if not members:
        problems.append("member list empty")
    elif len(set(members)) != len(members):
        problems.append("member list has duplicates")
    if members and event.representative_asset_id not in members:
        problems.append("representative_asset_id not a member")
    _check_ts(event.start_at, "start_at", problems)
    _check_ts(event.end_at, "end_at", problems)
    if (
        isinstance(event.start_at, datetime)
        and isinstance(event.end_at, datetime)
        and event.end_at < event.start_at
    ):
        problems.append("end_at precedes start_at")
    if not isinstance(event.individual_count, int) or event.individual_count < 0:
        problems.append(f"individual_count must be >= 0, got {event.individual_count!r}")
    return problems


def validate_label(label: LabelRecord) -> list[str]:
    problems: list[str] = []
    if not label.asset_id:
        problems.append("asset_id empty")
    if not isinstance(label.count, int) or label.count < 0:
        problems.append(f"count must be >= 0, got {label.count!r}")
    if not label.species and "unknown" not in label.flags:
        problems.append("species empty without an 'unknown' flag")
    _check_ts(label.labeled_at, "labeled_at", problems, optional=True)
    if label.temperature_c is not None and not isinstance(label.temperature_c, int):
        problems.append("temperature_c must be an integer or None")
    return problems


def validate_transfer(rec: TransferRecord) -> list[str]:
    problems: list[str] = []
    if not rec.transfer_id:
        problems.append("transfer_id empty")
    if rec.kind not in TRANSFER_KINDS:
        problems.append(f"kind {rec.kind!r} not in {TRANSFER_KINDS}")
    if rec.outcome not in TRANSFER_OUTCOMES:
        problems.append(f"outcome {rec.outcome!r} not in {TRANSFER_OUTCOMES}")
    if not isinstance(rec.bytes, int) or rec.bytes < 0:
        problems.append(f"bytes must be >= 0, got {rec.bytes!r}")
    if not isinstance(rec.attempts, int) or rec.attempts < 1:
        problems.append(f"attempts must be >= 1, got {rec.attempts!r}")
    _check_ts(rec.started_at, "started_at", problems)
    _check_ts(rec.finished_at, "finished_at", problems)
    if (
        isinstance(rec.started_at, datetime)
        and isinstance(rec.finished_at, datetime)
        and rec.finished_at < rec.started_at
    ):
        problems.append("finished_at precedes started_at")
    return problems


# ---------------------------------------------------------------------------
# Record (de)serialization — field names are the journal schema
# ---------------------------------------------------------------------------

def asset_to_record(a: MediaAsset) -> dict[str, Any]:
    return {
        "asset_id": a.asset_id,
        "site_id": a.site_id,
        "session_id": a.session_id,
        "relative_path": a.relative_path,
        "kind": a.kind,
        "captured_at": format_ts(a.captured_at),
        "size_bytes": a.size_bytes,
        "checksum": a.checksum,
        "temperature_c": a.temperature_c,
        "timestamp_source": a.timestamp_source,
    }


def record_to_asset(d: dict[str, Any]) -> MediaAsset:
    return MediaAsset(
        asset_id=d["asset_id"],
        site_id=d["site_id"],
        session_id=d["session_id"],
        relative_path=d["relative_path"],
        kind=d["kind"],
        captured_at=parse_ts(d["captured_at"]),
        size_bytes=d["size_bytes"],
        checksum=d["checksum"],
        temperature_c=d.get("temperature_c"),
        timestamp_source=d.get("timestamp_source"),
    )


def detection_to_record(det: Detection) -> dict[str, Any]:
    return {
        "asset_id": det.asset_id,
        "category": det.category,
        "confidence": det.confidence,
        "bbox": list(det.bbox),
    }


def record_to_detection(d: dict[str, Any]) -> Detection:
    return Detection(
        asset_id=d["asset_id"],
        category=d["category"],
        confidence=d["confidence"],
        bbox=tuple(d["bbox"]),
    )


def event_to_record(e: Event) -> dict[str, Any]:
    return {
        "event_id": e.event_id,
        "site_id": e.site_id,
        "member_asset_ids": list(e.member_asset_ids),
        "start_at": format_ts(e.start_at),
        "end_at": format_ts(e.end_at),
        "representative_asset_id": e.representative_asset_id,
        "species": e.species,
        "individual_count": e.individual_count,
    }


def record_to_event(d: dict[str, Any]) -> Event:
    return Event(
        event_id=d["event_id"],
        site_id=d["site_id"],
        member_asset_ids=tuple(d["member_asset_ids"]),
        start_at=parse_ts(d["start_at"]),
        end_at=parse_ts(d["end_at"]),
        representative_asset_id=d["representative_asset_id"],
        species=d.get("species"),
        individual_count=d.get("individual_count", 0),
    )


def label_to_record(lb: LabelRecord) -> dict[str, Any]:
    return {
        "asset_id": lb.asset_id,
        "event_id": lb.event_id,
        "species": lb.species,
        "count": lb.count,
        "temperature_c": lb.temperature_c,
        "annotator": lb.annotator,
        "labeled_at": format_ts(lb.labeled_at) if lb.labeled_at else None,
        "flags": sorted(lb.flags),
    }


def record_to_label(d: dict[str, Any]) -> LabelRecord:
    labeled_at = d.get("labeled_at")
    return LabelRecord(
        asset_id=d["asset_id"],
        event_id=d.get("event_id"),
        species=d.get("species", ""),
        count=d["count"],
        temperature_c=d.get("temperature_c"),
        annotator=d.get("annotator", ""),
        labeled_at=parse_ts(labeled_at) if labeled_at else None,
        flags=frozenset(d.get("flags", [])),
    )


def transfer_to_record(t: TransferRecord) -> dict[str, Any]:
    return {
        "transfer_id": t.transfer_id,
        "kind": t.kind,
        "payload_path": t.payload_path,
        "bytes": t.bytes,
        "started_at": format_ts(t.started_at),
        "finished_at": format_ts(t.finished_at),
        "outcome": t.outcome,
        "attempts": t.attempts,
    }


def record_to_transfer(d: dict[str, Any]) -> TransferRecord:
    return TransferRecord(
        transfer_id=d["transfer_id"],
        kind=d["kind"],
        payload_path=d["payload_path"],
        bytes=d["bytes"],
        started_at=parse_ts(d["started_at"]),
        finished_at=parse_ts(d["finished_at"]),
        outcome=d["outcome"],
        attempts=d["attempts"],
    )


_TABLE_CODECS = {
    "assets": (asset_to_record, record_to_asset, validate_asset, "asset_id"),
    "detections": (detection_to_record, record_to_detection, None, None),
    "events": (event_to_record, record_to_event, validate_event, "event_id"),
    "labels": (label_to_record, record_to_label, validate_label, None),
    "transfers": (transfer_to_record, record_to_transfer, validate_transfer, "transfer_id"),
}


# ---------------------------------------------------------------------------
# Integrity report
# ---------------------------------------------------------------------------

@dataclass
class IntegrityReport:
    orphans: list[tuple[str, str]] = field(default_factory=list)
    duplicate_keys: list[tuple[str, str]] = field(default_factory=list)
    malformed_lines: list[tuple[str, int]] = field(default_factory=list)

    def is_clean(self) -> bool:
        return not (self.orphans or self.duplicate_keys or self.malformed_lines)


# ---------------------------------------------------------------------------
# The catalog
# ---------------------------------------------------------------------------

class Catalog:
    """Handle on an opened catalog directory.

    Single-writer, multi-reader: appends take an advisory lock file and
    raise :class:`CatalogLockedError` instead of blocking.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.tables = frozenset(TABLES)

    def table_path(self, table: str) -> Path:
        if table not in self.tables:
            raise CatalogError(f"unknown table {table!r}")
        return self.root / f"{table}.jsonl"

    # -- write path ---------------------------------------------------------

    @contextmanager
    def _writer_lock(self) -> Iterator[None]:
        lock_path = self.root / LOCK_FILE
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CatalogLockedError(
                f"catalog at {self.root} is locked by another writer "
                f"(stale lock? remove {lock_path})"
            ) from None
        try:
            os.write(fd, f"pid={os.getpid()}\n".encode())
            yield
        finally:
            os.close(fd)
            lock_path.unlink(missing_ok=True)

    def append_records(self, table: str, records: Sequence[Any]) -> int:
        """Append validated records; all-or-nothing per call.

        Duplicate primary keys — against the journal or within the batch —
        are rejected before anything is written.
        """
        path = self.table_path(table)
        to_record, _, validate, key_field = _TABLE_CODECS[table]
        prepared: list[dict[str, Any]] = []
        for index, rec in enumerate(records):
            if table == "detections":
                rec, problems = clamp_detection(rec)
            else:
                problems = validate(rec)
            if problems:
                raise RecordValidationError(
                    f"invalid {table} record at index {index}: {'; '.join(problems)}",
                    index=index,
                )
            prepared.append(to_record(rec))
        if key_field is not None:
            existing = {d[key_field] for d in self._read_raw(table)}
            for d in prepared:
                key = d[key_field]
                if key in existing:
                    raise DuplicateKeyError(table, key)
                existing.add(key)
        payload = "".join(
            json.dumps(d, ensure_ascii=False, sort_keys=True) + "\n" for d in prepared
        ).encode("utf-8")
        with self._writer_lock():
            with open(path, "ab") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
        return len(prepared)

    # -- read path ----------------------------------------------------------

    def _scan_lines(self, table: str) -> Iterator[tuple[int, dict[str, Any] | None]]:
        """Yield (line_number, record-or-None); None marks a malformed line."""
        path = self.table_path(table)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return
        except OSError as exc:
            raise CatalogError(f"unreadable journal {path}: {exc}") from exc
        if not data:
            return
        for lineno, raw in enumerate(data.split(b"\n"), start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw.decode("utf-8"))
                if not isinstance(record, dict):
                    raise ValueError("record is not an object")
            except (ValueError, UnicodeDecodeError):
                logger.warning(
                    "skipping malformed line %d in %s (truncated write?)", lineno, path
                )
                yield lineno, None
                continue
            yield lineno, record

    def _read_raw(self, table: str) -> list[dict[str, Any]]:
        return [rec for _, rec in self._scan_lines(table) if rec is not None]

    def read_assets(self) -> list[MediaAsset]:
        return [record_to_asset(d) for d in self._read_raw("assets")]

    def read_detections(self) -> list[Detection]:
        return [record_to_detection(d) for d in self._read_raw("detections")]

    def read_events(self) -> list[Event]:
        return [record_to_event(d) for d in self._read_raw("events")]

    def read_labels(self) -> list[LabelRecord]:
        return [record_to_label(d) for d in self._read_raw("labels")]

    def read_transfers(self) -> list[TransferRecord]:
        return [record_to_transfer(d) for d in self._read_raw("transfers")]

    def count(self, table: str) -> int:
        return len(self._read_raw(table))

    def asset_ids(self) -> set[str]:
        return {d["asset_id"] for d in self._read_raw("assets")}

    def query_assets(
        self,
        site_id: str | None = None,
        session_id: str | None = None,
        time_range: tuple[datetime | None, datetime | None] | None = None,
        kind: str | None = None,
    ) -> list[MediaAsset]:
        """Full-scan filter; results sorted by (site_id, captured_at, asset_id)."""
        results = []
        for asset in self.read_assets():
            if site_id is not None and asset.site_id != site_id:
                continue
            if session_id is not None and asset.session_id != session_id:
                continue
            if kind is not None and asset.kind != kind:
                continue
            if time_range is not None:
                start, end = time_range
                if start is not None and asset.captured_at < start:
                    continue
                if end is not None and asset.captured_at > end:
                    continue
            results.append(asset)
        results.sort(key=lambda a: (a.site_id, a.captured_at, a.asset_id))
        return results

    # -- integrity ----------------------------------------------------------

    def integrity_check(self) -> IntegrityReport:
        report = IntegrityReport()
        known_assets: set[str] = set()
        for table in TABLES:
            _, _, _, key_field = _TABLE_CODECS[table]
            seen: set[str] = set()
            for lineno, record in self._scan_lines(table):
                if record is None:
                    report.malformed_lines.append((table, lineno))
                    continue
                if table == "assets":
                    known_assets.add(record.get("asset_id", ""))
                if key_field is not None:
                    key = record.get(key_field, "")
                    if key in seen:
                        report.duplicate_keys.append((table, key))
                    seen.add(key)
        for lineno, record in self._scan_lines("detections"):
            if record is None:
                continue
            if record.get("asset_id") not in known_assets:
                report.orphans.append(("detections", record.get("asset_id", "")))
        return report

    # -- site configuration --------------------------------------------------

    def site_timezones(self) -> dict[str, str]:
        """Per-site timezone names from sites.conf; cameras log naive local time."""
        path = self.root / SITES_FILE
        if not path.exists():
            return {}
        return read_kv(path)

    def set_site_timezone(self, site_id: str, timezone_name: str) -> None:
        zones = self.site_timezones()
        zones[site_id] = timezone_name
        write_kv(self.root / SITES_FILE, zones)


def open_catalog(root: Path | str) -> Catalog:
    """Open or create a catalog; existing catalogs are never modified."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CatalogError(f"cannot create catalog root {root}: {exc}") from exc
    meta_path = root / META_FILE
    if meta_path.exists():
        meta = read_kv(meta_path)
        try:
            version = int(meta.get("format_version", "0"))
        except ValueError:
            raise CatalogError(f"{meta_path}: format_version is not an integer")
        if version < 1 or version > FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"catalog format version {version} unsupported (we read <= {FORMAT_VERSION})"
            )
    else:
        try:
            write_kv(
                meta_path,
                {
                    "format_version": str(FORMAT_VERSION),
                    "created_at": format_ts(datetime.now().replace(microsecond=0)),
                },
            )
        except OSError as exc:
            raise CatalogError(f"catalog root {root} not writable: {exc}") from exc
    catalog = Catalog(root)
    for table in TABLES:
        path = catalog.table_path(table)
        if not path.exists():
            path.touch()
    return catalog
