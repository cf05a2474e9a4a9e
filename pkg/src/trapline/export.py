"""Timelapse CSV interop and the analysis-dataset cleaning rules.

The CSV dialect is the labeling handoff surface: fixed header, RFC-4180
quoting, UTF-8, LF line endings. Cleaning drops human/unknown/bird records
unless the species sits on the keep list (wild turkeys don't fly far).
"""

from __future__ import annotations

import csv
import logging
import posixpath
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence, TypeVar

_T = TypeVar("_T")

from .catalog import (
    CATEGORY_ANIMAL,
    Catalog,
    Event,
    LabelRecord,
    MediaAsset,
)

logger = logging.getLogger(__name__)

CSV_HEADER = [
    "File",
    "RelativePath",
    "DateTime",
    "EventID",
    "Species",
    "Count",
    "TemperatureC",
    "MaxConfidence",
    "Representative",
]
MANDATORY_COLUMNS = ("File", "DateTime", "Species", "Count")
CSV_DATETIME_FMT = "%Y-%m-%d %H:%M:%S"

DEFAULT_REMOVE_FLAGS = frozenset({"human", "unknown", "bird"})
DEFAULT_KEEP_SPECIES = frozenset({"wild turkey"})


class CsvSchemaError(Exception):
    pass


@dataclass(frozen=True)
class CleaningPolicy:
    remove_flags: frozenset[str] = DEFAULT_REMOVE_FLAGS
    keep_species: frozenset[str] = DEFAULT_KEEP_SPECIES
    datetime_offsets: dict[str, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def asset_full_path(asset: MediaAsset) -> str:
    return posixpath.join(asset.session_id, asset.site_id, asset.relative_path)


def export_timelapse_csv(
    catalog: Catalog, events: Sequence[Event], path: Path | str
) -> int:
    """One row per event member; exactly one Representative=true per event."""
    assets = {a.asset_id: a for a in catalog.read_assets()}
    max_conf: dict[str, float] = defaultdict(float)
    for det in catalog.read_detections():
        if det.category == CATEGORY_ANIMAL:
            max_conf[det.asset_id] = max(max_conf[det.asset_id], det.confidence)
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for event in events:
            for asset_id in event.member_asset_ids:
                asset = assets.get(asset_id)
                if asset is None:
                    logger.warning(
                        "event %s references unknown asset %s; row skipped",
                        event.event_id,
                        asset_id,
                    )
                    continue
                full = asset_full_path(asset)
                writer.writerow(
                    [
                        posixpath.basename(full),
                        posixpath.dirname(full),
                        asset.captured_at.strftime(CSV_DATETIME_FMT),
                        event.event_id,
                        event.species or "",
                        event.individual_count,
                        "" if asset.temperature_c is None else asset.temperature_c,
                        f"{max_conf.get(asset_id, 0.0):.5f}",
                        "true" if asset_id == event.representative_asset_id else "false",
                    ]
                )
                rows += 1
    return rows


# ---------------------------------------------------------------------------
# Import
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImportIssue:
    row: int
    message: str


@dataclass
class ImportResult:
    records: list[LabelRecord]
    issues: list[ImportIssue]


def import_timelapse_csv(
    path: Path | str,
    catalog: Catalog | None = None,
    annotator: str = "timelapse",
) -> ImportResult:
    """Parse a labeled table back in; per-row problems never abort the rest.

    With a catalog, File/RelativePath resolve to asset ids; without one the
    joined relative path stands in as an opaque id. Unknown extra columns are
    retained as `column=value` flags.
    """
    by_path: dict[str, str] = {}
    if catalog is not None:
        by_path = {asset_full_path(a): a.asset_id for a in catalog.read_assets()}
    records: list[LabelRecord] = []
    issues: list[ImportIssue] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvSchemaError(f"{path}: empty file") from None
        missing = [c for c in MANDATORY_COLUMNS if c not in header]
        if missing:
            raise CsvSchemaError(f"{path}: missing mandatory columns {missing}")
        extra_columns = [c for c in header if c not in CSV_HEADER]
        index = {name: i for i, name in enumerate(header)}

        def cell(row: list[str], column: str) -> str:
            i = index.get(column)
            return row[i].strip() if i is not None and i < len(row) else ""

        for row_no, row in enumerate(reader, start=2):
            if not any(v.strip() for v in row):
                continue
            file = cell(row, "File")
            rel = cell(row, "RelativePath")
            full = posixpath.join(rel, file) if rel else file
            try:
                count = int(cell(row, "Count"))
            except ValueError:
                issues.append(
                    ImportIssue(row_no, f"Count {cell(row, 'Count')!r} is not an integer")
                )
                continue
            flags: set[str] = set()
            labeled_at = None
            raw_dt = cell(row, "DateTime")
            try:
                labeled_at = datetime.strptime(raw_dt, CSV_DATETIME_FMT)
            except ValueError:
                issues.append(ImportIssue(row_no, f"DateTime {raw_dt!r} unparseable"))
                flags.add("datetime_parse_failed")
            temperature = None
            raw_temp = cell(row, "TemperatureC")
            if raw_temp:
                try:
                    temperature = int(raw_temp)
                except ValueError:
                    issues.append(
                        ImportIssue(row_no, f"TemperatureC {raw_temp!r} is not an integer")
                    )
            species = cell(row, "Species")
            if not species:
                flags.add("unknown")
            asset_id = full
            if catalog is not None:
                resolved = by_path.get(full)
                if resolved is None:
                    issues.append(ImportIssue(row_no, f"no catalog asset for {full!r}"))
                else:
                    asset_id = resolved
            for column in extra_columns:
                value = cell(row, column)
                if value:
                    flags.add(f"{column}={value}")
            records.append(
                LabelRecord(
                    asset_id=asset_id,
                    event_id=cell(row, "EventID") or None,
                    species=species,
                    count=count,
                    temperature_c=temperature,
                    annotator=annotator,
                    labeled_at=labeled_at,
                    flags=frozenset(flags),
                )
            )
    return ImportResult(records=records, issues=issues)


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

def clean_datetimes(records: Sequence[_T], policy: CleaningPolicy) -> list[_T]:
    """Shift captured_at by the per-site clock-drift offset and re-sort.

    Works on any record carrying ``site_id`` and ``captured_at`` (assets,
    observations). Idempotent only when all offsets are zero; offsets for
    sites absent from the input are ignored with a warning.
    """
    sites = {r.site_id for r in records}
    for site in sorted(set(policy.datetime_offsets) - sites):
        logger.warning("datetime offset for unknown site %r ignored", site)
    shifted = []
    for record in records:
        offset = policy.datetime_offsets.get(record.site_id, 0)
        if offset:
            shifted.append(
                replace(record, captured_at=record.captured_at + timedelta(seconds=offset))
            )
        else:
            shifted.append(record)
    shifted.sort(key=lambda r: (r.site_id, r.captured_at, r.asset_id))
    return shifted


@dataclass
class CleaningResult:
    records: list[LabelRecord]
    removed_by_category: dict[str, int]


def apply_cleaning(
    records: Sequence[LabelRecord], policy: CleaningPolicy
) -> CleaningResult:
    """Drop remove-flagged records unless the species is keep-listed."""
    keep = {s.lower() for s in policy.keep_species}
    remove = {f.lower() for f in policy.remove_flags}
    kept: list[LabelRecord] = []
    removed: Counter[str] = Counter()
    for record in records:
        species = record.species.strip().lower()
        if species in keep:
            kept.append(record)
            continue
        hit = None
        if species in remove:
            hit = species
        else:
            flagged = sorted(f for f in record.flags if f.lower() in remove)
            if flagged:
                hit = flagged[0].lower()
        if hit is None:
            kept.append(record)
        else:
            removed[hit] += 1
    return CleaningResult(records=kept, removed_by_category=dict(removed))
