"""SD-card import: dated session folders, checksummed copies, manifests.

Copies are never moves — field cards get reused and destructive ingest is
unacceptable. Re-importing a card is a no-op thanks to checksum dedup.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Iterable
from uuid import uuid4

from PIL import Image

from .catalog import Catalog, MediaAsset, TransferRecord

logger = logging.getLogger(__name__)

MEDIA_EXTENSIONS = frozenset({"jpg", "jpeg", "png", "avi", "mp4", "mov"})
VIDEO_EXTENSIONS = frozenset({"avi", "mp4", "mov"})
SYSTEM_FILES = frozenset({"thumbs.db", "desktop.ini"})
MANIFEST_NAME = "manifest.tsv"

SOURCE_EMBEDDED = "embedded_metadata"
SOURCE_FILENAME = "filename_pattern"
SOURCE_MTIME = "file_mtime"

_MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun",
           "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")

_SESSION_RE = re.compile(r"\A(\d{1,2})([A-Z][a-z]{2})(\d{4})\Z")
# Trail cameras commonly stamp YYYYMMDD_HHMMSS somewhere in the stem, or use
# a bare MMDDhhmm stem (no year: borrowed from the file mtime).
_STEM_FULL_RE = re.compile(r"(?<!\d)(\d{4})(\d{2})(\d{2})[_-](\d{2})(\d{2})(\d{2})(?!\d)")
_STEM_MMDD_RE = re.compile(r"\A(\d{2})(\d{2})(\d{2})(\d{2})\Z")

_HASH_CHUNK = 1 << 20

# EXIF tags: DateTimeOriginal / DateTimeDigitized live in the Exif IFD,
# plain DateTime in IFD0.
_EXIF_IFD = 0x8769
_TAG_DATETIME_ORIGINAL = 36867
_TAG_DATETIME_DIGITIZED = 36868
_TAG_DATETIME = 306


class IngestError(Exception):
    pass


class ManifestError(IngestError):
    pass


# ---------------------------------------------------------------------------
# Session folder naming: "3May2024"
# ---------------------------------------------------------------------------

def session_folder_name(collection_date: date) -> str:
    d = collection_date
    return f"{d.day}{_MONTHS[d.month - 1]}{d.year}"


def parse_session_folder_name(name: str) -> date:
    m = _SESSION_RE.match(name)
    if not m or m.group(2) not in _MONTHS:
        raise ValueError(f"not a session folder name: {name!r}")
    day, month_abbrev, year = m.groups()
    return date(int(year), _MONTHS.index(month_abbrev) + 1, int(day))


# ---------------------------------------------------------------------------
# Source scanning and timestamp extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateFile:
    path: Path
    relative_path: str
    size_bytes: int
    kind: str
    captured_at: datetime
    timestamp_source: str


def _is_hidden(name: str) -> bool:
    return name.startswith(".") or name.startswith("~") or name.lower() in SYSTEM_FILES


def _embedded_timestamp(path: Path) -> datetime | None:
    if path.suffix.lower().lstrip(".") not in {"jpg", "jpeg", "png"}:
        return None
    try:
        with Image.open(path) as im:
            exif = im.getexif()
            raw = None
            try:
                sub = exif.get_ifd(_EXIF_IFD)
                raw = sub.get(_TAG_DATETIME_ORIGINAL) or sub.get(_TAG_DATETIME_DIGITIZED)
            except Exception:
                raw = None
            if not raw:
                raw = exif.get(_TAG_DATETIME)
            if not raw:
                return None
            return datetime.strptime(str(raw).strip(), "%Y:%m:%d %H:%M:%S")
    except Exception:
        return None


def _filename_timestamp(path: Path, mtime: datetime) -> datetime | None:
    stem = path.stem
    m = _STEM_FULL_RE.search(stem)
    if m:
        try:
            return datetime(*(int(g) for g in m.groups()))
        except ValueError:
            pass
    m = _STEM_MMDD_RE.match(stem)
    if m:
        month, day, hour, minute = (int(g) for g in m.groups())
        try:
            return datetime(mtime.year, month, day, hour, minute)
        except ValueError:
            pass
    return None


def extract_timestamp(path: Path) -> tuple[datetime, str]:
    """Apply the embedded > filename > mtime precedence; always succeeds."""
    mtime = datetime.fromtimestamp(path.stat().st_mtime).replace(microsecond=0)
    embedded = _embedded_timestamp(path)
    if embedded is not None:
        return embedded.replace(microsecond=0), SOURCE_EMBEDDED
    from_name = _filename_timestamp(path, mtime)
    if from_name is not None:
        return from_name, SOURCE_FILENAME
    return mtime, SOURCE_MTIME


def scan_source(
    source_path: Path | str, extensions: Iterable[str] | None = None
) -> list[CandidateFile]:
    """List admissible media files under a mounted card path."""
    root = Path(source_path)
    if not root.is_dir():
        raise IngestError(f"source path {root} is not a readable directory")
    allowed = frozenset(e.lower().lstrip(".") for e in (extensions or MEDIA_EXTENSIONS))
    candidates: list[CandidateFile] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if not _is_hidden(d))
        for name in sorted(filenames):
            if _is_hidden(name):
                continue
            ext = Path(name).suffix.lower().lstrip(".")
            if ext not in allowed:
                continue
            path = Path(dirpath) / name
            captured_at, source = extract_timestamp(path)
            candidates.append(
                CandidateFile(
                    path=path,
                    relative_path=path.relative_to(root).as_posix(),
                    size_bytes=path.stat().st_size,
                    kind="video" if ext in VIDEO_EXTENSIONS else "image",
                    captured_at=captured_at,
                    timestamp_source=source,
                )
            )
    candidates.sort(key=lambda c: c.relative_path)
    return candidates


# ---------------------------------------------------------------------------
# Import
# ---------------------------------------------------------------------------

@dataclass
class ImportReport:
    session_id: str
    site_id: str
    files_copied: int
    bytes_copied: int
    duplicates_skipped: int
    duration: float
    errors: list[tuple[str, str]]


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(_HASH_CHUNK):
            digest.update(chunk)
    return digest.hexdigest()


def _copy_and_hash(src: Path, dest: Path) -> tuple[str, int]:
    """Copy src to dest.part while hashing; caller finalizes or discards."""
    dest.parent.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    size = 0
    part = dest.with_name(dest.name + ".part")
    with open(src, "rb") as rfh, open(part, "wb") as wfh:
        while chunk := rfh.read(_HASH_CHUNK):
            digest.update(chunk)
            wfh.write(chunk)
            size += len(chunk)
    return digest.hexdigest(), size


def read_manifest(folder: Path) -> dict[str, tuple[int, str]]:
    path = folder / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    entries: dict[str, tuple[int, str]] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        rel, size, checksum = raw.split("\t")
        entries[rel] = (int(size), checksum)
    return entries


def write_manifest(folder: Path, entries: dict[str, tuple[int, str]]) -> None:
    path = folder / MANIFEST_NAME
    body = "".join(
        f"{rel}\t{size}\t{checksum}\n"
        for rel, (size, checksum) in sorted(entries.items())
    )
    path.write_text(body, encoding="utf-8")


def import_card(
    source_path: Path | str,
    site_id: str,
    collection_date: date,
    catalog: Catalog,
    dest_root: Path | str,
    workers: int | None = None,
    extensions: Iterable[str] | None = None,
) -> ImportReport:
    """Copy one card into `<dest_root>/<session>/<site_id>/` and catalog it.

    Per-file failures land in the report; remaining files always proceed.
    """
    t0 = time.monotonic()
    started = datetime.now().replace(microsecond=0)
    session_id = session_folder_name(collection_date)
    dest_dir = Path(dest_root) / session_id / site_id
    dest_dir.mkdir(parents=True, exist_ok=True)

    candidates = scan_source(source_path, extensions)
    known = catalog.asset_ids()
    errors: list[tuple[str, str]] = []
    hashed: dict[str, tuple[str, int]] = {}

    def work(cand: CandidateFile) -> tuple[CandidateFile, str, int]:
        checksum, size = _copy_and_hash(cand.path, dest_dir / cand.relative_path)
        return cand, checksum, size

    pool_size = workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        futures = {cand.relative_path: pool.submit(work, cand) for cand in candidates}

    # Finalization runs sequentially in path order so in-batch dedup is
    # deterministic no matter how the pool interleaved.
    new_assets: list[MediaAsset] = []
    files_copied = 0
    bytes_copied = 0
    duplicates = 0
    for cand in candidates:
        dest = dest_dir / cand.relative_path
        part = dest.with_name(dest.name + ".part")
        try:
            _, checksum, size = futures[cand.relative_path].result()
        except OSError as exc:
            part.unlink(missing_ok=True)
            errors.append((cand.relative_path, str(exc)))
            continue
        if checksum in known:
            part.unlink(missing_ok=True)
            duplicates += 1
            continue
        os.replace(part, dest)
        stat = cand.path.stat()
        os.utime(dest, (stat.st_atime, stat.st_mtime))
        known.add(checksum)
        files_copied += 1
        bytes_copied += size
        hashed[cand.relative_path] = (checksum, size)
        new_assets.append(
            MediaAsset(
                asset_id=checksum,
                site_id=site_id,
                session_id=session_id,
                relative_path=cand.relative_path,
                kind=cand.kind,
                captured_at=cand.captured_at,
                size_bytes=size,
                checksum=checksum,
                timestamp_source=cand.timestamp_source,
            )
        )

    try:
        manifest = read_manifest(dest_dir)
    except ManifestError:
        manifest = {}
    for rel, (checksum, size) in hashed.items():
        manifest[rel] = (size, checksum)
    write_manifest(dest_dir, manifest)

    if new_assets:
        catalog.append_records("assets", new_assets)
    finished = datetime.now().replace(microsecond=0)
    if finished < started:
        finished = started
    catalog.append_records(
        "transfers",
        [
            TransferRecord(
                transfer_id=f"tx-{uuid4().hex[:12]}",
                kind="card_import",
                payload_path=f"{session_id}/{site_id}",
                bytes=bytes_copied,
                started_at=started,
                finished_at=finished,
                outcome="ok" if not errors else "failed",
                attempts=1,
            )
        ],
    )
    errors.sort(key=lambda e: e[0])
    return ImportReport(
        session_id=session_id,
        site_id=site_id,
        files_copied=files_copied,
        bytes_copied=bytes_copied,
        duplicates_skipped=duplicates,
        duration=time.monotonic() - t0,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestMismatch:
    relative_path: str
    kind: str  # "missing" | "changed"
    detail: str


def verify_manifest(session_path: Path | str) -> list[ManifestMismatch]:
    """Re-hash every manifest entry; empty result means the folder is intact."""
    folder = Path(session_path)
    mismatches: list[ManifestMismatch] = []
    for rel, (size, checksum) in sorted(read_manifest(folder).items()):
        target = folder / rel
        if not target.exists():
            mismatches.append(ManifestMismatch(rel, "missing", "file not found"))
            continue
        actual_size = target.stat().st_size
        if actual_size != size:
            mismatches.append(
                ManifestMismatch(rel, "changed", f"size {actual_size} != {size}")
            )
            continue
        actual = sha256_file(target)
        if actual != checksum:
            mismatches.append(
                ManifestMismatch(rel, "changed", f"checksum {actual[:12]}… != {checksum[:12]}…")
            )
    return mismatches
