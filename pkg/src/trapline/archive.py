"""Batched session uploads to a pluggable remote, with Table-shaped stats.

Campus uplinks are slow, so plans are built largest-first to squeeze the
overnight window, every write is read back and re-hashed, and failures are
retried a bounded number of times before the session is marked failed.
"""

from __future__ import annotations

import logging
import shutil
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Protocol, Sequence
from uuid import uuid4

from .catalog import Catalog, TransferRecord
from .ingest import sha256_file

logger = logging.getLogger(__name__)

DEFAULT_THROUGHPUT_BYTES_PER_SEC = 100 * 1024 * 1024  # campus-link prior
DEFAULT_RETRY_LIMIT = 2


class RemoteError(Exception):
    pass


class Remote(Protocol):
    """Minimal remote surface: put a file, hash it back, list entries."""

    def put(self, src: Path, dest: str) -> None: ...

    def read_back_hash(self, dest: str) -> str: ...

    def list_entries(self) -> list[str]: ...


class LocalDirectoryRemote:
    """Filesystem-backed remote; stands in for the institutional store."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, src: Path, dest: str) -> None:
        target = self.root / dest
        target.parent.mkdir(parents=True, exist_ok=True)
        try:
            shutil.copyfile(src, target)
        except OSError as exc:
            raise RemoteError(f"put {dest} failed: {exc}") from exc

    def read_back_hash(self, dest: str) -> str:
        target = self.root / dest
        if not target.exists():
            raise RemoteError(f"{dest} missing at remote")
        return sha256_file(target)

    def list_entries(self) -> list[str]:
        return sorted(
            p.relative_to(self.root).as_posix()
            for p in self.root.rglob("*")
            if p.is_file()
        )


class FaultInjectingRemote:
    """Test double: fails the first ``fail_times`` puts (None: always fails)."""

    def __init__(self, inner: Remote, fail_times: int | None = 1):
        self.inner = inner
        self.fail_times = fail_times
        self.calls = 0

    def put(self, src: Path, dest: str) -> None:
        self.calls += 1
        if self.fail_times is None or self.calls <= self.fail_times:
            raise RemoteError(f"injected failure on put #{self.calls} ({dest})")
        self.inner.put(src, dest)

    def read_back_hash(self, dest: str) -> str:
        return self.inner.read_back_hash(dest)

    def list_entries(self) -> list[str]:
        return self.inner.list_entries()


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    start: datetime
    end: datetime

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("window end must follow start")

    @property
    def seconds(self) -> float:
        return (self.end - self.start).total_seconds()


@dataclass(frozen=True)
class RemoteConfig:
    throughput_bytes_per_sec: float = DEFAULT_THROUGHPUT_BYTES_PER_SEC
    retry_limit: int = DEFAULT_RETRY_LIMIT


@dataclass(frozen=True)
class PlanEntry:
    session_id: str
    site_id: str
    path: Path
    bytes: int
    estimated_seconds: float

    @property
    def payload_key(self) -> str:
        return f"{self.session_id}/{self.site_id}"


@dataclass
class UploadPlan:
    window: Window
    entries: list[PlanEntry] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.entries)

    @property
    def estimated_seconds(self) -> float:
        return sum(e.estimated_seconds for e in self.entries)


def uploaded_payloads(catalog: Catalog) -> set[str]:
    return {
        t.payload_path
        for t in catalog.read_transfers()
        if t.kind == "remote_upload" and t.outcome in ("ok", "retried_ok")
    }


def pending_sessions(catalog: Catalog, dest_root: Path | str) -> list[PlanEntry]:
    """Session/site folders with cataloged assets and no successful upload."""
    sizes: dict[tuple[str, str], int] = {}
    for asset in catalog.read_assets():
        key = (asset.session_id, asset.site_id)
        sizes[key] = sizes.get(key, 0) + asset.size_bytes
    done = uploaded_payloads(catalog)
    entries = [
        PlanEntry(
            session_id=session,
            site_id=site,
            path=Path(dest_root) / session / site,
            bytes=size,
            estimated_seconds=0.0,
        )
        for (session, site), size in sizes.items()
        if f"{session}/{site}" not in done
    ]
    entries.sort(key=lambda e: (-e.bytes, e.session_id, e.site_id))
    return entries


def plan_upload(
    catalog: Catalog,
    window: Window,
    dest_root: Path | str,
    config: RemoteConfig | None = None,
) -> UploadPlan:
    """First-fit-decreasing into the window, using the throughput prior."""
    config = config or RemoteConfig()
    plan = UploadPlan(window=window)
    remaining = window.seconds
    skipped = 0
    pending = pending_sessions(catalog, dest_root)
    for entry in pending:
        estimate = entry.bytes / config.throughput_bytes_per_sec
        if estimate <= remaining:
            plan.entries.append(
                PlanEntry(
                    session_id=entry.session_id,
                    site_id=entry.site_id,
                    path=entry.path,
                    bytes=entry.bytes,
                    estimated_seconds=estimate,
                )
            )
            remaining -= estimate
        else:
            skipped += 1
    if pending and not plan.entries:
        plan.notes.append("window too small for any pending session")
    elif skipped:
        plan.notes.append(f"{skipped} session(s) deferred past this window")
    return plan


def write_plan_listing(plan: UploadPlan, path: Path | str) -> None:
    """Human-readable listing for operator review before the overnight run."""
    lines = [
        f"# upload plan, window {plan.window.start:%Y-%m-%d %H:%M} .. {plan.window.end:%Y-%m-%d %H:%M}",
        f"# {len(plan.entries)} session(s), {plan.total_bytes} bytes, "
        f"~{plan.estimated_seconds / 60:.1f} min estimated",
    ]
    for entry in plan.entries:
        lines.append(
            f"{entry.payload_key}\t{entry.bytes}\t~{entry.estimated_seconds / 60:.1f} min"
        )
    for note in plan.notes:
        lines.append(f"# note: {note}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _upload_session(folder: Path, remote: Remote, base: str) -> None:
    """Copy every file, then verify each destination hash against the source."""
    files = sorted(p for p in folder.rglob("*") if p.is_file())
    if not files:
        raise RemoteError(f"nothing to upload under {folder}")
    for path in files:
        dest = f"{base}/{path.relative_to(folder).as_posix()}"
        remote.put(path, dest)
        actual = remote.read_back_hash(dest)
        expected = sha256_file(path)
        if actual != expected:
            raise RemoteError(f"verify-after-write failed for {dest}")


def execute_upload(
    plan: UploadPlan,
    remote: Remote,
    catalog: Catalog,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
) -> list[TransferRecord]:
    """Upload each planned session; per-session failures never stop the run."""
    records: list[TransferRecord] = []
    for entry in plan.entries:
        started = datetime.now().replace(microsecond=0)
        t0 = time.monotonic()
        attempts = 0
        outcome = "failed"
        for attempt in range(1, retry_limit + 2):
            attempts = attempt
            try:
                _upload_session(entry.path, remote, entry.payload_key)
            except RemoteError as exc:
                logger.warning(
                    "upload attempt %d/%d for %s failed: %s",
                    attempt,
                    retry_limit + 1,
                    entry.payload_key,
                    exc,
                )
                continue
            outcome = "ok" if attempt == 1 else "retried_ok"
            break
        finished = datetime.now().replace(microsecond=0)
        if finished < started:
            finished = started
        records.append(
            TransferRecord(
                transfer_id=f"tx-{uuid4().hex[:12]}",
                kind="remote_upload",
                payload_path=entry.payload_key,
                bytes=entry.bytes,
                started_at=started,
                finished_at=finished,
                outcome=outcome,
                attempts=attempts,
            )
        )
        logger.info(
            "upload %s: %s after %d attempt(s) (%.1fs)",
            entry.payload_key,
            outcome,
            attempts,
            time.monotonic() - t0,
        )
    if records:
        catalog.append_records("transfers", records)
    return records


# ---------------------------------------------------------------------------
# Statistics (Tables 1–2 shape)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransferStats:
    count: int
    bytes_min: int
    bytes_max: int
    bytes_avg: float
    bytes_total: int
    duration_min: float
    duration_max: float
    duration_avg: float
    duration_total: float


EMPTY_STATS = TransferStats(0, 0, 0, 0.0, 0, 0.0, 0.0, 0.0, 0.0)


def summarize_transfers(records: Sequence[TransferRecord]) -> TransferStats:
    """Exact min/max/avg/total over sizes and wall-clock durations."""
    if not records:
        return EMPTY_STATS
    sizes = [r.bytes for r in records]
    durations = [(r.finished_at - r.started_at).total_seconds() for r in records]
    return TransferStats(
        count=len(records),
        bytes_min=min(sizes),
        bytes_max=max(sizes),
        bytes_avg=sum(sizes) / len(sizes),
        bytes_total=sum(sizes),
        duration_min=min(durations),
        duration_max=max(durations),
        duration_avg=sum(durations) / len(durations),
        duration_total=sum(durations),
    )
