"""MegaDetector batch-JSON codec, threshold/merge algebra, detector adapters.

The JSON contract (top-level ``images`` / ``detection_categories`` / ``info``,
per-detection ``category`` / ``conf`` / ``bbox``) is the interop surface with
the upstream tooling; parse/write round-trips are semantic identities and
serialized floats carry at most five decimal places.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from . import ingest
from .catalog import (
    BBOX_EPSILON,
    CATEGORY_NAMES,
    Catalog,
    Detection,
    clamp_unit,
)

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = {"1": "animal", "2": "person", "3": "vehicle"}
BATCH_FORMAT_VERSION = "1.3"
DEFAULT_CONFIDENCE_THRESHOLD = 0.2
DEFAULT_TIMEOUT_SECONDS = 3600.0
EPOCH_TS = "1970-01-01 00:00:00"
CONF_DECIMALS = 5

_KNOWN_TOP_KEYS = ("images", "detection_categories", "info")
_KNOWN_IMAGE_KEYS = ("file", "detections", "failure")
_KNOWN_DET_KEYS = ("category", "conf", "bbox")


class BatchFormatError(Exception):
    """The document does not satisfy the batch JSON contract."""


class BatchMergeError(Exception):
    pass


class DetectorError(Exception):
    """A detector adapter failed to produce a valid batch."""

    def __init__(self, message: str, exit_status: int | None = None, stderr: str = ""):
        super().__init__(message)
        self.exit_status = exit_status
        self.stderr = stderr


class AdapterNotFoundError(DetectorError):
    pass


# ---------------------------------------------------------------------------
# Batch model
# ---------------------------------------------------------------------------

@dataclass
class BatchDetection:
    category: str
    conf: float
    bbox: tuple[float, float, float, float]
    extras: dict[str, Any] = field(default_factory=dict)


@dataclass
class ImageEntry:
    file: str
    detections: list[BatchDetection] | None = None
    failure: str | None = None
    extras: dict[str, Any] = field(default_factory=dict)


@dataclass
class DetectionBatch:
    images: list[ImageEntry]
    detection_categories: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_CATEGORIES)
    )
    info: dict[str, Any] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)

    def animal_category_keys(self) -> frozenset[str]:
        return frozenset(
            k for k, v in self.detection_categories.items() if v == "animal"
        )


def default_info(detector_name: str, generated_at: str = EPOCH_TS) -> dict[str, Any]:
    return {
        "format_version": BATCH_FORMAT_VERSION,
        "detector_name": detector_name,
        "generated_at": generated_at,
    }


def canonical_file(file: str) -> str:
    """Strip the `path#<seconds>` video-frame suffix back to the parent path."""
    base, sep, frame = file.rpartition("#")
    if sep and frame.replace(".", "", 1).isdigit():
        return base
    return file


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_batch(batch: DetectionBatch) -> list[str]:
    """List every contract violation; an empty list means conformant."""
    issues: list[str] = []
    category_keys = set(batch.detection_categories)
    for key, name in batch.detection_categories.items():
        if not isinstance(key, str) or not isinstance(name, str):
            issues.append(f"category map entry {key!r}: {name!r} must be strings")
    seen_names = set()
    for entry in batch.images:
        where = entry.file or "<unnamed>"
        if not entry.file:
            issues.append("image entry with empty file path")
        if entry.detections is None and entry.failure is None:
            issues.append(f"{where}: neither detections nor failure present")
        if entry.failure is not None and entry.detections:
            issues.append(f"{where}: failure entry must not carry detections")
        for i, det in enumerate(entry.detections or []):
            if det.category not in category_keys:
                issues.append(
                    f"{where}: detection {i} uses unknown category {det.category!r}"
                )
            if not -BBOX_EPSILON <= det.conf <= 1.0 + BBOX_EPSILON:
                issues.append(f"{where}: detection {i} confidence {det.conf!r} outside [0, 1]")
            if len(det.bbox) != 4:
                issues.append(f"{where}: detection {i} bbox must have 4 values")
            else:
                for j, v in enumerate(det.bbox):
                    if not -BBOX_EPSILON <= v <= 1.0 + BBOX_EPSILON:
                        issues.append(
                            f"{where}: detection {i} bbox[{j}] = {v!r} outside [0, 1]"
                        )
                x, y, w, h = det.bbox
                if x + w > 1.0 + BBOX_EPSILON or y + h > 1.0 + BBOX_EPSILON:
                    issues.append(f"{where}: detection {i} bbox extends past the frame")
        seen_names.add(entry.file)
    return issues


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

def parse_md_json(data: bytes | str) -> DetectionBatch:
    """Decode and validate a batch document; raises on any violation."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BatchFormatError(f"not UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise BatchFormatError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise BatchFormatError("top level is not an object")
    if "images" not in doc or not isinstance(doc["images"], list):
        raise BatchFormatError("missing `images` list")

    raw_categories = doc.get("detection_categories", DEFAULT_CATEGORIES)
    if not isinstance(raw_categories, dict):
        raise BatchFormatError("`detection_categories` is not an object")
    categories = {str(k): str(v) for k, v in raw_categories.items()}

    raw_info = doc.get("info", {})
    if not isinstance(raw_info, dict):
        raise BatchFormatError("`info` is not an object")
    info = dict(default_info("unknown"))
    info.update(raw_info)

    images: list[ImageEntry] = []
    for raw in doc["images"]:
        if not isinstance(raw, dict) or "file" not in raw:
            raise BatchFormatError(f"image entry without `file`: {raw!r}")
        file = str(raw["file"])
        failure = raw.get("failure")
        detections: list[BatchDetection] | None = None
        if "detections" in raw and raw["detections"] is not None:
            if not isinstance(raw["detections"], list):
                raise BatchFormatError(f"{file}: `detections` is not a list")
            detections = []
            for i, det in enumerate(raw["detections"]):
                detections.append(_parse_detection(file, i, det))
        if failure is not None and detections:
            raise BatchFormatError(f"{file}: failure entry carries detections")
        if failure is not None:
            detections = None
        entry = ImageEntry(
            file=file,
            detections=detections,
            failure=str(failure) if failure is not None else None,
            extras={k: v for k, v in raw.items() if k not in _KNOWN_IMAGE_KEYS},
        )
        images.append(entry)

    batch = DetectionBatch(
        images=images,
        detection_categories=categories,
        info=info,
        extras={k: v for k, v in doc.items() if k not in _KNOWN_TOP_KEYS},
    )
    issues = validate_batch(batch)
    if issues:
        raise BatchFormatError("; ".join(issues))
    # Clamp float round-trip drift now that gross violations are excluded.
    for entry in batch.images:
        for i, det in enumerate(entry.detections or []):
            entry.detections[i] = replace(
                det,
                conf=clamp_unit(det.conf),
                bbox=tuple(clamp_unit(v) for v in det.bbox),
            )
    return batch


def _parse_detection(file: str, index: int, raw: Any) -> BatchDetection:
    if not isinstance(raw, dict):
        raise BatchFormatError(f"{file}: detection {index} is not an object")
    try:
        category = str(raw["category"])
        conf = float(raw["conf"])
        bbox = tuple(float(v) for v in raw["bbox"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BatchFormatError(f"{file}: detection {index} malformed: {exc}") from exc
    return BatchDetection(
        category=category,
        conf=conf,
        bbox=bbox,
        extras={k: v for k, v in raw.items() if k not in _KNOWN_DET_KEYS},
    )


def _round5(value: float) -> float:
    return round(value, CONF_DECIMALS)


def write_md_json(batch: DetectionBatch) -> bytes:
    """Serialize with fixed key order and ≤5-decimal floats; byte-stable."""
    images = []
    for entry in batch.images:
        doc: dict[str, Any] = {"file": entry.file}
        if entry.detections is not None:
            doc["detections"] = [
                {
                    "category": det.category,
                    "conf": _round5(det.conf),
                    "bbox": [_round5(v) for v in det.bbox],
                    **{k: det.extras[k] for k in sorted(det.extras)},
                }
                for det in entry.detections
            ]
        if entry.failure is not None:
            doc["failure"] = entry.failure
        for key in sorted(entry.extras):
            doc[key] = entry.extras[key]
        images.append(doc)
    doc = {
        "images": images,
        "detection_categories": dict(batch.detection_categories),
        "info": dict(batch.info),
    }
    for key in sorted(batch.extras):
        doc[key] = batch.extras[key]
    return (json.dumps(doc, indent=1, ensure_ascii=False) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Set algebra over batches
# ---------------------------------------------------------------------------

def filter_by_confidence(batch: DetectionBatch, threshold: float) -> DetectionBatch:
    """Drop detections below threshold; image entries survive even emptied."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold!r} outside [0, 1]")
    images = []
    for entry in batch.images:
        detections = entry.detections
        if detections is not None:
            detections = [d for d in detections if d.conf >= threshold]
        images.append(
            ImageEntry(
                file=entry.file,
                detections=detections,
                failure=entry.failure,
                extras=dict(entry.extras),
            )
        )
    return DetectionBatch(
        images=images,
        detection_categories=dict(batch.detection_categories),
        info=dict(batch.info),
        extras=dict(batch.extras),
    )


def merge_batches(batches: Sequence[DetectionBatch]) -> DetectionBatch:
    """Unify per-folder runs; duplicate file paths are a hard error."""
    if not batches:
        return DetectionBatch(images=[], info=default_info("merge"))
    categories = batches[0].detection_categories
    for other in batches[1:]:
        if other.detection_categories != categories:
            raise BatchMergeError(
                f"category maps differ: {categories!r} vs {other.detection_categories!r}"
            )
    by_file: dict[str, ImageEntry] = {}
    for batch in batches:
        for entry in batch.images:
            if entry.file in by_file:
                raise BatchMergeError(f"duplicate file path: {entry.file}")
            by_file[entry.file] = entry
    return DetectionBatch(
        images=[by_file[f] for f in sorted(by_file)],
        detection_categories=dict(categories),
        info=dict(batches[0].info),
        extras=dict(batches[0].extras),
    )


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------

def load_response_table(path: Path | str) -> dict[str, list[BatchDetection]]:
    """Index a batch file by image path, for stub replay."""
    batch = parse_md_json(Path(path).read_bytes())
    return {entry.file: list(entry.detections or []) for entry in batch.images}


@dataclass
class StubDetectorAdapter:
    """Deterministic detector: replays a response table, or synthesizes
    seed-stable pseudo-detections for files it has never seen."""

    seed: int = 0
    response_table: dict[str, list[BatchDetection]] | None = None
    presence_rate: float = 0.25
    default_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD
    kind: str = "stub"

    def detect_folder(self, folder: Path) -> DetectionBatch:
        folder = Path(folder)
        files = [c.relative_path for c in ingest.scan_source(folder)]
        images = []
        for rel in files:
            if self.response_table is not None:
                dets = self._lookup(folder, rel)
            else:
                dets = self._generate(rel)
            images.append(ImageEntry(file=rel, detections=dets))
        return DetectionBatch(
            images=images,
            info=default_info(f"stub-seed{self.seed}"),
        )

    def _lookup(self, folder: Path, rel: str) -> list[BatchDetection]:
        assert self.response_table is not None
        for key in (rel, f"{folder.name}/{rel}", Path(rel).name):
            if key in self.response_table:
                return [replace(d, extras=dict(d.extras)) for d in self.response_table[key]]
        return []

    def _generate(self, rel: str) -> list[BatchDetection]:
        digest = hashlib.sha256(f"{self.seed}:{rel}".encode()).digest()
        draw = int.from_bytes(digest[:4], "big") / 2**32
        if draw >= self.presence_rate:
            return []
        n = 1 + digest[4] % 3
        dets = []
        for i in range(n):
            b = digest[5 + 4 * i : 9 + 4 * i]
            conf = _round5(0.3 + 0.69 * b[0] / 255)
            x = _round5(0.7 * b[1] / 255)
            y = _round5(0.7 * b[2] / 255)
            size = _round5(0.05 + 0.25 * b[3] / 255)
            dets.append(
                BatchDetection(
                    category="1",
                    conf=conf,
                    bbox=(x, y, min(size, _round5(1 - x)), min(size, _round5(1 - y))),
                )
            )
        return dets


@dataclass
class ExternalProcessAdapter:
    """Runs a real detector through a command template with
    `{input_folder}` / `{output_json}` placeholders."""

    command_template: str
    workdir: Path | None = None
    timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS
    default_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD
    kind: str = "external_process"

    def detect_folder(self, folder: Path) -> DetectionBatch:
        folder = Path(folder)
        with tempfile.TemporaryDirectory(prefix="trapline-detect-") as tmp:
            out_path = Path(tmp) / "output.json"
            tokens = [
                t.replace("{input_folder}", str(folder)).replace(
                    "{output_json}", str(out_path)
                )
                for t in shlex.split(self.command_template)
            ]
            try:
                proc = subprocess.run(
                    tokens,
                    capture_output=True,
                    text=True,
                    timeout=self.timeout_seconds,
                    cwd=self.workdir,
                )
            except subprocess.TimeoutExpired as exc:
                raise DetectorError(
                    f"detector timed out after {self.timeout_seconds:.0f}s on {folder}",
                    stderr=(exc.stderr or b"").decode("utf-8", "replace")
                    if isinstance(exc.stderr, bytes)
                    else (exc.stderr or ""),
                ) from exc
            except OSError as exc:
                raise DetectorError(f"cannot launch detector: {exc}") from exc
            if proc.returncode != 0:
                raise DetectorError(
                    f"detector exited with status {proc.returncode}",
                    exit_status=proc.returncode,
                    stderr=proc.stderr,
                )
            if not out_path.exists():
                raise DetectorError(f"detector wrote no output at {out_path}")
            try:
                return parse_md_json(out_path.read_bytes())
            except BatchFormatError as exc:
                raise DetectorError(f"detector output invalid: {exc}") from exc


DetectorAdapter = StubDetectorAdapter | ExternalProcessAdapter


def run_detector(
    adapter: DetectorAdapter, asset_folder: Path | str, catalog: Catalog | None = None
) -> DetectionBatch:
    """Detect over one session/site folder; catalog gains the detections.

    Already-present identical detections are skipped, so re-running over the
    same folder leaves the catalog unchanged.
    """
    folder = Path(asset_folder)
    batch = adapter.detect_folder(folder)
    if catalog is not None:
        appended = append_batch_detections(batch, folder, catalog)
        logger.info("cataloged %d detections from %s", appended, folder)
    return batch


def _detection_key(det: Detection) -> tuple:
    return (
        det.asset_id,
        det.category,
        round(det.confidence, CONF_DECIMALS),
        tuple(round(v, CONF_DECIMALS) for v in det.bbox),
    )


def append_batch_detections(
    batch: DetectionBatch, folder: Path, catalog: Catalog
) -> int:
    """Join batch entries to assets via session/site prefixes and append."""
    session_id = folder.parent.name
    site_id = folder.name
    assets = catalog.query_assets(site_id=site_id, session_id=session_id)
    by_rel = {a.relative_path: a.asset_id for a in assets}
    existing = {_detection_key(d) for d in catalog.read_detections()}
    new: list[Detection] = []
    for entry in batch.images:
        if entry.failure is not None:
            continue
        asset_id = by_rel.get(canonical_file(entry.file))
        if asset_id is None:
            logger.warning("no catalog asset for %s under %s", entry.file, folder)
            continue
        for det in entry.detections or []:
            try:
                category = int(det.category)
            except ValueError:
                category = -1
            if category not in CATEGORY_NAMES:
                logger.warning(
                    "skipping non-standard category %r for %s", det.category, entry.file
                )
                continue
            candidate = Detection(
                asset_id=asset_id,
                category=category,
                confidence=det.conf,
                bbox=det.bbox,
            )
            key = _detection_key(candidate)
            if key in existing:
                continue
            existing.add(key)
            new.append(candidate)
    if new:
        catalog.append_records("detections", new)
    return len(new)
