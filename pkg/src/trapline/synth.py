"""Seeded generator of synthetic camera-trap corpora with planted truth.

Stands in for the field dataset at desk scale: Poisson visits per site per
day, bursts of frames 10–120 s apart, and an empty-trigger injection tuned
to the 96%-blank regime. Metadata only by default — no pixels — with an
option to emit tiny placeholder files for adapters that need paths on disk.

Visits at one site are kept strictly further apart than the grouping gap,
so every planted visit is exactly one event and the planted summary is
analytically known.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import random
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Sequence

from . import export as export_mod
from .catalog import Catalog, Detection, LabelRecord, MediaAsset
from .detect import (
    BatchDetection,
    DetectionBatch,
    ImageEntry,
    default_info,
    write_md_json,
)
from .ingest import session_folder_name

FRAME_SPACING_SECONDS = (10, 120)


@dataclass(frozen=True)
class DetectorNoise:
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    count_jitter: float = 0.0

    def __post_init__(self):
        for name in ("miss_rate", "false_positive_rate", "count_jitter"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value!r}")


@dataclass(frozen=True)
class SpeciesSpec:
    name: str
    weight: float
    flags: frozenset[str] = frozenset()


DEFAULT_SPECIES_POOL = (
    SpeciesSpec("black-tailed deer", 0.45),
    SpeciesSpec("elk", 0.18),
    SpeciesSpec("coyote", 0.15),
    SpeciesSpec("bobcat", 0.10),
    SpeciesSpec("black bear", 0.07),
    SpeciesSpec("wild turkey", 0.05, frozenset({"bird"})),
)


@dataclass(frozen=True)
class SynthConfig:
    sites: int = 4
    days: int = 7
    empty_trigger_fraction: float = 0.96
    visit_rate_per_day: float = 2.0
    frames_per_visit: tuple[int, int] = (3, 8)
    group_size_range: tuple[int, int] = (1, 3)
    species_pool: tuple[SpeciesSpec, ...] = DEFAULT_SPECIES_POOL
    seed: int = 0
    detector_noise: DetectorNoise = DetectorNoise()
    start_date: date = date(2024, 5, 3)
    gap_minutes: float = 10.0

    def __post_init__(self):
        if self.sites < 1 or self.days < 1:
            raise ValueError("sites and days must be positive")
        if not 0.0 <= self.empty_trigger_fraction < 1.0:
            raise ValueError(
                "empty_trigger_fraction must be in [0, 1) — at 1.0 the empty-"
                "injection ratio is undefined"
            )
        if self.visit_rate_per_day <= 0:
            raise ValueError("visit_rate_per_day must be positive")
        lo, hi = self.frames_per_visit
        if lo < 1 or hi < lo:
            raise ValueError("frames_per_visit range empty")
        lo, hi = self.group_size_range
        if lo < 1 or hi < lo:
            raise ValueError("group_size_range empty")
        if not self.species_pool:
            raise ValueError("species_pool empty")
        if self.gap_minutes <= 0:
            raise ValueError("gap_minutes must be positive")


@dataclass
class PlantedVisit:
    site_id: str
    species: SpeciesSpec
    group_size: int
    asset_ids: list[str] = field(default_factory=list)


@dataclass
class SyntheticDataset:
    config: SynthConfig
    session_id: str
    assets: list[MediaAsset]
    truth_detections: DetectionBatch
    truth_labels: list[LabelRecord]
    visits: list[PlantedVisit]
    planted_summary: dict[str, int]
    contents: dict[str, bytes]  # full path → placeholder bytes


def _poisson(rng: random.Random, lam: float) -> int:
    """Knuth below λ=30, rounded normal approximation above."""
    if lam <= 0:
        return 0
    if lam < 30:
        limit = math.exp(-lam)
        k = 0
        product = rng.random()
        while product > limit:
            k += 1
            product *= rng.random()
        return k
    return max(0, int(rng.gauss(lam, math.sqrt(lam)) + 0.5))


def _weighted_species(rng: random.Random, pool: Sequence[SpeciesSpec]) -> SpeciesSpec:
    total = sum(s.weight for s in pool)
    pick = rng.random() * total
    cumulative = 0.0
    for spec in pool:
        cumulative += spec.weight
        if pick <= cumulative:
            return spec
    return pool[-1]


def _asset_content(seed: int, site_id: str, name: str, ts: datetime, size: int) -> bytes:
    header = f"trapline-synth|{seed}|{site_id}|{name}|{ts.isoformat()}\n".encode()
    filler = bytearray()
    block = hashlib.sha256(header).digest()
    while len(header) + len(filler) < size:
        filler.extend(block)
        block = hashlib.sha256(block).digest()
    return bytes(header + filler[: max(0, size - len(header))])


def _boxes(rng: random.Random, count: int) -> list[BatchDetection]:
    boxes = []
    for _ in range(count):
        conf = round(rng.uniform(0.70, 0.99), 5)
        x = round(rng.uniform(0.0, 0.7), 5)
        y = round(rng.uniform(0.0, 0.7), 5)
        w = round(min(rng.uniform(0.05, 0.3), 1.0 - x), 5)
        h = round(min(rng.uniform(0.05, 0.3), 1.0 - y), 5)
        boxes.append(BatchDetection(category="1", conf=conf, bbox=(x, y, w, h)))
    return boxes


def generate_dataset(config: SynthConfig) -> SyntheticDataset:
    """Fully deterministic under (config, seed)."""
    rng = random.Random(config.seed)
    collection_date = config.start_date + timedelta(days=config.days)
    session_id = session_folder_name(collection_date)
    gap_seconds = config.gap_minutes * 60

    assets: list[MediaAsset] = []
    images: list[ImageEntry] = []
    labels: list[LabelRecord] = []
    visits: list[PlantedVisit] = []
    contents: dict[str, bytes] = {}
    seen_checksums: set[str] = set()
    sequence = 0

    def add_asset(
        site_id: str, ts: datetime, detections: list[BatchDetection]
    ) -> MediaAsset | None:
        nonlocal sequence
        sequence += 1
        name = f"{site_id}_{ts:%Y%m%d_%H%M%S}_{sequence:06d}.jpg"
        size = rng.randint(256, 2048)
        temperature = rng.randint(-5, 35)
        content = _asset_content(config.seed, site_id, name, ts, size)
        checksum = hashlib.sha256(content).hexdigest()
        if checksum in seen_checksums:
            return None
        seen_checksums.add(checksum)
        asset = MediaAsset(
            asset_id=checksum,
            site_id=site_id,
            session_id=session_id,
            relative_path=name,
            kind="image",
            captured_at=ts,
            size_bytes=len(content),
            checksum=checksum,
            temperature_c=temperature,
            timestamp_source="filename_pattern",
        )
        assets.append(asset)
        images.append(ImageEntry(file=f"{site_id}/{name}", detections=detections))
        contents[f"{site_id}/{name}"] = content
        return asset

    animal_frames = 0
    for site_index in range(config.sites):
        site_id = f"S{site_index + 1:02d}"
        for day in range(config.days):
            day_start = datetime.combine(
                config.start_date + timedelta(days=day), datetime.min.time()
            )
            n_visits = _poisson(rng, config.visit_rate_per_day)
            day_visits = []
            for _ in range(n_visits):
                frames = rng.randint(*config.frames_per_visit)
                spacings = [
                    rng.randint(*FRAME_SPACING_SECONDS) for _ in range(frames - 1)
                ]
                span = sum(spacings)
                lo = int(gap_seconds) + 60
                hi = 86400 - int(gap_seconds) - span - 60
                if hi <= lo:
                    continue
                start = rng.randint(lo, hi)
                day_visits.append((start, span, frames, spacings))
            day_visits.sort(key=lambda v: v[0])
            previous_end = -math.inf
            for start, span, frames, spacings in day_visits:
                # Strictly beyond the gap so planted visits never merge.
                if start <= previous_end + gap_seconds + 60:
                    continue
                previous_end = start + span
                species = _weighted_species(rng, config.species_pool)
                group = rng.randint(*config.group_size_range)
                visit = PlantedVisit(site_id=site_id, species=species, group_size=group)
                offset = 0
                for frame in range(frames):
                    if frame > 0:
                        offset += spacings[frame - 1]
                    ts = day_start + timedelta(seconds=start + offset)
                    asset = add_asset(site_id, ts, _boxes(rng, group))
                    if asset is None:
                        continue
                    animal_frames += 1
                    visit.asset_ids.append(asset.asset_id)
                    labels.append(
                        LabelRecord(
                            asset_id=asset.asset_id,
                            species=species.name,
                            count=group,
                            temperature_c=asset.temperature_c,
                            annotator="truth",
                            labeled_at=ts,
                            flags=species.flags,
                        )
                    )
                if visit.asset_ids:
                    visits.append(visit)

    fraction = config.empty_trigger_fraction
    if fraction > 0 and animal_frames:
        n_empty = _poisson(rng, animal_frames * fraction / (1.0 - fraction))
        for _ in range(n_empty):
            site_id = f"S{rng.randint(1, config.sites):02d}"
            day = rng.randint(0, config.days - 1)
            second = rng.randint(0, 86399)
            ts = datetime.combine(
                config.start_date + timedelta(days=day), datetime.min.time()
            ) + timedelta(seconds=second)
            add_asset(site_id, ts, [])

    batch = DetectionBatch(
        images=sorted(images, key=lambda e: e.file),
        info=default_info(
            f"synthetic-truth-seed{config.seed}",
            generated_at=f"{collection_date.isoformat()} 00:00:00",
        ),
    )
    assets.sort(key=lambda a: (a.site_id, a.captured_at, a.asset_id))
    labels.sort(key=lambda lb: lb.asset_id)
    summary = {
        "event_count": len(visits),
        "individual_total": sum(v.group_size for v in visits),
        "animal_images": animal_frames,
        "total_images": len(assets),
    }
    return SyntheticDataset(
        config=config,
        session_id=session_id,
        assets=assets,
        truth_detections=batch,
        truth_labels=labels,
        visits=visits,
        planted_summary=summary,
        contents=contents,
    )


# ---------------------------------------------------------------------------
# Detector perturbation
# ---------------------------------------------------------------------------

def perturb_detector(
    truth: DetectionBatch, noise: DetectorNoise, seed: int
) -> DetectionBatch:
    """Planted error modes: dropped boxes, spurious boxes, split-animal
    overcounts. Deterministic under seed; zero noise is the identity."""
    rng = random.Random(seed)
    images = []
    for entry in truth.images:
        if entry.failure is not None or entry.detections is None:
            images.append(
                ImageEntry(
                    file=entry.file,
                    detections=None if entry.detections is None else list(entry.detections),
                    failure=entry.failure,
                    extras=dict(entry.extras),
                )
            )
            continue
        kept = [d for d in entry.detections if rng.random() >= noise.miss_rate]
        if kept and rng.random() < noise.count_jitter:
            double = rng.choice(kept)
            x, y, w, h = double.bbox
            shifted = BatchDetection(
                category=double.category,
                conf=round(max(0.0, double.conf * 0.95), 5),
                bbox=(round(min(x + 0.02, 1.0 - w), 5), y, w, h),
            )
            kept = kept + [shifted]
        if rng.random() < noise.false_positive_rate:
            kept = kept + _spurious_box(rng)
        images.append(ImageEntry(file=entry.file, detections=kept))
    return DetectionBatch(
        images=images,
        detection_categories=dict(truth.detection_categories),
        info={**truth.info, "detector_name": f"{truth.info.get('detector_name', 'truth')}+noise"},
        extras=dict(truth.extras),
    )


def _spurious_box(rng: random.Random) -> list[BatchDetection]:
    conf = round(rng.uniform(0.15, 0.95), 5)
    x = round(rng.uniform(0.0, 0.8), 5)
    y = round(rng.uniform(0.0, 0.8), 5)
    w = round(min(rng.uniform(0.03, 0.2), 1.0 - x), 5)
    h = round(min(rng.uniform(0.03, 0.2), 1.0 - y), 5)
    return [BatchDetection(category="1", conf=conf, bbox=(x, y, w, h))]


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def write_dataset(
    dataset: SyntheticDataset, out_dir: Path | str, emit_files: bool = False
) -> dict[str, Path]:
    """Write the ready-to-ingest source tree and the truth files.

    ``emit_files`` writes the placeholder media bytes (mtimes set to the
    planted capture time); otherwise only truth artifacts are emitted.
    """
    out = Path(out_dir)
    cards = out / "cards"
    truth_dir = out / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    if emit_files:
        by_path = {f"{a.site_id}/{a.relative_path}": a for a in dataset.assets}
        for rel, content in sorted(dataset.contents.items()):
            target = cards / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(content)
            stamp = by_path[rel].captured_at.timestamp()
            os.utime(target, (stamp, stamp))
    else:
        cards.mkdir(parents=True, exist_ok=True)

    detections_path = truth_dir / "detections.json"
    detections_path.write_bytes(write_md_json(dataset.truth_detections))

    labels_path = truth_dir / "labels.csv"
    _write_truth_labels(dataset, labels_path)

    summary_path = truth_dir / "summary.json"
    summary_path.write_text(
        json.dumps(dataset.planted_summary, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    return {
        "cards": cards,
        "detections": detections_path,
        "labels": labels_path,
        "summary": summary_path,
    }


def _write_truth_labels(dataset: SyntheticDataset, path: Path) -> None:
    assets = {a.asset_id: a for a in dataset.assets}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(export_mod.CSV_HEADER)
        for label in dataset.truth_labels:
            asset = assets[label.asset_id]
            writer.writerow(
                [
                    asset.relative_path,
                    f"{asset.session_id}/{asset.site_id}",
                    asset.captured_at.strftime(export_mod.CSV_DATETIME_FMT),
                    "",
                    label.species,
                    label.count,
                    "" if label.temperature_c is None else label.temperature_c,
                    "",
                    "",
                ]
            )


def load_into_catalog(dataset: SyntheticDataset, catalog: Catalog) -> dict[str, int]:
    """Skip the copy step: plant assets, truth detections, and labels directly."""
    catalog.append_records("assets", dataset.assets)
    by_file = {
        f"{a.site_id}/{a.relative_path}": a.asset_id for a in dataset.assets
    }
    detections = [
        Detection(
            asset_id=by_file[entry.file],
            category=int(det.category),
            confidence=det.conf,
            bbox=det.bbox,
        )
        for entry in dataset.truth_detections.images
        for det in entry.detections or []
    ]
    if detections:
        catalog.append_records("detections", detections)
    if dataset.truth_labels:
        catalog.append_records("labels", dataset.truth_labels)
    return {
        "assets": len(dataset.assets),
        "detections": len(detections),
        "labels": len(dataset.truth_labels),
    }
