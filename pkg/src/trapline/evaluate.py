"""Detector-vs-human comparison at image and event level.

Presence/absence only: the human side is a per-image animal-present flag, so
there is no box matching. Predictions without a truth entry are excluded and
reported rather than silently counted as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .catalog import Catalog, Event
from .detect import DetectionBatch, canonical_file
from .export import asset_full_path


@dataclass(frozen=True)
class PresenceConfusion:
    true_positive: int
    false_positive: int
    true_negative: int
    false_negative: int
    threshold: float
    uncovered: tuple[str, ...] = ()

    @property
    def evaluated(self) -> int:
        return (
            self.true_positive
            + self.false_positive
            + self.true_negative
            + self.false_negative
        )


def predicted_positive_files(
    predictions: DetectionBatch, threshold: float
) -> set[str]:
    """Files with at least one animal detection at or above threshold."""
    animal_keys = predictions.animal_category_keys()
    positives = set()
    for entry in predictions.images:
        if any(
            d.category in animal_keys and d.conf >= threshold
            for d in entry.detections or []
        ):
            positives.add(canonical_file(entry.file))
    return positives


def image_presence_confusion(
    predictions: DetectionBatch,
    truth: Mapping[str, bool],
    threshold: float,
) -> PresenceConfusion:
    """Standard 2×2 table; an image is predicted positive iff any animal
    detection clears the threshold. Failure entries count as negatives."""
    positives = predicted_positive_files(predictions, threshold)
    tp = fp = tn = fn = 0
    uncovered = []
    for entry in predictions.images:
        file = canonical_file(entry.file)
        if file not in truth:
            uncovered.append(entry.file)
            continue
        actual = truth[file]
        predicted = file in positives
        if predicted and actual:
            tp += 1
        elif predicted and not actual:
            fp += 1
        elif not predicted and actual:
            fn += 1
        else:
            tn += 1
    return PresenceConfusion(
        true_positive=tp,
        false_positive=fp,
        true_negative=tn,
        false_negative=fn,
        threshold=threshold,
        uncovered=tuple(sorted(uncovered)),
    )


def precision_recall(
    confusion: PresenceConfusion,
) -> tuple[float | None, float | None]:
    """(precision, recall); None marks a 0/0 ratio, never a crash."""
    tp = confusion.true_positive
    precision = None
    if tp + confusion.false_positive > 0:
        precision = tp / (tp + confusion.false_positive)
    recall = None
    if tp + confusion.false_negative > 0:
        recall = tp / (tp + confusion.false_negative)
    return precision, recall


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    precision: float | None
    recall: float | None
    confusion: PresenceConfusion


def threshold_sweep(
    predictions: DetectionBatch,
    truth: Mapping[str, bool],
    thresholds: Sequence[float],
) -> list[SweepPoint]:
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    points = []
    for threshold in thresholds:
        confusion = image_presence_confusion(predictions, truth, threshold)
        precision, recall = precision_recall(confusion)
        points.append(SweepPoint(threshold, precision, recall, confusion))
    return points


def event_level_recall(
    truth_events: Sequence[Event],
    predictions: DetectionBatch,
    threshold: float,
    asset_files: Mapping[str, str] | None = None,
) -> float | None:
    """Fraction of truth events with ≥1 member predicted positive.

    ``asset_files`` maps member asset ids to prediction file keys; without it
    the asset id itself is assumed to be the key.
    """
    if not truth_events:
        return None
    positives = predicted_positive_files(predictions, threshold)
    detected = 0
    for event in truth_events:
        files = (
            (asset_files or {}).get(member, member)
            for member in event.member_asset_ids
        )
        if any(f in positives for f in files):
            detected += 1
    return detected / len(truth_events)


def presence_truth_from_catalog(catalog: Catalog) -> dict[str, bool]:
    """Per-image truth from human labels: present iff the latest label counts
    at least one animal. Keys are session/site-relative file paths."""
    latest: dict[str, int] = {}
    for label in catalog.read_labels():
        latest[label.asset_id] = label.count
    return {
        asset_full_path(asset): latest.get(asset.asset_id, 0) > 0
        for asset in catalog.read_assets()
    }


def asset_file_map(catalog: Catalog) -> dict[str, str]:
    """asset_id → session/site-relative path, for event-level evaluation."""
    return {a.asset_id: asset_full_path(a) for a in catalog.read_assets()}


def predictions_from_catalog(catalog: Catalog) -> DetectionBatch:
    """Reassemble cataloged detections as a batch keyed by full path — the
    merged view of whatever per-folder detector runs were appended."""
    from .detect import BatchDetection, ImageEntry, default_info

    by_asset: dict[str, list[BatchDetection]] = {}
    for det in catalog.read_detections():
        by_asset.setdefault(det.asset_id, []).append(
            BatchDetection(
                category=str(det.category), conf=det.confidence, bbox=det.bbox
            )
        )
    images = [
        ImageEntry(
            file=asset_full_path(asset),
            detections=by_asset.get(asset.asset_id, []),
        )
        for asset in catalog.query_assets()
    ]
    return DetectionBatch(images=images, info=default_info("catalog"))
