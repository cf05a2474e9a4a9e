from __future__ import annotations

import math
import random
from datetime import datetime, timedelta

import pytest

from trapline.detect import BatchDetection, DetectionBatch, ImageEntry, default_info
from trapline.evaluate import (
    PresenceConfusion,
    event_level_recall,
    image_presence_confusion,
    precision_recall,
    threshold_sweep,
)
from trapline.events import GroupingConfig, Observation, group_events

from conftest import hex_id

T0 = datetime(2024, 5, 3, 9, 0, 0)


def batch_of(files_with_conf: dict[str, float | None]) -> DetectionBatch:
    """conf None = empty image."""
    images = []
    for file, conf in files_with_conf.items():
        dets = [] if conf is None else [BatchDetection("1", conf, (0.1, 0.1, 0.2, 0.2))]
        images.append(ImageEntry(file=file, detections=dets))
    return DetectionBatch(images=images, info=default_info("test"))


def binomial_ci99(p: float, n: int) -> tuple[float, float]:
    z = 2.5758293035489004  # 99% two-sided normal quantile
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


class TestImagePresenceConfusion:
    def test_perfect_detector(self):
        truth = {f"img{i}.jpg": i < 4 for i in range(10)}
        pred = batch_of({f: (0.9 if v else None) for f, v in truth.items()})
        confusion = image_presence_confusion(pred, truth, 0.2)
        assert (confusion.true_positive, confusion.true_negative) == (4, 6)
        assert confusion.false_positive == confusion.false_negative == 0

    def test_all_empty_predictions(self):
        truth = {f"img{i}.jpg": i < 4 for i in range(10)}
        pred = batch_of({f: None for f in truth})
        confusion = image_presence_confusion(pred, truth, 0.2)
        assert confusion.true_positive == 0
        assert confusion.false_negative == 4
        assert confusion.true_negative == 6

    def test_uncovered_excluded_and_reported(self):
        truth = {"a.jpg": True}
        pred = batch_of({"a.jpg": 0.9, "mystery.jpg": 0.8})
        confusion = image_presence_confusion(pred, truth, 0.2)
        assert confusion.evaluated == 1
        assert confusion.uncovered == ("mystery.jpg",)

    def test_failure_entries_count_negative(self):
        truth = {"broken.jpg": True}
        pred = DetectionBatch(
            images=[ImageEntry(file="broken.jpg", failure="corrupt")],
            info=default_info("test"),
        )
        confusion = image_presence_confusion(pred, truth, 0.2)
        assert confusion.false_negative == 1

    def test_count_conservation(self):
        rng = random.Random(11)
        truth = {f"f{i}.jpg": rng.random() < 0.3 for i in range(200)}
        pred = batch_of(
            {f: (rng.random() if rng.random() < 0.5 else None) for f in truth}
        )
        pred.images.append(ImageEntry(file="extra.jpg", detections=[]))
        confusion = image_presence_confusion(pred, truth, 0.25)
        assert confusion.evaluated + len(confusion.uncovered) == len(pred.images)

    def test_planted_flip_noise_within_ci(self):
        # 5% of images get the wrong presence call; the confusion must agree
        # with the planted flip count (computed independently here).
        rng = random.Random(99)
        n = 5000
        flip_rate = 0.05
        truth = {}
        pred_conf = {}
        flipped_positive = 0  # truth False, predicted True
        flipped_negative = 0
        for i in range(n):
            file = f"img{i:05d}.jpg"
            actual = rng.random() < 0.5
            truth[file] = actual
            flip = rng.random() < flip_rate
            predicted = actual ^ flip
            if flip and predicted:
                flipped_positive += 1
            if flip and not predicted:
                flipped_negative += 1
            pred_conf[file] = 0.9 if predicted else None
        confusion = image_presence_confusion(batch_of(pred_conf), truth, 0.2)
        assert confusion.false_positive == flipped_positive
        assert confusion.false_negative == flipped_negative
        lo, hi = binomial_ci99(flip_rate, n)
        measured = (confusion.false_positive + confusion.false_negative) / n
        assert lo <= measured <= hi


class TestPrecisionRecall:
    def test_arithmetic(self):
        p, r = precision_recall(PresenceConfusion(4, 1, 0, 0, 0.2))
        assert p == pytest.approx(0.8)
        assert r == pytest.approx(1.0)

    def test_zero_over_zero_not_applicable(self):
        p, r = precision_recall(PresenceConfusion(0, 0, 5, 0, 0.2))
        assert p is None
        assert r is None

    def test_mixed(self):
        p, r = precision_recall(PresenceConfusion(9, 1, 0, 3, 0.2))
        assert p == pytest.approx(0.9)
        assert r == pytest.approx(0.75)


class TestThresholdSweep:
    def _noisy(self, n=400, seed=13):
        rng = random.Random(seed)
        truth = {}
        conf = {}
        for i in range(n):
            file = f"img{i:04d}.jpg"
            actual = rng.random() < 0.3
            truth[file] = actual
            if actual and rng.random() < 0.9:
                conf[file] = rng.random()
            elif not actual and rng.random() < 0.2:
                conf[file] = rng.random() * 0.8
            else:
                conf[file] = None
        return batch_of(conf), truth

    def test_single_threshold_equals_composition(self):
        pred, truth = self._noisy()
        (point,) = threshold_sweep(pred, truth, [0.3])
        confusion = image_presence_confusion(pred, truth, 0.3)
        assert point.confusion == confusion
        assert (point.precision, point.recall) == precision_recall(confusion)

    def test_recall_zero_vs_one(self):
        pred, truth = self._noisy()
        points = threshold_sweep(pred, truth, [0.0, 1.0])
        r0 = points[0].recall or 0.0
        r1 = points[1].recall or 0.0
        assert r0 >= r1

    def test_eleven_point_monotonicity(self):
        pred, truth = self._noisy(n=800)
        thresholds = [i / 10 for i in range(11)]
        points = threshold_sweep(pred, truth, thresholds)
        recalls = [p.recall if p.recall is not None else 0.0 for p in points]
        fps = [p.confusion.false_positive for p in points]
        assert recalls == sorted(recalls, reverse=True)
        assert fps == sorted(fps, reverse=True)

    def test_unsorted_thresholds_rejected(self):
        pred, truth = self._noisy(n=10)
        with pytest.raises(ValueError):
            threshold_sweep(pred, truth, [0.5, 0.2])


def _truth_events(n_events: int, frames: int):
    observations = []
    for e in range(n_events):
        base = T0 + timedelta(hours=e)
        for f in range(frames):
            observations.append(
                Observation(
                    asset_id=hex_id(f"e{e}f{f}"),
                    site_id="S01",
                    captured_at=base + timedelta(seconds=30 * f),
                    species="deer",
                    max_animal_confidence=0.0,
                    animal_count=1,
                )
            )
    events = group_events(observations, GroupingConfig(gap_minutes=10))
    assert len(events) == n_events
    file_of = {o.asset_id: f"{o.asset_id}.jpg" for o in observations}
    return events, file_of


class TestEventLevelRecall:
    def test_one_hit_in_five_frames_detects_event(self):
        events, file_of = _truth_events(1, 5)
        hits = {list(file_of.values())[2]: 0.9}
        pred = batch_of({f: hits.get(f) for f in file_of.values()})
        assert event_level_recall(events, pred, 0.2, file_of) == 1.0

    def test_zero_hits_misses_event(self):
        events, file_of = _truth_events(1, 5)
        pred = batch_of({f: None for f in file_of.values()})
        assert event_level_recall(events, pred, 0.2, file_of) == 0.0

    def test_empty_truth_not_applicable(self):
        pred = batch_of({"x.jpg": 0.9})
        assert event_level_recall([], pred, 0.2) is None

    def test_planted_miss_rate_half_on_six_frame_events(self):
        # Analytic expectation: 1 - 0.5^6; simulation must land in the 99% CI.
        rng = random.Random(21)
        n_events, frames = 800, 6
        events, file_of = _truth_events(n_events, frames)
        pred = batch_of(
            {f: (0.9 if rng.random() >= 0.5 else None) for f in file_of.values()}
        )
        measured = event_level_recall(events, pred, 0.2, file_of)
        expected = 1 - 0.5**frames
        lo, hi = binomial_ci99(expected, n_events)
        assert lo <= measured <= hi

    def test_event_recall_at_least_image_recall(self):
        rng = random.Random(31)
        for trial in range(20):
            n_events, frames = rng.randint(1, 20), rng.randint(1, 6)
            events, file_of = _truth_events(n_events, frames)
            pred = batch_of(
                {f: (rng.random() if rng.random() < 0.6 else None)
                 for f in file_of.values()}
            )
            truth = {f: True for f in file_of.values()}
            confusion = image_presence_confusion(pred, truth, 0.2)
            _, image_recall = precision_recall(confusion)
            event_recall = event_level_recall(events, pred, 0.2, file_of)
            assert event_recall >= (image_recall or 0.0)
