from __future__ import annotations

import json
import math
from datetime import timedelta

import pytest

from trapline.catalog import open_catalog
from trapline.detect import parse_md_json, write_md_json
from trapline.events import GroupingConfig, collect_observations, dataset_summary, group_events
from trapline.export import import_timelapse_csv
from trapline.synth import (
    DetectorNoise,
    SpeciesSpec,
    SynthConfig,
    generate_dataset,
    load_into_catalog,
    perturb_detector,
    write_dataset,
)


def binomial_ci99(p: float, n: int) -> tuple[float, float]:
    z = 2.5758293035489004
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


class TestDeterminism:
    def test_same_seed_byte_identical(self, tmp_path):
        config = SynthConfig(sites=2, days=3, seed=1)
        a = generate_dataset(config)
        b = generate_dataset(config)
        write_dataset(a, tmp_path / "a", emit_files=True)
        write_dataset(b, tmp_path / "b", emit_files=True)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_different_seed_differs(self):
        a = generate_dataset(SynthConfig(sites=2, days=3, seed=1))
        b = generate_dataset(SynthConfig(sites=2, days=3, seed=2))
        assert write_md_json(a.truth_detections) != write_md_json(b.truth_detections)


class TestEmptyRegime:
    def test_empty_fraction_within_ci(self):
        config = SynthConfig(
            sites=6, days=10, seed=3, visit_rate_per_day=3.0,
            empty_trigger_fraction=0.96,
        )
        dataset = generate_dataset(config)
        total = dataset.planted_summary["total_images"]
        animal = dataset.planted_summary["animal_images"]
        assert total > 5000
        lo, hi = binomial_ci99(0.04, total)
        assert lo <= animal / total <= hi

    def test_zero_empty_fraction(self):
        dataset = generate_dataset(
            SynthConfig(sites=2, days=3, seed=4, empty_trigger_fraction=0.0)
        )
        assert dataset.planted_summary["total_images"] == dataset.planted_summary["animal_images"]

    def test_fraction_one_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(empty_trigger_fraction=1.0)


class TestPlantedStructure:
    def test_seven_frame_visits_group_to_single_events(self):
        config = SynthConfig(
            sites=4, days=6, seed=5, visit_rate_per_day=3.0,
            frames_per_visit=(7, 7), empty_trigger_fraction=0.5,
        )
        dataset = generate_dataset(config)
        assert dataset.visits, "expected planted visits"
        for visit in dataset.visits:
            assert len(visit.asset_ids) == 7
        by_id = {a.asset_id: a for a in dataset.assets}
        for visit in dataset.visits:
            times = sorted(by_id[a].captured_at for a in visit.asset_ids)
            assert times[-1] - times[0] <= timedelta(minutes=10)

    def test_planted_truth_closure(self, tmp_path):
        config = SynthConfig(sites=3, days=5, seed=6, visit_rate_per_day=2.5)
        dataset = generate_dataset(config)
        catalog = open_catalog(tmp_path / "cat")
        load_into_catalog(dataset, catalog)
        observations = collect_observations(catalog, 0.2)
        events = group_events(observations, GroupingConfig(gap_minutes=config.gap_minutes))
        summary = dataset_summary(events)
        assert summary.event_count == dataset.planted_summary["event_count"]
        assert summary.individual_total == dataset.planted_summary["individual_total"]

    def test_visits_separated_beyond_gap(self):
        dataset = generate_dataset(
            SynthConfig(sites=2, days=8, seed=7, visit_rate_per_day=6.0)
        )
        by_id = {a.asset_id: a for a in dataset.assets}
        per_site = {}
        for visit in dataset.visits:
            times = [by_id[a].captured_at for a in visit.asset_ids]
            per_site.setdefault(visit.site_id, []).append((min(times), max(times)))
        for spans in per_site.values():
            spans.sort()
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert s2 - e1 > timedelta(minutes=10)

    def test_frame_spacing_in_declared_range(self):
        dataset = generate_dataset(SynthConfig(sites=2, days=4, seed=8))
        by_id = {a.asset_id: a for a in dataset.assets}
        for visit in dataset.visits:
            times = sorted(by_id[a].captured_at for a in visit.asset_ids)
            for t1, t2 in zip(times, times[1:]):
                assert timedelta(seconds=10) <= t2 - t1 <= timedelta(seconds=120)

    def test_labels_cover_every_animal_frame(self):
        dataset = generate_dataset(SynthConfig(sites=2, days=4, seed=9))
        labeled = {lb.asset_id for lb in dataset.truth_labels}
        planted = {a for v in dataset.visits for a in v.asset_ids}
        assert labeled == planted


class TestPerturbDetector:
    def _truth(self, seed=10):
        return generate_dataset(
            SynthConfig(sites=3, days=6, seed=seed, visit_rate_per_day=3.0,
                        empty_trigger_fraction=0.5)
        ).truth_detections

    def test_zero_noise_identity(self):
        truth = self._truth()
        assert perturb_detector(truth, DetectorNoise(), seed=1).images == truth.images

    def test_miss_rate_one_empties_all(self):
        noisy = perturb_detector(self._truth(), DetectorNoise(miss_rate=1.0), seed=1)
        assert all(e.detections == [] for e in noisy.images)

    def test_deterministic_under_seed(self):
        truth = self._truth()
        noise = DetectorNoise(miss_rate=0.3, false_positive_rate=0.1, count_jitter=0.2)
        assert perturb_detector(truth, noise, 5) == perturb_detector(truth, noise, 5)

    def test_miss_rate_drop_count_within_ci(self):
        # Enough boxes for a tight binomial check.
        truth = generate_dataset(
            SynthConfig(sites=8, days=20, seed=11, visit_rate_per_day=4.0,
                        empty_trigger_fraction=0.0, group_size_range=(2, 4))
        ).truth_detections
        total = sum(len(e.detections or []) for e in truth.images)
        assert total > 3000
        noisy = perturb_detector(truth, DetectorNoise(miss_rate=0.1), seed=12)
        kept = sum(len(e.detections or []) for e in noisy.images)
        dropped = total - kept
        lo, hi = binomial_ci99(0.1, total)
        assert lo <= dropped / total <= hi

    def test_false_positives_added_to_empty_images(self):
        truth = self._truth()
        noisy = perturb_detector(
            truth, DetectorNoise(false_positive_rate=1.0), seed=13
        )
        assert all(len(e.detections) >= 1 for e in noisy.images)

    def test_invalid_rates_rejected(self):
        with pytest.raises(ValueError):
            DetectorNoise(miss_rate=1.5)


class TestEmission:
    def test_tree_is_ingestable_and_truth_parses(self, tmp_path):
        dataset = generate_dataset(SynthConfig(sites=2, days=3, seed=14))
        paths = write_dataset(dataset, tmp_path / "corpus", emit_files=True)
        batch = parse_md_json(paths["detections"].read_bytes())
        assert len(batch.images) == len(dataset.assets)
        result = import_timelapse_csv(paths["labels"])
        assert len(result.records) == len(dataset.truth_labels)
        assert result.issues == []
        summary = json.loads(paths["summary"].read_text())
        assert summary == dataset.planted_summary
        emitted = list((tmp_path / "corpus" / "cards").rglob("*.jpg"))
        assert len(emitted) == len(dataset.assets)

    def test_emitted_sizes_match_asset_metadata(self, tmp_path):
        dataset = generate_dataset(SynthConfig(sites=2, days=2, seed=15))
        write_dataset(dataset, tmp_path / "corpus", emit_files=True)
        by_rel = {
            f"{a.site_id}/{a.relative_path}": a.size_bytes for a in dataset.assets
        }
        for path in (tmp_path / "corpus" / "cards").rglob("*.jpg"):
            rel = path.relative_to(tmp_path / "corpus" / "cards").as_posix()
            assert path.stat().st_size == by_rel[rel]

    def test_metadata_only_writes_no_media(self, tmp_path):
        dataset = generate_dataset(SynthConfig(sites=2, days=2, seed=16))
        write_dataset(dataset, tmp_path / "corpus", emit_files=False)
        assert list((tmp_path / "corpus" / "cards").rglob("*.jpg")) == []

    def test_weighted_species_pool_respected(self):
        pool = (SpeciesSpec("deer", 1.0),)
        dataset = generate_dataset(SynthConfig(sites=2, days=5, seed=17, species_pool=pool))
        assert {lb.species for lb in dataset.truth_labels} == {"deer"}
