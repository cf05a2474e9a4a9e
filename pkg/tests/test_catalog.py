from __future__ import annotations

from datetime import datetime, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapline.catalog import (
    CatalogLockedError,
    DuplicateKeyError,
    LabelRecord,
    RecordValidationError,
    TransferRecord,
    UnsupportedVersionError,
    open_catalog,
    read_kv,
    write_kv,
)

from conftest import hex_id, make_asset, make_detection


class TestOpenCatalog:
    def test_fresh_directory_creates_five_empty_journals(self, tmp_path):
        cat = open_catalog(tmp_path / "cat")
        journals = sorted(p.name for p in (tmp_path / "cat").glob("*.jsonl"))
        assert journals == [
            "assets.jsonl",
            "detections.jsonl",
            "events.jsonl",
            "labels.jsonl",
            "transfers.jsonl",
        ]
        meta = read_kv(tmp_path / "cat" / "catalog.meta")
        assert meta["format_version"] == "1"
        assert all(cat.count(t) == 0 for t in cat.tables)

    def test_reopen_reports_existing_records(self, tmp_path):
        cat = open_catalog(tmp_path / "cat")
        cat.append_records("assets", [make_asset(f"a{i}") for i in range(3)])
        again = open_catalog(tmp_path / "cat")
        assert again.count("assets") == 3

    def test_unsupported_version_rejected(self, tmp_path):
        root = tmp_path / "cat"
        root.mkdir()
        write_kv(root / "catalog.meta", {"format_version": "99", "created_at": "x"})
        with pytest.raises(UnsupportedVersionError):
            open_catalog(root)

    def test_open_does_not_modify_existing_catalog(self, tmp_path):
        cat = open_catalog(tmp_path / "cat")
        cat.append_records("assets", [make_asset("a")])
        before = {p.name: p.read_bytes() for p in (tmp_path / "cat").iterdir()}
        open_catalog(tmp_path / "cat")
        after = {p.name: p.read_bytes() for p in (tmp_path / "cat").iterdir()}
        assert before == after


class TestAppend:
    def test_append_two_valid_assets(self, catalog):
        assert catalog.append_records("assets", [make_asset("a"), make_asset("b")]) == 2
        assert catalog.count("assets") == 2

    def test_zero_size_rejected_with_index(self, catalog):
        bad = make_asset("a", size_bytes=0)
        with pytest.raises(RecordValidationError) as err:
            catalog.append_records("assets", [bad])
        assert err.value.index == 0
        assert "size_bytes" in str(err.value)

    def test_duplicate_asset_names_checksum(self, catalog):
        asset = make_asset("a")
        catalog.append_records("assets", [asset])
        with pytest.raises(DuplicateKeyError) as err:
            catalog.append_records("assets", [asset])
        assert asset.checksum in str(err.value)

    def test_duplicate_within_one_batch_rejected(self, catalog):
        asset = make_asset("a")
        with pytest.raises(DuplicateKeyError):
            catalog.append_records("assets", [asset, asset])

    def test_atomic_per_call_nothing_written_on_validation_error(self, catalog):
        path = catalog.table_path("assets")
        before = path.read_bytes()
        with pytest.raises(RecordValidationError):
            catalog.append_records(
                "assets", [make_asset("ok"), make_asset("bad", size_bytes=-5)]
            )
        assert path.read_bytes() == before

    def test_append_only_byte_prefix_preserved(self, catalog):
        catalog.append_records("assets", [make_asset("a")])
        before = catalog.table_path("assets").read_bytes()
        catalog.append_records("assets", [make_asset("b")])
        after = catalog.table_path("assets").read_bytes()
        assert after.startswith(before)

    def test_detection_clamping_within_epsilon(self, catalog):
        catalog.append_records("assets", [make_asset("a")])
        det = make_detection("a", confidence=1.0 + 5e-7, bbox=(0.0, 0.0, 1.0 + 5e-7, 0.5))
        catalog.append_records("detections", [det])
        stored = catalog.read_detections()[0]
        assert stored.confidence == 1.0
        assert stored.bbox[2] <= 1.0

    def test_detection_beyond_epsilon_rejected(self, catalog):
        det = make_detection("a", confidence=1.1)
        with pytest.raises(RecordValidationError):
            catalog.append_records("detections", [det])

    def test_bbox_overflow_beyond_epsilon_rejected(self, catalog):
        det = make_detection("a", bbox=(0.8, 0.1, 0.3, 0.2))
        with pytest.raises(RecordValidationError):
            catalog.append_records("detections", [det])

    def test_label_species_required_unless_unknown(self, catalog):
        bad = LabelRecord(
            asset_id=hex_id("a"), species="", count=1, annotator="x",
            labeled_at=datetime(2024, 5, 3, 8, 0, 0),
        )
        with pytest.raises(RecordValidationError):
            catalog.append_records("labels", [bad])
        ok = LabelRecord(
            asset_id=hex_id("a"), species="", count=0, annotator="x",
            labeled_at=datetime(2024, 5, 3, 8, 0, 0), flags=frozenset({"unknown"}),
        )
        assert catalog.append_records("labels", [ok]) == 1

    def test_writer_lock_fails_fast_on_contention(self, catalog):
        (catalog.root / "catalog.lock").touch()
        with pytest.raises(CatalogLockedError):
            catalog.append_records("assets", [make_asset("a")])
        (catalog.root / "catalog.lock").unlink()
        catalog.append_records("assets", [make_asset("a")])


class TestQuery:
    def test_empty_catalog_returns_empty(self, catalog):
        assert catalog.query_assets() == []
        assert catalog.query_assets(site_id="S01") == []

    def test_site_filter_in_time_order(self, catalog):
        t = datetime(2024, 5, 3, 10, 0, 0)
        a1 = make_asset("a1", site_id="A", captured_at=t + timedelta(minutes=5))
        a2 = make_asset("a2", site_id="A", captured_at=t)
        b1 = make_asset("b1", site_id="B", captured_at=t)
        catalog.append_records("assets", [a1, a2, b1])
        result = catalog.query_assets(site_id="A")
        assert [a.asset_id for a in result] == [a2.asset_id, a1.asset_id]

    def test_time_range_covering_nothing(self, catalog):
        catalog.append_records("assets", [make_asset("a")])
        lo = datetime(1999, 1, 1)
        hi = datetime(1999, 12, 31)
        assert catalog.query_assets(time_range=(lo, hi)) == []

    def test_kind_filter(self, catalog):
        catalog.append_records(
            "assets", [make_asset("v", kind="video"), make_asset("i", kind="image")]
        )
        assert [a.kind for a in catalog.query_assets(kind="video")] == ["video"]


class TestIntegrity:
    def test_consistent_catalog_reports_clean(self, catalog):
        catalog.append_records("assets", [make_asset("a")])
        catalog.append_records("detections", [make_detection("a")])
        report = catalog.integrity_check()
        assert report.is_clean()

    def test_orphan_detection_reported(self, catalog):
        catalog.append_records("detections", [make_detection("ghost")])
        report = catalog.integrity_check()
        assert len(report.orphans) == 1
        assert report.orphans[0][0] == "detections"

    def test_truncated_trailing_line_skipped_not_misparsed(self, catalog):
        catalog.append_records("assets", [make_asset("a"), make_asset("b")])
        path = catalog.table_path("assets")
        data = path.read_bytes()
        # Chop the last record mid-way, simulating a torn write.
        path.write_bytes(data[: len(data) - 40])
        assert catalog.count("assets") == 1
        report = catalog.integrity_check()
        assert len(report.malformed_lines) == 1
        assert report.malformed_lines[0][0] == "assets"

    def test_survivors_after_truncation_parse_intact(self, catalog):
        a = make_asset("a")
        catalog.append_records("assets", [a, make_asset("b")])
        path = catalog.table_path("assets")
        path.write_bytes(path.read_bytes()[:-40])
        assert catalog.read_assets() == [a]


class TestRoundTrip:
    @settings(max_examples=60, deadline=None)
    @given(
        tags=st.lists(st.integers(0, 10**6), min_size=1, max_size=8, unique=True),
        sites=st.lists(st.sampled_from(["S01", "S02", "S03"]), min_size=8, max_size=8),
        seconds=st.lists(st.integers(0, 86_399), min_size=8, max_size=8),
        sizes=st.lists(st.integers(1, 10**9), min_size=8, max_size=8),
    )
    def test_assets_round_trip(self, tmp_path_factory, tags, sites, seconds, sizes):
        cat = open_catalog(tmp_path_factory.mktemp("cat"))
        base = datetime(2024, 5, 3)
        records = [
            make_asset(
                f"t{tag}",
                site_id=sites[i],
                captured_at=base + timedelta(seconds=seconds[i]),
                size_bytes=sizes[i],
            )
            for i, tag in enumerate(tags)
        ]
        cat.append_records("assets", records)
        assert sorted(cat.read_assets(), key=lambda a: a.asset_id) == sorted(
            records, key=lambda a: a.asset_id
        )

    def test_idempotent_open_same_results(self, tmp_path):
        cat = open_catalog(tmp_path / "cat")
        records = [make_asset("a"), make_asset("b")]
        cat.append_records("assets", records)
        first = open_catalog(tmp_path / "cat").query_assets()
        second = open_catalog(tmp_path / "cat").query_assets()
        assert first == second

    def test_transfer_round_trip(self, catalog):
        rec = TransferRecord(
            transfer_id="tx-1",
            kind="remote_upload",
            payload_path="3May2024/S01",
            bytes=1234,
            started_at=datetime(2024, 5, 3, 22, 0, 0),
            finished_at=datetime(2024, 5, 3, 22, 5, 0),
            outcome="ok",
            attempts=1,
        )
        catalog.append_records("transfers", [rec])
        assert catalog.read_transfers() == [rec]


def test_kv_dialect_round_trip(tmp_path):
    path = tmp_path / "x.conf"
    write_kv(path, {"format_version": "1", "created_at": "2024-05-03T00:00:00"})
    assert read_kv(path) == {
        "format_version": "1",
        "created_at": "2024-05-03T00:00:00",
    }


def test_malformed_journal_line_mid_file_skipped(catalog):
    catalog.append_records("assets", [make_asset("a")])
    path = catalog.table_path("assets")
    good = path.read_bytes()
    path.write_bytes(b'{"broken": \n' + good)
    assert catalog.count("assets") == 1
    assert len(catalog.integrity_check().malformed_lines) == 1
