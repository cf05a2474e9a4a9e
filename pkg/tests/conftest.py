from __future__ import annotations

import hashlib
from datetime import datetime
from pathlib import Path

import pytest

from trapline.catalog import Detection, MediaAsset, open_catalog

DATA_DIR = Path(__file__).parent / "data"


def hex_id(tag: str) -> str:
    """Stable fake checksum for hand-built fixtures."""
    return hashlib.sha256(tag.encode()).hexdigest()


def make_asset(
    tag: str,
    site_id: str = "S01",
    session_id: str = "3May2024",
    captured_at: datetime | None = None,
    size_bytes: int = 1024,
    kind: str = "image",
    relative_path: str | None = None,
    temperature_c: int | None = None,
) -> MediaAsset:
    checksum = hex_id(tag)
    return MediaAsset(
        asset_id=checksum,
        site_id=site_id,
        session_id=session_id,
        relative_path=relative_path or f"{tag}.jpg",
        kind=kind,
        captured_at=captured_at or datetime(2024, 5, 3, 12, 0, 0),
        size_bytes=size_bytes,
        checksum=checksum,
        temperature_c=temperature_c,
    )


def make_detection(
    tag: str, confidence: float = 0.9, category: int = 1,
    bbox: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2),
) -> Detection:
    return Detection(
        asset_id=hex_id(tag), category=category, confidence=confidence, bbox=bbox
    )


@pytest.fixture
def catalog(tmp_path):
    return open_catalog(tmp_path / "catalog")
