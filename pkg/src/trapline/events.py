"""Event grouping: the ten-minute rule, representatives, individual counts.

Gap (chain) semantics: an observation joins the running event when its
timestamp is within ``gap_minutes`` of the previous member, so a slow parade
of images chains into one event even if it spans more than the gap overall.
A Δt exactly equal to the gap joins.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Sequence

from .catalog import CATEGORY_ANIMAL, Catalog, Event, LabelRecord

REPRESENTATIVE_RULES = ("max_confidence", "earliest")
VALID_KEY_FIELDS = ("site_id", "species")


@dataclass(frozen=True)
class GroupingConfig:
    gap_minutes: float = 10.0
    key_fields: tuple[str, ...] = ("site_id",)
    representative_rule: str = "max_confidence"

    def __post_init__(self):
        if not self.gap_minutes > 0:
            raise ValueError(f"gap_minutes must be > 0, got {self.gap_minutes!r}")
        if "site_id" not in self.key_fields:
            raise ValueError("key_fields must include site_id")
        unknown = set(self.key_fields) - set(VALID_KEY_FIELDS)
        if unknown:
            raise ValueError(f"unknown key fields: {sorted(unknown)}")
        if self.representative_rule not in REPRESENTATIVE_RULES:
            raise ValueError(
                f"representative_rule must be one of {REPRESENTATIVE_RULES}"
            )


@dataclass(frozen=True)
class Observation:
    """Per-asset animal evidence: detector boxes and/or a human label."""

    asset_id: str
    site_id: str
    captured_at: datetime
    species: str | None
    max_animal_confidence: float
    animal_count: int


def collect_observations(catalog: Catalog, threshold: float) -> list[Observation]:
    """One observation per asset with an animal detection ≥ threshold or a label.

    Human labels trump the detector: a labeled asset with zero boxes is still
    an observation (the detector missed), and a label's count wins over the
    box count.
    """
    labels = label_index(catalog.read_labels())
    max_conf: dict[str, float] = defaultdict(float)
    box_count: dict[str, int] = defaultdict(int)
    for det in catalog.read_detections():
        if det.category != CATEGORY_ANIMAL:
            continue
        max_conf[det.asset_id] = max(max_conf[det.asset_id], det.confidence)
        if det.confidence >= threshold:
            box_count[det.asset_id] += 1
    observations = []
    for asset in catalog.read_assets():
        label = labels.get(asset.asset_id)
        detected = box_count.get(asset.asset_id, 0) > 0
        if not detected and label is None:
            continue
        observations.append(
            Observation(
                asset_id=asset.asset_id,
                site_id=asset.site_id,
                captured_at=asset.captured_at,
                species=(label.species or None) if label else None,
                max_animal_confidence=max_conf.get(asset.asset_id, 0.0),
                animal_count=label.count if label else box_count.get(asset.asset_id, 0),
            )
        )
    observations.sort(key=_obs_key)
    return observations


def label_observations(catalog: Catalog) -> list[Observation]:
    """Observations from human labels only — the truth side for evaluation."""
    labels = label_index(catalog.read_labels())
    observations = []
    for asset in catalog.read_assets():
        label = labels.get(asset.asset_id)
        if label is None:
            continue
        observations.append(
            Observation(
                asset_id=asset.asset_id,
                site_id=asset.site_id,
                captured_at=asset.captured_at,
                species=label.species or None,
                max_animal_confidence=0.0,
                animal_count=label.count,
            )
        )
    observations.sort(key=_obs_key)
    return observations


def label_index(labels: Iterable[LabelRecord]) -> dict[str, LabelRecord]:
    """Latest label wins: journal order is append order."""
    index: dict[str, LabelRecord] = {}
    for label in labels:
        index[label.asset_id] = label
    return index


def _obs_key(obs: Observation):
    return (obs.site_id, obs.captured_at, obs.asset_id)


def _group_key(obs: Observation, config: GroupingConfig):
    key = [obs.site_id]
    if "species" in config.key_fields:
        key.append(obs.species)
    return tuple(key)


def _event_id(site_id: str, members: Sequence[Observation]) -> str:
    seed = "|".join([site_id, members[0].captured_at.isoformat()]
                    + [m.asset_id for m in members])
    return "evt-" + hashlib.sha1(seed.encode()).hexdigest()[:12]


def _build_event(members: list[Observation], config: GroupingConfig) -> Event:
    members = sorted(members, key=lambda m: (m.captured_at, m.asset_id))
    site_id = members[0].site_id
    species_values = {m.species for m in members}
    species = species_values.pop() if len(species_values) == 1 else None
    return Event(
        event_id=_event_id(site_id, members),
        site_id=site_id,
        member_asset_ids=tuple(m.asset_id for m in members),
        start_at=members[0].captured_at,
        end_at=members[-1].captured_at,
        representative_asset_id=_representative(members, config.representative_rule),
        species=species,
        individual_count=max((m.animal_count for m in members), default=0),
    )


def _representative(members: list[Observation], rule: str) -> str:
    if rule == "earliest":
        return members[0].asset_id
    best = min(
        members,
        key=lambda m: (-m.max_animal_confidence, m.captured_at, m.asset_id),
    )
    return best.asset_id


def _finalize(groups: Iterable[list[Observation]], config: GroupingConfig) -> list[Event]:
    events = [_build_event(g, config) for g in groups if g]
    events.sort(key=lambda e: (e.site_id, e.start_at, e.event_id))
    return events


def group_events(
    observations: Sequence[Observation], config: GroupingConfig | None = None
) -> list[Event]:
    """Chain-scan each key group in time order; a partition of the input."""
    config = config or GroupingConfig()
    gap = timedelta(minutes=config.gap_minutes)
    by_key: dict[tuple, list[Observation]] = defaultdict(list)
    for obs in observations:
        if obs.captured_at is None:
            raise ValueError(f"observation {obs.asset_id} missing captured_at")
        by_key[_group_key(obs, config)].append(obs)
    runs: list[list[Observation]] = []
    for key in sorted(by_key, key=lambda k: tuple(str(v) for v in k)):
        ordered = sorted(by_key[key], key=lambda m: (m.captured_at, m.asset_id))
        current = [ordered[0]]
        for obs in ordered[1:]:
            if obs.captured_at - current[-1].captured_at <= gap:
                current.append(obs)
            else:
                runs.append(current)
                current = [obs]
        runs.append(current)
    return _finalize(runs, config)


def oracle_group_events(
    observations: Sequence[Observation], config: GroupingConfig | None = None
) -> list[Event]:
    """O(n²) reference: connected components of the consecutive-within-gap
    relation, found by BFS over an explicit adjacency matrix. Must equal
    ``group_events`` exactly on every input."""
    config = config or GroupingConfig()
    gap = timedelta(minutes=config.gap_minutes)
    by_key: dict[tuple, list[Observation]] = defaultdict(list)
    for obs in observations:
        if obs.captured_at is None:
            raise ValueError(f"observation {obs.asset_id} missing captured_at")
        by_key[_group_key(obs, config)].append(obs)
    components: list[list[Observation]] = []
    for key in sorted(by_key, key=lambda k: tuple(str(v) for v in k)):
        ordered = sorted(by_key[key], key=lambda m: (m.captured_at, m.asset_id))
        n = len(ordered)
        adjacent = [
            [
                abs(i - j) == 1
                and abs(
                    (ordered[i].captured_at - ordered[j].captured_at).total_seconds()
                )
                <= gap.total_seconds()
                for j in range(n)
            ]
            for i in range(n)
        ]
        visited = [False] * n
        for start in range(n):
            if visited[start]:
                continue
            frontier = [start]
            visited[start] = True
            component = []
            while frontier:
                i = frontier.pop()
                component.append(ordered[i])
                for j in range(n):
                    if adjacent[i][j] and not visited[j]:
                        visited[j] = True
                        frontier.append(j)
            components.append(component)
    return _finalize(components, config)


def select_representative(
    event: Event, observations: Sequence[Observation], rule: str = "max_confidence"
) -> str:
    if rule not in REPRESENTATIVE_RULES:
        raise ValueError(f"unknown representative rule {rule!r}")
    members = _members_of(event, observations)
    return _representative(members, rule)


def count_individuals(event: Event, observations: Sequence[Observation]) -> int:
    """Max over member counts: persistence across frames never inflates the
    total, a larger simultaneous group raises it."""
    members = _members_of(event, observations)
    return max((m.animal_count for m in members), default=0)


def _members_of(event: Event, observations: Sequence[Observation]) -> list[Observation]:
    by_id = {o.asset_id: o for o in observations}
    members = [by_id[a] for a in event.member_asset_ids if a in by_id]
    if not members:
        raise ValueError(f"event {event.event_id} has no members among observations")
    return sorted(members, key=lambda m: (m.captured_at, m.asset_id))


@dataclass
class DatasetSummary:
    event_count: int
    individual_total: int
    per_species: dict[str, dict[str, int]]


def dataset_summary(events: Sequence[Event]) -> DatasetSummary:
    per_species: dict[str, dict[str, int]] = {}
    total = 0
    for event in events:
        species = event.species or "unlabeled"
        bucket = per_species.setdefault(species, {"event_count": 0, "individual_total": 0})
        bucket["event_count"] += 1
        bucket["individual_total"] += event.individual_count
        total += event.individual_count
    return DatasetSummary(
        event_count=len(events),
        individual_total=total,
        per_species=dict(sorted(per_species.items())),
    )
