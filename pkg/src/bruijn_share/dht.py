"""Key-value storage at zone owners and routing of put/get bundles."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any

from bruijn_share.idspace import Label, RingParams, Zone, label_from_key, zone_contains
from bruijn_share.overlay import NodeState, Route, next_hop, start_route

logger = logging.getLogger(__name__)


class EmptyQueryError(ValueError):
    """Raised when a lookup is asked for no keys at all."""


@dataclass
class KeyRecord:
    """One holder's locator for a file, stored under a keyword or content key."""

    key: str
    file_hash: str
    file_size: int
    file_name: str
    holder: str
    last_refresh: float = 0.0

    def value(self) -> dict[str, Any]:
        return {
            "fileHash": self.file_hash,
            "fileSize": self.file_size,
            "fileName": self.file_name,
            "holder": self.holder,
        }

    def to_wire(self) -> dict[str, Any]:
        return {"key": self.key, "value": self.value(), "lastRefresh": self.last_refresh}

    @classmethod
    def from_value(cls, key: str, value: dict[str, Any], now: float) -> KeyRecord:
        return cls(
            key=key,
            file_hash=value["fileHash"],
            file_size=int(value["fileSize"]),
            file_name=value["fileName"],
            holder=value["holder"],
            last_refresh=now,
        )

    @classmethod
    def from_wire(cls, data: dict[str, Any]) -> KeyRecord:
        return cls.from_value(data["key"], data["value"], float(data["lastRefresh"]))


class KeyStore:
    """Records held by one zone owner, unique per (key, holder)."""

    def __init__(self) -> None:
        self._records: dict[str, dict[str, KeyRecord]] = {}

    def __len__(self) -> int:
        return sum(len(holders) for holders in self._records.values())

    def put(self, record: KeyRecord) -> None:
        self._records.setdefault(record.key, {})[record.holder] = record

    def get(self, key: str) -> list[KeyRecord]:
        holders = self._records.get(key, {})
        return [holders[h] for h in sorted(holders)]

    def all_records(self) -> list[KeyRecord]:
        return [r for key in sorted(self._records) for r in self.get(key)]

    def extract(self, zone: Zone, ring: RingParams) -> list[KeyRecord]:
        """Remove and return every record whose routing label falls in ``zone``."""
        moved: list[KeyRecord] = []
        for key in sorted(self._records):
            if zone_contains(zone, label_from_key(key, ring), ring):
                moved.extend(self.get(key))
                del self._records[key]
        return moved

    def absorb(self, records: list[KeyRecord]) -> None:
        """Store transferred records verbatim, keeping the fresher copy on conflict."""
        for record in records:
            current = self._records.get(record.key, {}).get(record.holder)
            if current is None or current.last_refresh <= record.last_refresh:
                self.put(record)

    def expire(self, now: float, ttl: float) -> int:
        dropped = 0
        for key in list(self._records):
            holders = self._records[key]
            for holder in [h for h, r in holders.items() if now - r.last_refresh > ttl]:
                del holders[holder]
                dropped += 1
            if not holders:
                del self._records[key]
        if dropped:
            logger.debug("expired %d key records", dropped)
        return dropped


# -- bundles -------------------------------------------------------------------


@dataclass
class BundleEntry:
    """A single key travelling inside a PUT/GET/MPUT/MGET message."""

    key: str
    route: Route
    value: dict[str, Any] | None = None
    stalls: int = 0

    def to_wire(self, ring: RingParams) -> dict[str, Any]:
        data: dict[str, Any] = {"key": self.key, "route": self.route.to_wire(ring)}
        if self.value is not None:
            data["value"] = self.value
        if self.stalls:
            data["stalls"] = self.stalls
        return data

    @classmethod
    def from_wire(cls, data: dict[str, Any], ring: RingParams) -> BundleEntry:
        return cls(
            key=data["key"],
            route=Route.from_wire(data["route"], ring),
            value=data.get("value"),
            stalls=int(data.get("stalls", 0)),
        )


@dataclass
class BundleSplit:
    local: list[BundleEntry] = field(default_factory=list)
    forward: dict[str, list[BundleEntry]] = field(default_factory=lambda: defaultdict(list))
    stalled: list[BundleEntry] = field(default_factory=list)


def key_label(key: str, ring: RingParams) -> Label:
    return label_from_key(key, ring)


def new_entries(state: NodeState, keys: list[str], values: list[dict[str, Any]] | None = None) -> list[BundleEntry]:
    if not keys:
        raise EmptyQueryError("no keys to look up")
    entries = []
    for i, key in enumerate(keys):
        route = start_route(state, key_label(key, state.ring))
        entries.append(BundleEntry(key=key, route=route, value=values[i] if values else None))
    return entries


def split_bundle(state: NodeState, entries: list[BundleEntry]) -> BundleSplit:
    """Group entries by their next hop from this node."""
    split = BundleSplit()
    for entry in entries:
        decision = next_hop(state, entry.route)
        entry.route = decision.route
        if decision.deliver:
            split.local.append(entry)
        elif decision.address is not None:
            split.forward[decision.address].append(entry)
        else:
            split.stalled.append(entry)
    return split
