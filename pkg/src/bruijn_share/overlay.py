"""Per-node overlay state and the pure steps of join, leave, zone update and failure handling.

Functions here mutate a NodeState and return what must be sent; the node
event loop in node.py does the sending.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from bruijn_share.idspace import (
    Label,
    RingParams,
    Zone,
    are_adjacent,
    format_zone,
    has_edge,
    label_from_key,
    merge_zones,
    parse_zone,
    random_label_in,
    routing_path,
    sha1_hex,
    split_zone,
    zone_contains,
    zone_covers,
    zone_size,
    zones_overlap,
)

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    BOOTING = "booting"
    JOINING = "joining"
    ACTIVE = "active"
    LEAVING = "leaving"
    STOPPED = "stopped"


class Refusal(str, Enum):
    BUSY = "busy"
    ZONE_TOO_SMALL = "zone-too-small"
    LEAVING = "leaving"
    PROTOCOL_ERROR = "protocol-error"


@dataclass
class NeighborRecord:
    address: str
    node_id: Label
    zone: Zone
    last_seen: float = 0.0

    def to_wire(self, ring: RingParams) -> dict[str, Any]:
        return {"address": self.address, "id": ring.render(self.node_id), "zone": format_zone(self.zone, ring)}

    @classmethod
    def from_wire(cls, data: dict[str, Any], ring: RingParams, now: float) -> NeighborRecord:
        return cls(
            address=data["address"],
            node_id=ring.parse(data["id"]),
            zone=parse_zone(data["zone"], ring),
            last_seen=now,
        )


@dataclass
class NodeState:
    """Everything a node keeps about itself and its links."""

    ring: RingParams
    address: str
    node_id: Label = 0
    zone: Zone | None = None
    outgoing: dict[str, NeighborRecord] = field(default_factory=dict)
    incoming: dict[str, NeighborRecord] = field(default_factory=dict)
    phase: Phase = Phase.BOOTING
    join_lock_until: float | None = None
    join_lock_holder: str | None = None
    tombstones: dict[str, float] = field(default_factory=dict)

    def neighbor_addresses(self) -> list[str]:
        return sorted(set(self.outgoing) | set(self.incoming))

    def records(self) -> dict[str, NeighborRecord]:
        merged = dict(self.incoming)
        merged.update(self.outgoing)
        return merged

    def outgoing_owner(self, label: Label) -> NeighborRecord | None:
        for record in self.outgoing.values():
            if zone_contains(record.zone, label, self.ring):
                return record
        return None

    def owns(self, label: Label) -> bool:
        return self.zone is not None and zone_contains(self.zone, label, self.ring)

    def describe(self) -> dict[str, Any]:
        return {
            "nodeId": self.ring.render(self.node_id),
            "address": self.address,
            "zone": format_zone(self.zone, self.ring) if self.zone else None,
            "outgoing": [r.to_wire(self.ring) for _, r in sorted(self.outgoing.items())],
            "incoming": [r.to_wire(self.ring) for _, r in sorted(self.incoming.items())],
        }


# -- routing -------------------------------------------------------------------


@dataclass
class Route:
    """Progress of a message along a substring-routing path."""

    target: Label
    src: Label
    step: int = 0

    def to_wire(self, ring: RingParams) -> dict[str, Any]:
        return {"target": ring.render(self.target), "src": ring.render(self.src), "step": self.step}

    @classmethod
    def from_wire(cls, data: dict[str, Any], ring: RingParams) -> Route:
        return cls(target=ring.parse(data["target"]), src=ring.parse(data["src"]), step=int(data["step"]))


@dataclass
class HopDecision:
    deliver: bool = False
    address: str | None = None
    route: Route | None = None

    @property
    def stalled(self) -> bool:
        return not self.deliver and self.address is None


def start_route(state: NodeState, target: Label) -> Route:
    return Route(target=target, src=state.node_id, step=0)


def next_hop(state: NodeState, route: Route) -> HopDecision:
    """Deliver locally or pick the outgoing neighbor owning the next label off our zone."""
    ring = state.ring
    if state.owns(route.target):
        return HopDecision(deliver=True, route=route)
    path = routing_path(route.src, route.target, ring)
    if route.step >= len(path) or not state.owns(path[route.step]):
        route = start_route(state, route.target)
        path = routing_path(route.src, route.target, ring)
    decision = _advance(state, route, path)
    if decision.stalled and route.src != state.node_id:
        route = start_route(state, route.target)
        decision = _advance(state, route, routing_path(route.src, route.target, ring))
    return decision


def _advance(state: NodeState, route: Route, path: list[Label]) -> HopDecision:
    step = route.step
    while step + 1 < len(path) and state.owns(path[step + 1]):
        step += 1
    if step + 1 >= len(path):
        return HopDecision(deliver=True, route=Route(route.target, route.src, step))
    owner = state.outgoing_owner(path[step + 1])
    if owner is None:
        return HopDecision(route=Route(route.target, route.src, step))
    return HopDecision(address=owner.address, route=Route(route.target, route.src, step + 1))


# -- join ----------------------------------------------------------------------


@dataclass
class JoinReply:
    node_id: Label
    address: str
    zone: Zone
    outgoing: list[NeighborRecord]
    incoming: list[NeighborRecord]

    def to_wire(self, ring: RingParams) -> dict[str, Any]:
        return {
            "nodeId": ring.render(self.node_id),
            "address": self.address,
            "zone": format_zone(self.zone, ring),
            "outgoing": [r.to_wire(ring) for r in self.outgoing],
            "incoming": [r.to_wire(ring) for r in self.incoming],
        }

    @classmethod
    def from_wire(cls, data: dict[str, Any], ring: RingParams, now: float) -> JoinReply:
        return cls(
            node_id=ring.parse(data["nodeId"]),
            address=data["address"],
            zone=parse_zone(data["zone"], ring),
            outgoing=[NeighborRecord.from_wire(r, ring, now) for r in data.get("outgoing", [])],
            incoming=[NeighborRecord.from_wire(r, ring, now) for r in data.get("incoming", [])],
        )


def choose_join_target(address: str, attempt: int, rng: random.Random, ring: RingParams) -> Label:
    """Hash of the external address on the first attempt, uniform random afterwards."""
    if attempt < 1:
        raise ValueError(f"attempt must be >= 1, got {attempt}")
    if attempt == 1:
        return label_from_key(sha1_hex(address), ring)
    return rng.randrange(ring.n)


def accept_join(state: NodeState, requester: str, now: float, lock_seconds: float) -> JoinReply | Refusal:
    if state.phase == Phase.LEAVING:
        return Refusal.LEAVING
    if state.phase != Phase.ACTIVE or (state.join_lock_until is not None and state.join_lock_until > now):
        return Refusal.BUSY
    if zone_size(state.zone, state.ring) < 2:
        return Refusal.ZONE_TOO_SMALL
    state.join_lock_until = now + lock_seconds
    state.join_lock_holder = requester
    return JoinReply(
        node_id=state.node_id,
        address=state.address,
        zone=state.zone,
        outgoing=list(state.outgoing.values()),
        incoming=list(state.incoming.values()),
    )


def complete_join(
    ring: RingParams, address: str, reply: JoinReply, rng: random.Random, now: float
) -> tuple[NodeState, list[str]]:
    """Take the half of the acceptor's zone not holding its id; return the new state and who to notify."""
    kept, given = split_zone(reply.zone, reply.node_id, ring)
    state = NodeState(ring=ring, address=address, node_id=random_label_in(given, rng, ring), zone=given)
    acceptor = NeighborRecord(reply.address, reply.node_id, kept, now)
    candidates: dict[str, NeighborRecord] = {}
    for record in [*reply.outgoing, *reply.incoming, acceptor]:
        if record.address != address:
            record.last_seen = now
            candidates[record.address] = record
    _rebuild_links(state, candidates.values())
    state.phase = Phase.ACTIVE
    logger.debug("joined with zone %s id %s", format_zone(given, ring), ring.render(state.node_id))
    return state, state.neighbor_addresses()


def finalize_split(state: NodeState, given: Zone, joiner: NeighborRecord, now: float) -> list[str] | None:
    """Shrink to the kept half after a split confirm; None when the confirm is stale."""
    if state.zone is None or state.phase not in (Phase.ACTIVE, Phase.LEAVING):
        return None
    if state.join_lock_holder not in (None, joiner.address):
        return None
    if zone_size(state.zone, state.ring) < 2:
        return None
    kept, expected = split_zone(state.zone, state.node_id, state.ring)
    if expected != given:
        return None
    prior = state.neighbor_addresses()
    candidates = state.records()
    joiner.last_seen = now
    candidates[joiner.address] = joiner
    state.zone = kept
    _rebuild_links(state, candidates.values())
    state.join_lock_until = None
    state.join_lock_holder = None
    logger.debug("split: kept %s gave %s", format_zone(kept, state.ring), format_zone(given, state.ring))
    return [a for a in prior if a != joiner.address]


def expire_join_lock(state: NodeState, now: float) -> bool:
    """Clear a lock whose confirm never came; the zone is left untouched."""
    if state.join_lock_until is not None and state.join_lock_until <= now:
        state.join_lock_until = None
        state.join_lock_holder = None
        return True
    return False


# -- leave ---------------------------------------------------------------------


@dataclass
class LeaveRequest:
    address: str
    node_id: Label
    zone: Zone
    outgoing: list[NeighborRecord]
    incoming: list[NeighborRecord]

    def to_wire(self, ring: RingParams) -> dict[str, Any]:
        return {
            "address": self.address,
            "nodeId": ring.render(self.node_id),
            "zone": format_zone(self.zone, ring),
            "outgoing": [r.to_wire(ring) for r in self.outgoing],
            "incoming": [r.to_wire(ring) for r in self.incoming],
        }

    @classmethod
    def from_wire(cls, data: dict[str, Any], ring: RingParams, now: float) -> LeaveRequest:
        return cls(
            address=data["address"],
            node_id=ring.parse(data["nodeId"]),
            zone=parse_zone(data["zone"], ring),
            outgoing=[NeighborRecord.from_wire(r, ring, now) for r in data.get("outgoing", [])],
            incoming=[NeighborRecord.from_wire(r, ring, now) for r in data.get("incoming", [])],
        )


def make_leave_request(state: NodeState) -> LeaveRequest:
    return LeaveRequest(
        address=state.address,
        node_id=state.node_id,
        zone=state.zone,
        outgoing=list(state.outgoing.values()),
        incoming=list(state.incoming.values()),
    )


def accept_leave(state: NodeState, request: LeaveRequest, now: float) -> list[str] | Refusal:
    """Merge a departing neighbor's zone and links; return every node to notify."""
    if state.phase == Phase.LEAVING:
        return Refusal.LEAVING
    if state.phase != Phase.ACTIVE or state.join_lock_holder is not None:
        return Refusal.BUSY
    if not are_adjacent(state.zone, request.zone, state.ring):
        return Refusal.PROTOCOL_ERROR
    candidates = {r.address: r for r in [*request.outgoing, *request.incoming]}
    candidates.update(state.records())
    candidates.pop(request.address, None)
    candidates.pop(state.address, None)
    notify = sorted(candidates)
    state.zone = merge_zones(state.zone, request.zone, state.ring)
    for record in candidates.values():
        record.last_seen = max(record.last_seen, now)
    _rebuild_links(state, candidates.values())
    state.tombstones[request.address] = now
    logger.debug("absorbed %s, zone now %s", request.address, format_zone(state.zone, state.ring))
    return notify


# -- zone updates, keep-alive, failure -----------------------------------------


def apply_zone_update(
    state: NodeState, address: str, node_id: Label, zone: Zone, now: float, tombstone_ttl: float = 300.0
) -> None:
    """Add, refresh or drop the link to ``address`` given its announced zone."""
    if address == state.address or state.zone is None:
        return
    buried = state.tombstones.get(address)
    if buried is not None:
        if now - buried < tombstone_ttl:
            return
        del state.tombstones[address]
    for table in (state.outgoing, state.incoming):
        for other, record in list(table.items()):
            if other != address and zones_overlap(record.zone, zone, state.ring):
                del table[other]
    record = NeighborRecord(address, node_id, zone, now)
    if has_edge(state.zone, zone, state.ring):
        state.outgoing[address] = record
    else:
        state.outgoing.pop(address, None)
    if has_edge(zone, state.zone, state.ring):
        state.incoming[address] = NeighborRecord(address, node_id, zone, now)
    else:
        state.incoming.pop(address, None)


def apply_departures(state: NodeState, addresses: list[str], now: float) -> None:
    for address in addresses:
        if address == state.address:
            continue
        state.outgoing.pop(address, None)
        state.incoming.pop(address, None)
        state.tombstones[address] = now


def touch(state: NodeState, address: str, now: float) -> bool:
    """Refresh lastSeen for a known neighbor; False when unknown."""
    known = False
    for table in (state.outgoing, state.incoming):
        record = table.get(address)
        if record is not None:
            record.last_seen = max(record.last_seen, now)
            known = True
    return known


def failure_sweep(state: NodeState, now: float, death_threshold: float) -> list[NeighborRecord]:
    """Drop neighbors silent for longer than ``death_threshold``; return them."""
    dead: dict[str, NeighborRecord] = {}
    for table in (state.outgoing, state.incoming):
        for address, record in list(table.items()):
            if now - record.last_seen > death_threshold:
                dead[address] = record
                del table[address]
    for address in dead:
        state.tombstones[address] = now
    if dead:
        logger.info("declared dead: %s", ", ".join(sorted(dead)))
    return [dead[a] for a in sorted(dead)]


def adopt_orphan(state: NodeState, orphan: Zone) -> bool:
    """Extend our zone over a dead neighbor's zone; True when the zone changed."""
    if state.zone is None or zone_covers(state.zone, orphan, state.ring):
        return False
    if not are_adjacent(state.zone, orphan, state.ring):
        return False
    state.zone = merge_zones(state.zone, orphan, state.ring)
    _rebuild_links(state, list(state.records().values()))
    logger.info("took over orphan zone %s", format_zone(orphan, state.ring))
    return True


def prune_tombstones(state: NodeState, now: float, ttl: float) -> None:
    for address, buried in list(state.tombstones.items()):
        if now - buried >= ttl:
            del state.tombstones[address]


def _rebuild_links(state: NodeState, candidates) -> None:
    outgoing: dict[str, NeighborRecord] = {}
    incoming: dict[str, NeighborRecord] = {}
    for record in candidates:
        if record.address == state.address:
            continue
        if has_edge(state.zone, record.zone, state.ring):
            outgoing[record.address] = record
        if has_edge(record.zone, state.zone, state.ring):
            incoming[record.address] = NeighborRecord(record.address, record.node_id, record.zone, record.last_seen)
    state.outgoing = outgoing
    state.incoming = incoming
