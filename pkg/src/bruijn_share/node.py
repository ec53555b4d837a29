"""A single overlay node: one event handler fed by a transport's ordered mailbox.

The same Node runs on the simulated network and on asyncio sockets; it only
needs ``now``, ``send``, ``call_later``, ``spawn`` and ``stop`` from its
transport.
"""
from __future__ import annotations

import base64
import logging
import random
import uuid
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from bruijn_share.config import NodeConfig
from bruijn_share.db import Database
from bruijn_share.dht import BundleEntry, KeyRecord, KeyStore, new_entries, split_bundle
from bruijn_share.forum import (
    GossipQueue,
    ValidationError,
    annotation_to_post,
    chunk_hashes,
    chunk_ids,
    create_annotation,
    create_comment,
    create_post,
    missing_from,
    mismatched_chunks,
    pick_partner,
    store_records,
    validate_record,
    window_anchor,
)
from bruijn_share.idspace import (
    RingParams,
    ZoneTooSmallError,
    format_zone,
    full_zone,
    parse_zone,
    predecessor_label,
    successor_label,
    zone_covers,
    zones_overlap,
)
from bruijn_share.index import ChangeSet, FileMeta, LocalIndex, publish_entries, scan_shares
from bruijn_share.overlay import (
    JoinReply,
    LeaveRequest,
    NeighborRecord,
    NodeState,
    Phase,
    Refusal,
    Route,
    accept_join,
    accept_leave,
    adopt_orphan,
    apply_departures,
    apply_zone_update,
    choose_join_target,
    complete_join,
    expire_join_lock,
    failure_sweep,
    finalize_split,
    make_leave_request,
    next_hop,
    prune_tombstones,
    start_route,
    touch,
)
from bruijn_share.search import (
    CHUNK_SIZE,
    DownloadError,
    SearchSession,
    accept_result,
    cancel_search,
    download_destination,
    download_file,
    holders_from_values,
    rank_results,
    start_search,
    validate_file_hash,
)
from bruijn_share.wire import Envelope, MsgType

logger = logging.getLogger(__name__)

BUNDLES = frozenset({MsgType.PUT, MsgType.GET, MsgType.MPUT, MsgType.MGET})
_STORE_TYPES = frozenset({MsgType.PUT, MsgType.MPUT})

Reply = Callable[[Envelope], None]


class Transport(Protocol):
    address: str

    def now(self) -> float: ...
    def send(self, to: str, env: Envelope) -> None: ...
    def call_later(self, delay: float, callback: Callable[[], None]) -> Any: ...
    def spawn(self, coro) -> None: ...
    def stop(self) -> None: ...


@dataclass
class Lookup:
    """Outstanding multi-key get issued by this node."""

    search_id: str
    keys: list[str]
    issued_at: float
    values: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    replied_at: dict[str, float] = field(default_factory=dict)
    hops: dict[str, int] = field(default_factory=dict)
    failed: set[str] = field(default_factory=set)
    attempts: int = 1

    def outstanding(self) -> list[str]:
        return [k for k in self.keys if k not in self.replied_at and k not in self.failed]

    def status(self) -> dict[str, str]:
        return {k: "ok" if k in self.replied_at else "failed" if k in self.failed else "pending" for k in self.keys}


@dataclass
class _Reconcile:
    partner: str
    anchor: float
    token: str
    round: int = 1


class Node:
    def __init__(
        self,
        transport: Transport,
        rendezvous: str,
        *,
        ring: RingParams | None = None,
        config: NodeConfig | None = None,
        rng: random.Random | None = None,
        store: Database | None = None,
        index: LocalIndex | None = None,
        share_dirs: list[Path] | None = None,
        download_dir: Path | None = None,
        author: str = "anonymous",
        port: int | None = None,
    ) -> None:
        self.transport = transport
        self.rendezvous = rendezvous
        self.ring = ring or RingParams()
        self.cfg = config or NodeConfig()
        self.rng = rng or random.Random()
        self._store = store
        self.index = index
        self.share_dirs = share_dirs or []
        self.download_dir = download_dir
        self.author = author
        self.port = port
        self.state = NodeState(ring=self.ring, address=transport.address)
        self.keys = KeyStore()
        self.gossip = GossipQueue()
        self.shared: dict[str, FileMeta] = {}
        self.lookups: dict[str, Lookup] = {}
        self.session: SearchSession | None = None
        self.peers: list[str] = []
        self.join_attempt = 0
        self._join_timer = None
        self._leave_token = 0
        self._leave_which = 0
        self._leave_restarts = 0
        self._leave_timer = None
        self._late_puts: list[KeyRecord] = []
        self.pending_takeovers: dict[str, Any] = {}
        self._recon: _Reconcile | None = None
        self.activated_at: float | None = None
        self._handlers: dict[MsgType, Callable[[Envelope], None]] = {
            MsgType.RDV_PEERS: self._on_rdv_peers,
            MsgType.JOIN_REQ: self._on_routed,
            MsgType.LEAVE_REQ: self._on_routed,
            MsgType.TAKEOVER: self._on_routed,
            MsgType.JOIN_REPLY: self._on_join_reply,
            MsgType.JOIN_REFUSE: self._on_join_refuse,
            MsgType.SPLIT_CONFIRM: self._on_split_confirm,
            MsgType.KEY_TRANSFER: self._on_key_transfer,
            MsgType.LEAVE_ACCEPT: self._on_leave_accept,
            MsgType.LEAVE_REFUSE: self._on_leave_refuse,
            MsgType.ZONE_UPDATE: self._on_zone_update,
            MsgType.KEEP_ALIVE: self._on_keep_alive,
            MsgType.PUT: self._on_bundle,
            MsgType.GET: self._on_bundle,
            MsgType.MPUT: self._on_bundle,
            MsgType.MGET: self._on_bundle,
            MsgType.GET_REPLY: self._on_get_reply,
            MsgType.DELIVERY_FAILURE: self._on_delivery_failure,
            MsgType.GOSSIP: self._on_gossip,
            MsgType.RECON_START: self._on_recon_start,
            MsgType.RECON_HASHES: self._on_recon_hashes,
            MsgType.RECON_IDS: self._on_recon_ids,
            MsgType.RECON_FETCH: self._on_recon_fetch,
            MsgType.RECON_RECORDS: self._on_recon_records,
            MsgType.CHUNK_REQ: self._on_chunk_req,
        }

    # -- plumbing --------------------------------------------------------------

    @property
    def address(self) -> str:
        return self.state.address

    @property
    def phase(self) -> Phase:
        return self.state.phase

    @property
    def store(self) -> Database:
        if self._store is None:
            self._store = Database()
        return self._store

    def now(self) -> float:
        return self.transport.now()

    def _envelope(self, msg_type: MsgType, payload: dict[str, Any], search_id: str | None = None) -> Envelope:
        return Envelope(
            msg_type=msg_type,
            sender_address=self.address,
            payload=payload,
            sender_id=self.ring.render(self.state.node_id) if self.state.zone else None,
            search_id=search_id,
        )

    def _send(self, to: str, msg_type: MsgType, payload: dict[str, Any], search_id: str | None = None) -> None:
        self.transport.send(to, self._envelope(msg_type, payload, search_id))

    def _own_info(self) -> dict[str, Any]:
        return {
            "address": self.address,
            "nodeId": self.ring.render(self.state.node_id),
            "zone": format_zone(self.state.zone, self.ring),
        }

    def _every(self, interval: float, action: Callable[[], None], first: float | None = None) -> None:
        def tick() -> None:
            if self.phase == Phase.STOPPED:
                return
            if self.phase in (Phase.ACTIVE, Phase.LEAVING):
                action()
            self.transport.call_later(interval, tick)

        self.transport.call_later(interval if first is None else first, tick)

    def handle(self, env: Envelope) -> None:
        """Process one message from the mailbox."""
        if self.phase == Phase.STOPPED:
            return
        handler = self._handlers.get(env.msg_type)
        if handler is None:
            logger.warning("%s: no handler for %s", self.address, env.msg_type.value)
            return
        try:
            handler(env)
        except (KeyError, TypeError, ValueError) as exc:
            logger.warning("%s: dropping malformed %s from %s: %s",
                           self.address, env.msg_type.value, env.sender_address, exc)

    # -- bootstrap and join ----------------------------------------------------

    def start(self) -> None:
        self.state.phase = Phase.BOOTING
        self._request_peers()

    def _request_peers(self) -> None:
        payload = {"port": self.port} if self.port else {}
        self._send(self.rendezvous, MsgType.RDV_LIST, payload)
        self._join_timer = self.transport.call_later(self.cfg.join_timeout, self._bootstrap_timed_out)

    def _bootstrap_timed_out(self) -> None:
        if self.phase == Phase.BOOTING:
            logger.warning("%s: rendezvous %s did not answer, retrying", self.address, self.rendezvous)
            self._request_peers()

    def _on_rdv_peers(self, env: Envelope) -> None:
        if self.phase != Phase.BOOTING:
            return
        self._cancel(self._join_timer)
        external = env.payload.get("externalAddress") or self.address
        if external != self.address:
            self.state.address = external
            self.transport.address = external
        self.peers = [p for p in env.payload.get("peers", []) if p != self.address]
        if not self.peers:
            self.state.node_id = choose_join_target(self.address, 1, self.rng, self.ring)
            self.state.zone = full_zone(self.ring)
            logger.info("%s: first node, owning the whole ring", self.address)
            self._activated()
            return
        self.state.phase = Phase.JOINING
        self.join_attempt = 0
        self._send_join()

    def _send_join(self) -> None:
        self.join_attempt += 1
        target = choose_join_target(self.address, self.join_attempt, self.rng, self.ring)
        peer = self.rng.choice(self.peers)
        self._send(peer, MsgType.JOIN_REQ, {
            "requester": self.address,
            "target": self.ring.render(target),
            "attempt": self.join_attempt,
        })
        attempt = self.join_attempt
        self._cancel(self._join_timer)
        self._join_timer = self.transport.call_later(self.cfg.join_timeout, lambda: self._join_timed_out(attempt))

    def _join_timed_out(self, attempt: int) -> None:
        if self.phase == Phase.JOINING and attempt == self.join_attempt:
            logger.info("%s: join attempt %d timed out", self.address, attempt)
            self._send_join()

    def _on_join_refuse(self, env: Envelope) -> None:
        if self.phase != Phase.JOINING or env.payload.get("attempt") != self.join_attempt:
            return
        logger.debug("%s: join refused (%s)", self.address, env.payload.get("reason"))
        self._cancel(self._join_timer)
        attempt = self.join_attempt
        backoff = self.cfg.join_retry_backoff * (0.5 + self.rng.random())
        self._join_timer = self.transport.call_later(backoff, lambda: self._join_timed_out(attempt))

    def _on_join_reply(self, env: Envelope) -> None:
        if self.phase != Phase.JOINING or env.payload.get("attempt") != self.join_attempt:
            return
        now = self.now()
        reply = JoinReply.from_wire(env.payload, self.ring, now)
        try:
            state, notify = complete_join(self.ring, self.address, reply, self.rng, now)
        except ZoneTooSmallError:
            self._send_join()
            return
        self._cancel(self._join_timer)
        self.state = state
        self._send(reply.address, MsgType.SPLIT_CONFIRM, self._own_info())
        for address in notify:
            if address != reply.address:
                self._send(address, MsgType.ZONE_UPDATE, self._own_info())
        self._activated()

    def _activated(self) -> None:
        self.state.phase = Phase.ACTIVE
        self.activated_at = self.now()
        self._register()
        self.publish_all()
        logger.info("%s: active, zone %s", self.address, format_zone(self.state.zone, self.ring))
        if not self.cfg.maintenance:
            return
        cfg = self.cfg
        self._every(cfg.keep_alive_interval, self._keep_alive, first=self.rng.uniform(0, cfg.keep_alive_interval))
        self._every(cfg.failure_sweep_interval, self._failure_sweep)
        self._every(cfg.refresh_interval, self.publish_all)
        self._every(cfg.expiry_sweep_interval, self._expire)
        self._every(cfg.gossip_interval, self._gossip_tick, first=self.rng.uniform(0, cfg.gossip_interval))
        self._every(cfg.reconcile_interval, self.start_reconcile)
        self._every(cfg.rendezvous_refresh, self._register)
        if self.index is not None:
            self._every(cfg.rescan_interval, self.rescan)
        if self.peers:
            self.transport.call_later(cfg.reconcile_after_join, self.start_reconcile)

    def _register(self) -> None:
        payload = {"port": self.port} if self.port else {}
        self._send(self.rendezvous, MsgType.RDV_REGISTER, payload)

    # -- routed messages -------------------------------------------------------

    def _originate(self, msg_type: MsgType, target: int, payload: dict[str, Any]) -> None:
        route = start_route(self.state, target)
        self.handle(self._envelope(msg_type, {**payload, "route": route.to_wire(self.ring)}))

    def _on_routed(self, env: Envelope) -> None:
        if env.msg_type == MsgType.JOIN_REQ and self.phase not in (Phase.ACTIVE, Phase.LEAVING):
            self._send(env.payload["requester"], MsgType.JOIN_REFUSE,
                       {"reason": Refusal.BUSY.value, "attempt": env.payload.get("attempt")})
            return
        raw_route = env.payload.get("route")
        if raw_route is None:
            route = start_route(self.state, self.ring.parse(env.payload["target"]))
        else:
            route = Route.from_wire(raw_route, self.ring)
        decision = next_hop(self.state, route)
        if decision.deliver:
            {
                MsgType.JOIN_REQ: self._deliver_join,
                MsgType.LEAVE_REQ: self._deliver_leave,
                MsgType.TAKEOVER: self._deliver_takeover,
            }[env.msg_type](env)
        elif decision.address is not None:
            payload = {**env.payload, "route": decision.route.to_wire(self.ring)}
            self.transport.send(decision.address, env.forwarded(payload))
        else:
            self._stall(env, {**env.payload, "route": decision.route.to_wire(self.ring)})

    def _stall(self, env: Envelope, payload: dict[str, Any]) -> None:
        stalls = int(payload.get("stalls", 0)) + 1
        if stalls > self.cfg.max_stalls:
            logger.warning("%s: %s undeliverable after %d stalls", self.address, env.msg_type.value, stalls - 1)
            failure = {"msgType": env.msg_type.value, "target": payload.get("route", {}).get("target")}
            if env.msg_type in BUNDLES:
                failure["keys"] = [e["key"] for e in payload.get("entries", [])]
            self.transport.send(env.sender_address, Envelope(
                MsgType.DELIVERY_FAILURE, sender_address=self.address, payload=failure, search_id=env.search_id))
            return
        retry = Envelope(env.msg_type, env.sender_address, {**payload, "stalls": stalls},
                         env.sender_id, env.search_id, env.hop_count)
        self.transport.call_later(self.cfg.stall_retry, lambda: self.handle(retry))

    def _on_delivery_failure(self, env: Envelope) -> None:
        msg_type = env.payload.get("msgType")
        if msg_type == MsgType.LEAVE_REQ.value and self.phase == Phase.LEAVING:
            self._leave_advance()
            return
        lookup = self.lookups.get(env.search_id or "")
        if lookup is not None:
            lookup.failed.update(k for k in env.payload.get("keys", []) if k not in lookup.replied_at)
            self._settle(lookup)

    # -- join, role C ----------------------------------------------------------

    def _deliver_join(self, env: Envelope) -> None:
        requester = env.payload["requester"]
        attempt = env.payload.get("attempt")
        now = self.now()
        expire_join_lock(self.state, now)
        result = accept_join(self.state, requester, now, self.cfg.join_lock)
        if isinstance(result, Refusal):
            self._send(requester, MsgType.JOIN_REFUSE, {"reason": result.value, "attempt": attempt})
            return
        self._send(requester, MsgType.JOIN_REPLY, {**result.to_wire(self.ring), "attempt": attempt})
        self.transport.call_later(self.cfg.join_lock, self._check_join_lock)

    def _check_join_lock(self) -> None:
        if expire_join_lock(self.state, self.now()):
            logger.info("%s: join lock expired without confirm", self.address)

    def _on_split_confirm(self, env: Envelope) -> None:
        now = self.now()
        given = parse_zone(env.payload["zone"], self.ring)
        joiner = NeighborRecord(env.payload["address"], self.ring.parse(env.payload["nodeId"]), given, now)
        notify = finalize_split(self.state, given, joiner, now)
        if notify is None:
            logger.warning("%s: ignoring stale split confirm from %s", self.address, joiner.address)
            return
        moved = self.keys.extract(given, self.ring)
        self._send(joiner.address, MsgType.KEY_TRANSFER, {"records": [r.to_wire() for r in moved]})
        for address in notify:
            self._send(address, MsgType.ZONE_UPDATE, self._own_info())

    def _on_key_transfer(self, env: Envelope) -> None:
        self.keys.absorb([KeyRecord.from_wire(r) for r in env.payload.get("records", [])])

    # -- leave -----------------------------------------------------------------

    def begin_leave(self) -> bool:
        """Start a graceful leave; False when the node is not in a state to leave."""
        if self.phase != Phase.ACTIVE:
            return False
        if self.state.zone.full_ring:
            self._stop()
            return True
        if self.state.join_lock_holder is not None:
            self.transport.call_later(1.0, self.begin_leave)
            return True
        self.state.phase = Phase.LEAVING
        self._leave_restarts = 0
        self._leave_which = 0
        self._leave_try()
        return True

    def _leave_try(self) -> None:
        self._leave_token += 1
        token = self._leave_token
        zone = self.state.zone
        target = successor_label(zone, self.ring) if self._leave_which == 0 else predecessor_label(zone, self.ring)
        payload = {
            **make_leave_request(self.state).to_wire(self.ring),
            "token": token,
            "keys": [r.to_wire() for r in self.keys.all_records()],
            "forumHighWater": self.store.high_water(),
            "gossip": self.gossip.pending(),
        }
        self._late_puts = []
        self._originate(MsgType.LEAVE_REQ, target, payload)
        self._cancel(self._leave_timer)
        self._leave_timer = self.transport.call_later(self.cfg.leave_timeout, lambda: self._leave_timed_out(token))

    def _leave_timed_out(self, token: int) -> None:
        if self.phase == Phase.LEAVING and token == self._leave_token:
            self._leave_advance()

    def _leave_advance(self) -> None:
        self._cancel(self._leave_timer)
        if self._leave_which == 0:
            self._leave_which = 1
            self._leave_try()
            return
        self._leave_restarts += 1
        if self._leave_restarts > self.cfg.max_leave_restarts:
            logger.warning("%s: giving up on leaving after %d restarts", self.address, self._leave_restarts - 1)
            self.state.phase = Phase.ACTIVE
            return
        self._leave_which = 0
        token = self._leave_token
        backoff = self.cfg.leave_timeout * self.rng.random()
        self._leave_timer = self.transport.call_later(backoff, lambda: self._leave_restart(token))

    def _leave_restart(self, token: int) -> None:
        if self.phase == Phase.LEAVING and token == self._leave_token:
            self._leave_try()

    def _on_leave_refuse(self, env: Envelope) -> None:
        if self.phase == Phase.LEAVING and env.payload.get("token") == self._leave_token:
            logger.debug("%s: leave refused (%s)", self.address, env.payload.get("reason"))
            self._leave_advance()

    def _on_leave_accept(self, env: Envelope) -> None:
        if self._late_puts:
            # stored after the snapshot in the leave request went out
            self._send(env.sender_address, MsgType.KEY_TRANSFER, {"records": [r.to_wire() for r in self._late_puts]})
        self._stop()

    def _deliver_leave(self, env: Envelope) -> None:
        now = self.now()
        request = LeaveRequest.from_wire(env.payload, self.ring, now)
        if request.address == self.address:
            return
        expire_join_lock(self.state, now)
        result = accept_leave(self.state, request, now)
        token = env.payload.get("token")
        if isinstance(result, Refusal):
            self._send(request.address, MsgType.LEAVE_REFUSE, {"reason": result.value, "token": token})
            return
        self.keys.absorb([KeyRecord.from_wire(r) for r in env.payload.get("keys", [])])
        for record in store_records(self.store, env.payload.get("gossip", [])):
            self.gossip.offer(record)
        high_water = env.payload.get("forumHighWater")
        mine = self.store.high_water()
        update = {**self._own_info(), "departed": [request.address]}
        for address in result:
            self._send(address, MsgType.ZONE_UPDATE, update)
        self._send(request.address, MsgType.LEAVE_ACCEPT, {"token": token})
        if high_water is not None and (mine is None or high_water > mine) and self.cfg.maintenance:
            self.transport.call_later(self.cfg.reconcile_after_join, self.start_reconcile)

    def _stop(self) -> None:
        if self.phase == Phase.STOPPED:
            return
        self.state.phase = Phase.STOPPED
        self._cancel(self._leave_timer)
        self._cancel(self._join_timer)
        self.transport.stop()
        logger.info("%s: left the overlay", self.address)

    def crash(self) -> None:
        """Stop without telling anyone."""
        self.state.phase = Phase.STOPPED
        self.transport.stop()

    # -- zone updates, keep-alive, failures ------------------------------------

    def _on_zone_update(self, env: Envelope) -> None:
        now = self.now()
        payload = env.payload
        apply_departures(self.state, payload.get("departed", []), now)
        zone = parse_zone(payload["zone"], self.ring)
        apply_zone_update(self.state, payload["address"], self.ring.parse(payload["nodeId"]), zone, now,
                          self.cfg.death_threshold)
        for dead, orphan in list(self.pending_takeovers.items()):
            if zone_covers(zone, orphan, self.ring):
                del self.pending_takeovers[dead]

    def _keep_alive(self) -> None:
        info = self._own_info()
        for address in self.state.neighbor_addresses():
            self._send(address, MsgType.KEEP_ALIVE, info)

    def _on_keep_alive(self, env: Envelope) -> None:
        """Refresh a known neighbor; a stale announcement never replaces fresher records."""
        payload = env.payload
        now = self.now()
        if touch(self.state, payload["address"], now):
            return
        zone = parse_zone(payload["zone"], self.ring)
        if any(zones_overlap(r.zone, zone, self.ring) for r in self.state.records().values()):
            return
        apply_zone_update(self.state, payload["address"], self.ring.parse(payload["nodeId"]), zone, now,
                          self.cfg.death_threshold)

    def _failure_sweep(self) -> None:
        now = self.now()
        expire_join_lock(self.state, now)
        prune_tombstones(self.state, now, self.cfg.death_threshold)
        for dead in failure_sweep(self.state, now, self.cfg.death_threshold):
            self.pending_takeovers[dead.address] = dead.zone
        for dead, orphan in list(self.pending_takeovers.items()):
            if zone_covers(self.state.zone, orphan, self.ring):
                del self.pending_takeovers[dead]
                continue
            self._takeover(dead, orphan)

    def _takeover(self, dead: str, orphan) -> None:
        successor = successor_label(orphan, self.ring)
        if self.state.owns(successor):
            if adopt_orphan(self.state, orphan):
                self.pending_takeovers.pop(dead, None)
                self._announce_zone()
            return
        self._originate(MsgType.TAKEOVER, successor, {
            **self._own_info(),
            "dead": dead,
            "deadZone": format_zone(orphan, self.ring),
        })

    def _deliver_takeover(self, env: Envelope) -> None:
        payload = env.payload
        now = self.now()
        orphan = parse_zone(payload["deadZone"], self.ring)
        apply_departures(self.state, [payload["dead"]], now)
        if adopt_orphan(self.state, orphan):
            self.pending_takeovers.pop(payload["dead"], None)
            self._announce_zone()
        if not zone_covers(self.state.zone, orphan, self.ring):
            return
        notifier = payload["address"]
        if notifier != self.address:
            apply_zone_update(self.state, notifier, self.ring.parse(payload["nodeId"]),
                              parse_zone(payload["zone"], self.ring), now, self.cfg.death_threshold)
            self._send(notifier, MsgType.ZONE_UPDATE, self._own_info())

    def _announce_zone(self) -> None:
        info = self._own_info()
        for address in self.state.neighbor_addresses():
            self._send(address, MsgType.ZONE_UPDATE, info)

    # -- dht -------------------------------------------------------------------

    def multi_key_put(self, pairs: list[tuple[str, dict[str, Any]]]) -> None:
        if not pairs or self.phase not in (Phase.ACTIVE, Phase.LEAVING):
            return
        entries = new_entries(self.state, [k for k, _ in pairs], [v for _, v in pairs])
        self._dispatch_bundle(MsgType.MPUT if self.cfg.batching else MsgType.PUT, entries, None)

    def multi_key_get(self, keys: list[str], search_id: str | None = None) -> Lookup:
        entries = new_entries(self.state, keys)
        search_id = search_id or self._new_id()
        lookup = Lookup(search_id=search_id, keys=list(dict.fromkeys(keys)), issued_at=self.now())
        self.lookups[search_id] = lookup
        self._dispatch_bundle(MsgType.MGET if self.cfg.batching else MsgType.GET, entries, search_id)
        self.transport.call_later(self.cfg.get_timeout, lambda: self._get_timed_out(search_id))
        return lookup

    def get(self, key: str, search_id: str | None = None) -> Lookup:
        return self.multi_key_get([key], search_id)

    def _dispatch_bundle(self, msg_type: MsgType, entries: list[BundleEntry], search_id: str | None) -> None:
        wire = [e.to_wire(self.ring) for e in entries]
        if msg_type in (MsgType.MPUT, MsgType.MGET):
            self.handle(self._envelope(msg_type, {"entries": wire}, search_id))
            return
        for entry in wire:
            self.handle(self._envelope(msg_type, {"entries": [entry]}, search_id))

    def _get_timed_out(self, search_id: str) -> None:
        lookup = self.lookups.get(search_id)
        if lookup is None or self.phase == Phase.STOPPED:
            return
        missing = lookup.outstanding()
        if not missing:
            self._settle(lookup)
            return
        if lookup.attempts > self.cfg.get_retries:
            lookup.failed.update(missing)
            self._settle(lookup)
            return
        lookup.attempts += 1
        self._dispatch_bundle(MsgType.MGET if self.cfg.batching else MsgType.GET,
                              new_entries(self.state, missing), search_id)
        self.transport.call_later(self.cfg.get_timeout, lambda: self._get_timed_out(search_id))

    def _on_bundle(self, env: Envelope) -> None:
        entries = [BundleEntry.from_wire(e, self.ring) for e in env.payload["entries"]]
        split = split_bundle(self.state, entries)
        now = self.now()
        if split.local:
            if env.msg_type in _STORE_TYPES:
                for entry in split.local:
                    record = KeyRecord.from_value(entry.key, entry.value, now)
                    self.keys.put(record)
                    if self.phase == Phase.LEAVING:
                        self._late_puts.append(record)
            else:
                items = [{"key": e.key, "values": [r.value() for r in self.keys.get(e.key)]} for e in split.local]
                self.transport.send(env.sender_address, Envelope(
                    MsgType.GET_REPLY, sender_address=self.address, search_id=env.search_id,
                    payload={"items": items, "hops": env.hop_count}))
        for address in sorted(split.forward):
            group = [e.to_wire(self.ring) for e in split.forward[address]]
            self.transport.send(address, env.forwarded({"entries": group}))
        if split.stalled:
            stalls = max(int(env.payload.get("stalls", 0)), *(e.stalls for e in split.stalled))
            for entry in split.stalled:
                entry.stalls = stalls
            self._stall(env, {"entries": [e.to_wire(self.ring) for e in split.stalled], "stalls": stalls})

    def _on_get_reply(self, env: Envelope) -> None:
        lookup = self.lookups.get(env.search_id or "")
        if lookup is None:
            return
        now = self.now()
        hops = int(env.payload.get("hops", 0))
        for item in env.payload.get("items", []):
            key = item["key"]
            values = item.get("values", [])
            merged = {(v["fileHash"], v["holder"]): v for v in lookup.values.get(key, [])}
            merged.update({(v["fileHash"], v["holder"]): v for v in values})
            lookup.values[key] = list(merged.values())
            lookup.replied_at.setdefault(key, now)
            lookup.hops.setdefault(key, hops)
            lookup.failed.discard(key)
            if self.session is not None:
                accept_result(self.session, env.search_id, key, values)
        self._settle(lookup)

    def _settle(self, lookup: Lookup) -> None:
        """Forget a finished lookup; one with failed keys lingers for late replies."""
        if lookup.outstanding():
            return

        def forget() -> None:
            if self.lookups.get(lookup.search_id) is lookup and not lookup.outstanding():
                del self.lookups[lookup.search_id]

        if not lookup.failed:
            forget()
            return
        self.transport.call_later(self.cfg.get_timeout, forget)

    def _expire(self) -> None:
        self.keys.expire(self.now(), self.cfg.key_ttl)

    # -- sharing ---------------------------------------------------------------

    def share(self, meta: FileMeta) -> None:
        self.shared[meta.content_hash] = meta
        if self.phase in (Phase.ACTIVE, Phase.LEAVING):
            self.multi_key_put(publish_entries(meta, self.address))

    def publish_all(self) -> None:
        pairs: list[tuple[str, dict[str, Any]]] = []
        for file_hash in sorted(self.shared):
            pairs.extend(publish_entries(self.shared[file_hash], self.address))
        self.multi_key_put(pairs)

    def rescan(self) -> ChangeSet:
        changes = scan_shares(self.share_dirs, self.index, self.now())
        if not changes.is_empty():
            self.index.save()
        for meta in changes.deleted:
            if self.index.by_hash(meta.content_hash) is None:
                self.shared.pop(meta.content_hash, None)
        for meta in self.index.all():
            self.shared[meta.content_hash] = meta
        pairs: list[tuple[str, dict[str, Any]]] = []
        for meta in changes.to_publish():
            pairs.extend(publish_entries(meta, self.address))
        self.multi_key_put(pairs)
        return changes

    def serve_chunk(self, file_hash: str, index: int, chunk_size: int) -> bytes:
        if not 0 < chunk_size <= CHUNK_SIZE:
            raise ValueError(f"chunk size {chunk_size} outside 1-{CHUNK_SIZE}")
        if index < 0:
            raise ValueError(f"negative chunk index {index}")
        meta = self.shared.get(file_hash)
        if meta is None:
            raise FileNotFoundError(f"not sharing {file_hash}")
        with open(meta.path, "rb") as fh:
            fh.seek(index * chunk_size)
            return fh.read(chunk_size)

    def handle_request(self, env: Envelope) -> Envelope:
        """Answer a request that expects a reply on the same connection."""
        payload = env.payload
        try:
            data = self.serve_chunk(payload["fileHash"], int(payload["index"]), int(payload["chunkSize"]))
            body = {"fileHash": payload["fileHash"], "index": payload["index"],
                    "data": base64.b64encode(data).decode("ascii")}
        except (OSError, ValueError, TypeError, KeyError) as exc:
            body = {"fileHash": payload.get("fileHash"), "index": payload.get("index"), "error": str(exc)}
        return self._envelope(MsgType.CHUNK_DATA, body)

    def _on_chunk_req(self, env: Envelope) -> None:
        self.transport.send(env.sender_address, self.handle_request(env))

    # -- forum -----------------------------------------------------------------

    def publish_record(self, record: dict[str, Any]) -> None:
        record = validate_record(record)
        if not self.store.insert_record(record):
            return
        if record.get("announcement"):
            self._forward_now(record, exclude=None)
        else:
            self.gossip.offer(record)

    def _forward_now(self, record: dict[str, Any], exclude: str | None) -> None:
        for address in self.state.neighbor_addresses():
            if address != exclude:
                self._send(address, MsgType.GOSSIP, {"records": [record]})

    def _on_gossip(self, env: Envelope) -> None:
        source = env.sender_address
        for raw in env.payload.get("records", []):
            try:
                record = validate_record(raw)
            except ValidationError as exc:
                logger.warning("%s: invalid gossip from %s: %s", self.address, source, exc)
                continue
            if not self.store.insert_record(record):
                self.gossip.add_source(record["id"], source)
                continue
            if record.get("announcement"):
                self._forward_now(record, exclude=source)
            else:
                self.gossip.offer(record, source)

    def _gossip_tick(self) -> None:
        for address, records in self.gossip.drain(self.state.neighbor_addresses()).items():
            self._send(address, MsgType.GOSSIP, {"records": records})

    def start_reconcile(self) -> bool:
        if self.phase != Phase.ACTIVE or self._recon is not None:
            return False
        partner = pick_partner(self.state.neighbor_addresses(), self.rng)
        if partner is None:
            return False
        anchor = window_anchor(self.store, self.now(), self.cfg.forum_window)
        self._recon = _Reconcile(partner=partner, anchor=anchor, token=self._new_id())
        self._recon_round()
        return True

    def _recon_round(self) -> None:
        recon = self._recon
        self._send(recon.partner, MsgType.RECON_START,
                   {"anchor": recon.anchor, "round": recon.round, "token": recon.token})
        token, rnd = recon.token, recon.round
        self.transport.call_later(self.cfg.reconcile_timeout, lambda: self._recon_timed_out(token, rnd))

    def _recon_timed_out(self, token: str, rnd: int) -> None:
        if self._recon is not None and self._recon.token == token and self._recon.round == rnd:
            logger.info("%s: reconciliation with %s timed out", self.address, self._recon.partner)
            self._recon = None

    def _current_recon(self, env: Envelope) -> _Reconcile | None:
        recon = self._recon
        if recon is None or recon.token != env.payload.get("token") or recon.partner != env.sender_address:
            return None
        return recon

    def _on_recon_start(self, env: Envelope) -> None:
        ids = self.store.window_ids(float(env.payload["anchor"]))
        self._send(env.sender_address, MsgType.RECON_HASHES, {
            **env.payload, "hashes": chunk_hashes(ids, self.cfg.reconcile_chunk)})

    def _on_recon_hashes(self, env: Envelope) -> None:
        recon = self._current_recon(env)
        if recon is None:
            return
        mine = self.store.window_ids(recon.anchor)
        bad = mismatched_chunks(chunk_hashes(mine, self.cfg.reconcile_chunk), env.payload["hashes"])
        if not bad:
            logger.debug("%s: forum in sync with %s after %d rounds", self.address, recon.partner, recon.round)
            self._recon = None
            return
        self._send(recon.partner, MsgType.RECON_IDS, {
            "anchor": recon.anchor, "round": recon.round, "token": recon.token,
            "chunks": bad, "ids": chunk_ids(mine, bad, self.cfg.reconcile_chunk)})

    def _on_recon_ids(self, env: Envelope) -> None:
        offered = list(env.payload["ids"])
        mine = self.store.window_ids(float(env.payload["anchor"]))
        answered = chunk_ids(mine, list(env.payload["chunks"]), self.cfg.reconcile_chunk)
        offered_set = set(offered)
        push = [rid for rid in answered if rid not in offered_set]
        common = {"round": env.payload["round"], "token": env.payload["token"]}
        self._send(env.sender_address, MsgType.RECON_RECORDS, {**common, "records": self.store.get_records(push)})
        self._send(env.sender_address, MsgType.RECON_FETCH, {**common, "ids": missing_from(offered, self.store)})

    def _on_recon_records(self, env: Envelope) -> None:
        store_records(self.store, env.payload.get("records", []))

    def _on_recon_fetch(self, env: Envelope) -> None:
        recon = self._current_recon(env)
        if recon is None:
            return
        self._send(recon.partner, MsgType.RECON_RECORDS, {
            "round": recon.round, "token": recon.token, "records": self.store.get_records(list(env.payload["ids"]))})
        if recon.round >= self.cfg.reconcile_rounds:
            logger.info("%s: reconciliation with %s stopped after %d rounds", self.address, recon.partner, recon.round)
            self._recon = None
            return
        recon.round += 1
        self._recon_round()

    # -- local control ---------------------------------------------------------

    def handle_control(self, env: Envelope, reply: Reply) -> None:
        """Serve a CLI request; ``reply`` receives one CTRL_RESULT envelope."""

        def respond(body: dict[str, Any]) -> None:
            reply(self._envelope(MsgType.CTRL_RESULT, body, env.search_id))

        try:
            self._control(env, respond)
        except (ValueError, KeyError, TypeError) as exc:
            respond({"ok": False, "error": str(exc), "errorKind": "validation"})

    def _control(self, env: Envelope, respond: Callable[[dict[str, Any]], None]) -> None:
        payload = env.payload
        now = self.now()
        if env.msg_type == MsgType.CTRL_STATUS:
            respond({"ok": True, "phase": self.phase.value, "state": self.state.describe() if self.state.zone else None,
                     "keys": len(self.keys), "records": self.store.count_records(), "shared": len(self.shared)})
            return
        if env.msg_type in (MsgType.CTRL_SEARCH, MsgType.CTRL_GET) and self.phase != Phase.ACTIVE:
            respond({"ok": False, "error": f"node is {self.phase.value}, not active", "errorKind": "runtime"})
            return
        if env.msg_type == MsgType.CTRL_SEARCH:
            if self.session is not None:
                cancel_search(self.session)
            session = start_search(payload["query"])
            self.session = session
            self.multi_key_get(list(session.keys()), session.search_id)

            def finish() -> None:
                results = [r.to_dict() for r in rank_results(session)]
                respond({"ok": True, "searchId": session.search_id, "keywords": session.query_keywords,
                         "results": results})

            self.transport.call_later(float(payload.get("wait", 5.0)), finish)
            return
        if env.msg_type == MsgType.CTRL_GET:
            file_hash = validate_file_hash(payload["fileHash"])
            lookup = self.get(file_hash)
            download = bool(payload.get("download"))
            self.transport.call_later(float(payload.get("wait", 5.0)),
                                      lambda: self._finish_get(lookup, file_hash, download, respond))
            return
        if env.msg_type == MsgType.CTRL_POST:
            record = create_post(title=payload["title"], text=payload["text"], author=self.author, timestamp=now,
                                 file_id=payload.get("fileId") or "0", announcement=bool(payload.get("announcement")))
            self.publish_record(record)
            respond({"ok": True, "id": record["id"]})
            return
        if env.msg_type == MsgType.CTRL_COMMENT:
            record = create_comment(reply_to=payload["replyTo"], text=payload["text"], author=self.author,
                                    timestamp=now, known=self.store, file_id=payload.get("fileId") or "0")
            self.publish_record(record)
            respond({"ok": True, "id": record["id"]})
            return
        if env.msg_type == MsgType.CTRL_ANNOTATE:
            annotation = create_annotation(payload["kind"], payload["fields"], file_id=payload["fileId"],
                                           author=self.author, text=payload.get("text", ""), timestamp=now)
            self.store.insert_annotation(annotation.to_dict())
            body: dict[str, Any] = {"ok": True, "annotation": annotation.to_dict()}
            if payload.get("title"):
                record = annotation_to_post(annotation, title=payload["title"], extra_text=payload.get("extra", ""),
                                            author=self.author, timestamp=now)
                self.publish_record(record)
                body["postId"] = record["id"]
            respond(body)
            return
        raise ValueError(f"unsupported control request {env.msg_type.value}")

    def _finish_get(self, lookup: Lookup, file_hash: str, download: bool,
                    respond: Callable[[dict[str, Any]], None]) -> None:
        values = lookup.values.get(file_hash, [])
        holders = holders_from_values(values)
        body: dict[str, Any] = {"ok": True, "fileHash": file_hash, "holders": holders, "values": values}
        if not download or not holders:
            respond(body)
            return

        try:
            dest = download_destination(self.download_dir or Path.cwd(), values[0]["fileName"])
        except DownloadError as exc:
            logger.warning("%s: refusing download of %s: %s", self.address, file_hash, exc)
            respond({**body, "ok": False, "error": str(exc), "errorKind": "runtime"})
            return

        async def run() -> None:
            try:
                path = await download_file(file_hash, int(values[0]["fileSize"]), holders,
                                           self.transport.fetch_chunk, dest)
            except DownloadError as exc:
                respond({**body, "ok": False, "error": str(exc), "errorKind": "runtime"})
                return
            respond({**body, "path": str(path)})

        self.transport.spawn(run())

    def _new_id(self) -> str:
        return uuid.UUID(int=self.rng.getrandbits(128)).hex

    @staticmethod
    def _cancel(timer) -> None:
        if timer is not None:
            timer.cancel()


def node_rng(seed: int, address: str) -> random.Random:
    return random.Random(f"{seed}:{address}")

