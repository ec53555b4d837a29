"""Experiments on the simulated network: degree statistics, lookups, churn."""
from __future__ import annotations

import bisect
import csv
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from bruijn_share.config import NodeConfig
from bruijn_share.idspace import (
    DEFAULT_RING,
    RingParams,
    edge_label_arcs,
    label_from_key,
    sha1_hex,
    zone_contains,
    zone_size,
)
from bruijn_share.index import FileMeta
from bruijn_share.node import Lookup, Node, node_rng
from bruijn_share.overlay import Phase
from bruijn_share.rendezvous import RendezvousRegistry
from bruijn_share.simnet import DelayModel, SimNetwork
from bruijn_share.wire import PROTOCOL_TYPES, Envelope

logger = logging.getLogger(__name__)

PRESETS = ("degree", "lookup", "churn")
RENDEZVOUS = "rendezvous:7000"
_SETTLING = (Phase.BOOTING, Phase.JOINING, Phase.LEAVING)


class AuditError(RuntimeError):
    """Raised when the degree experiment finds the ring not partitioned."""


@dataclass
class SimConfig:
    preset: str = "degree"
    node_count: int = 100
    seed: int = 0
    join_interval: float = 0.5
    leave_prob: float = 0.1
    churn_interval: float = 180.0
    duration: float = 1800.0
    crash: bool = False
    delay: DelayModel = field(default_factory=DelayModel)
    batching: bool = True
    words_per_node: int = 25
    lexicon_size: int = 3000
    lookup_start: float = 300.0
    lookup_spread: float = 60.0
    lookup_deadline: float = 30.0
    lookup_round_interval: float = 300.0
    audit_interval: float = 60.0
    ring: RingParams = DEFAULT_RING
    record_events: bool = False

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.node_count < 2:
            raise ValueError("experiments need at least 2 nodes")
        if not 0.0 <= self.leave_prob <= 1.0:
            raise ValueError("leave probability must lie in [0, 1]")


@dataclass
class Metrics:
    preset: str = ""
    node_count: int = 0
    k: int = DEFAULT_RING.k
    out_degree_histogram: Counter = field(default_factory=Counter)
    in_degree_histogram: Counter = field(default_factory=Counter)
    lookups_issued: int = 0
    lookups_succeeded: int = 0
    hop_counts: Counter = field(default_factory=Counter)
    coverage_violations: int = 0
    edge_violations: int = 0
    key_violations: int = 0
    audits: int = 0
    leaves: int = 0
    crashes: int = 0
    event_count: int = 0
    virtual_duration: float = 0.0

    @property
    def mean_out_degree(self) -> float:
        total = sum(self.out_degree_histogram.values())
        if not total:
            return 0.0
        return sum(d * c for d, c in self.out_degree_histogram.items()) / total

    @property
    def max_out_degree(self) -> int:
        return max(self.out_degree_histogram, default=0)

    @property
    def min_in_degree(self) -> int:
        return min(self.in_degree_histogram, default=0)

    @property
    def max_in_degree(self) -> int:
        return max(self.in_degree_histogram, default=0)

    @property
    def degree_bound(self) -> float:
        """K times log base K of the node count."""
        if self.node_count < 2:
            return float(self.k)
        return self.k * math.log(self.node_count, self.k)

    def fraction_over(self, threshold: int) -> float:
        total = sum(self.out_degree_histogram.values())
        if not total:
            return 0.0
        return sum(c for d, c in self.out_degree_histogram.items() if d > threshold) / total

    @property
    def bound_violations(self) -> int:
        return sum(c for d, c in self.out_degree_histogram.items() if d > self.degree_bound)

    @property
    def success_rate(self) -> float:
        if not self.lookups_issued:
            return 0.0
        return self.lookups_succeeded / self.lookups_issued

    @property
    def max_hops(self) -> int:
        return max(self.hop_counts, default=0)

    @property
    def mean_hops(self) -> float:
        total = sum(self.hop_counts.values())
        if not total:
            return 0.0
        return sum(h * c for h, c in self.hop_counts.items()) / total

    def is_empty(self) -> bool:
        return self.node_count == 0 and not self.out_degree_histogram

    def summary(self) -> dict[str, Any]:
        """Summary rows in their fixed CSV order."""
        return {
            "preset": self.preset,
            "nodes": self.node_count,
            "mean_out_degree": self.mean_out_degree,
            "max_out_degree": self.max_out_degree,
            "over_2k_fraction": self.fraction_over(2 * self.k),
            "degree_bound": self.degree_bound,
            "bound_violations": self.bound_violations,
            "min_in_degree": self.min_in_degree,
            "max_in_degree": self.max_in_degree,
            "lookups_issued": self.lookups_issued,
            "lookups_succeeded": self.lookups_succeeded,
            "success_rate": self.success_rate,
            "max_hops": self.max_hops,
            "mean_hops": self.mean_hops,
            "coverage_violations": self.coverage_violations,
            "edge_violations": self.edge_violations,
            "key_violations": self.key_violations,
            "audits": self.audits,
            "leaves": self.leaves,
            "crashes": self.crashes,
            "events": self.event_count,
            "virtual_duration": self.virtual_duration,
        }


@dataclass
class _Issued:
    issuer: str
    lookup: Lookup
    keys: list[str]


class Simulation:
    """A rendezvous endpoint plus any number of nodes on one SimNetwork."""

    def __init__(self, config: SimConfig, node_config: NodeConfig | None = None) -> None:
        self.config = config
        self.rng = random.Random(f"sim:{config.seed}")
        self.net = SimNetwork(config.seed, config.delay, record_events=config.record_events)
        self.registry = RendezvousRegistry(random.Random(f"rdv:{config.seed}"))
        self.node_config = node_config or NodeConfig(batching=config.batching)
        self.nodes: dict[str, Node] = {}
        self._issued: list[_Issued] = []
        self.net.attach(RENDEZVOUS, self._on_rendezvous)

    def _on_rendezvous(self, env: Envelope) -> None:
        reply = self.registry.handle(env, env.sender_address, self.net.now, RENDEZVOUS)
        if reply is not None:
            self.net.send(RENDEZVOUS, env.sender_address, reply)

    def add_node(self, shared: list[FileMeta] | None = None) -> Node:
        address = f"node-{len(self.nodes):06d}"
        node = Node(self.net.transport(address), RENDEZVOUS, ring=self.config.ring, config=self.node_config,
                    rng=node_rng(self.config.seed, address))
        for meta in shared or []:
            node.share(meta)
        self.nodes[address] = node
        self.net.attach(address, node.handle)
        node.start()
        return node

    def active(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.phase in (Phase.ACTIVE, Phase.LEAVING)]

    def quiescent(self) -> bool:
        if self.net.in_flight_of(PROTOCOL_TYPES):
            return False
        return not any(n.phase in _SETTLING for n in self.nodes.values())

    # -- audits ----------------------------------------------------------------

    def audit(self, metrics: Metrics) -> None:
        ring = self.config.ring
        nodes = sorted(self.active(), key=lambda n: n.state.zone.start)
        metrics.audits += 1
        metrics.coverage_violations += coverage_violations([n.state.zone for n in nodes], ring)
        starts = [n.state.zone.start for n in nodes]
        by_address = {n.address: n for n in nodes}
        for node in nodes:
            expected = _owners_of_arcs(edge_label_arcs(node.state.zone, ring), nodes, starts, ring)
            expected.discard(node.address)
            if expected != set(node.state.outgoing):
                metrics.edge_violations += 1
            for address in node.state.outgoing:
                peer = by_address.get(address)
                if peer is None or node.address not in peer.state.incoming:
                    metrics.edge_violations += 1
            for record in node.keys.all_records():
                if not zone_contains(node.state.zone, label_from_key(record.key, ring), ring):
                    metrics.key_violations += 1

    def sample_degrees(self, metrics: Metrics) -> None:
        active = self.active()
        metrics.node_count = len(active)
        metrics.out_degree_histogram = Counter(len(n.state.outgoing) for n in active)
        metrics.in_degree_histogram = Counter(len(n.state.incoming) for n in active)
        metrics.event_count = self.net.stats.events
        metrics.virtual_duration = self.net.now

    def audit_when_quiet(self, metrics: Metrics, until: float) -> None:
        def tick() -> None:
            if self.quiescent():
                self.audit(metrics)
            if self.net.now + self.config.audit_interval <= until:
                self.net.call_later(self.config.audit_interval, tick)

        self.net.call_later(self.config.audit_interval, tick)

    # -- lookup workload -------------------------------------------------------

    def lexicon(self) -> list[str]:
        return [f"word{i:04d}" for i in range(self.config.lexicon_size)]

    def synthetic_file(self, index: int, words: list[str]) -> FileMeta:
        name = f"f{index:06d}"
        return FileMeta(path=f"shared/{name}", content_hash=sha1_hex(name), size=1024, mtime=0.0,
                        auto_keywords=sorted(words))

    def spawn_publishers(self) -> float:
        """Schedule joins every ``join_interval``; returns the last join time."""
        lexicon = self.lexicon()
        cfg = self.config
        for i in range(cfg.node_count):
            words = self.rng.sample(lexicon, cfg.words_per_node)
            meta = self.synthetic_file(i, words)
            self.net.call_later(i * cfg.join_interval, lambda meta=meta: self.add_node([meta]))
        return (cfg.node_count - 1) * cfg.join_interval

    def schedule_lookup_round(self, at: float) -> None:
        for address in sorted(self.nodes):
            offset = at - self.net.now + self.rng.uniform(0, self.config.lookup_spread)
            self.net.call_later(offset, lambda a=address: self._issue(a))

    def _issue(self, address: str) -> None:
        node = self.nodes[address]
        if node.phase != Phase.ACTIVE:
            return
        keys = sorted({sha1_hex(w) for meta in node.shared.values() for w in meta.auto_keywords})
        if keys:
            self._issued.append(_Issued(address, node.multi_key_get(keys), keys))

    def score_lookups(self, metrics: Metrics) -> None:
        deadline = self.config.lookup_deadline
        for issued in self._issued:
            node = self.nodes[issued.issuer]
            if node.phase == Phase.STOPPED:
                continue
            lookup = issued.lookup
            for key in issued.keys:
                metrics.lookups_issued += 1
                replied = lookup.replied_at.get(key)
                if replied is None:
                    continue
                metrics.hop_counts[lookup.hops[key]] += 1
                holders = {v.get("holder") for v in lookup.values.get(key, [])}
                if replied - lookup.issued_at <= deadline and issued.issuer in holders:
                    metrics.lookups_succeeded += 1

    # -- churn -----------------------------------------------------------------

    def schedule_churn(self, start: float, until: float, metrics: Metrics) -> None:
        cfg = self.config
        for address in sorted(self.nodes):
            first = start + self.rng.uniform(0, cfg.churn_interval) - self.net.now
            self.net.call_later(first, lambda a=address: self._churn_tick(a, until, metrics))

    def _churn_tick(self, address: str, until: float, metrics: Metrics) -> None:
        cfg = self.config
        node = self.nodes[address]
        if node.phase != Phase.ACTIVE:
            return
        if self.rng.random() < cfg.leave_prob:
            remaining = sum(1 for n in self.nodes.values() if n.phase == Phase.ACTIVE)
            if remaining > 2:
                if cfg.crash:
                    node.crash()
                    metrics.crashes += 1
                else:
                    node.begin_leave()
                    metrics.leaves += 1
                return
        if self.net.now + cfg.churn_interval <= until:
            self.net.call_later(cfg.churn_interval, lambda: self._churn_tick(address, until, metrics))


def coverage_violations(zones: list, ring: RingParams) -> int:
    """Gaps and overlaps between zones sorted by start; 0 for an exact partition."""
    if not zones:
        return 1
    violations = 0
    if sum(zone_size(z, ring) for z in zones) != ring.n:
        violations += 1
    if len(zones) == 1:
        return violations if zones[0].full_ring else violations + 1
    for current, following in zip(zones, zones[1:] + zones[:1]):
        if (current.end + 1) % ring.n != following.start:
            violations += 1
    return violations


def _owners_of_arcs(arcs: list[tuple[int, int]], nodes: list[Node], starts: list[int], ring: RingParams) -> set[str]:
    owners: set[str] = set()
    for start, count in arcs:
        if count >= ring.n:
            return {n.address for n in nodes}
        label = start
        remaining = count
        while remaining > 0:
            slot = bisect.bisect_right(starts, label) - 1
            owner = nodes[slot]
            owners.add(owner.address)
            zone = owner.state.zone
            covered = (zone.end - label) % ring.n + 1
            if zone.full_ring:
                break
            remaining -= covered
            label = (label + covered) % ring.n
    return owners


def run_degree_experiment(config: SimConfig) -> Metrics:
    """Sequential joins with maintenance off, then one global audit."""
    sim = Simulation(config, NodeConfig(batching=config.batching, maintenance=False))
    metrics = Metrics(preset="degree", k=config.ring.k)
    for i in range(config.node_count):
        sim.add_node()
        sim.net.run_until_idle()
        if (i + 1) % 10000 == 0:
            logger.info("joined %d nodes", i + 1)
    sim.audit(metrics)
    sim.sample_degrees(metrics)
    if metrics.coverage_violations:
        raise AuditError(f"ring not partitioned after {config.node_count} joins")
    if metrics.node_count < config.node_count:
        logger.warning("%d of %d nodes finished joining", metrics.node_count, config.node_count)
    return metrics


def run_lookup_experiment(config: SimConfig) -> Metrics:
    sim = Simulation(config)
    metrics = Metrics(preset="lookup", k=config.ring.k)
    last_join = sim.spawn_publishers()
    start = max(config.lookup_start, last_join + 60.0)
    sim.net.run_until(start)
    if sim.quiescent():
        sim.audit(metrics)
    sim.schedule_lookup_round(start)
    end = start + config.lookup_spread + config.lookup_deadline + 1.0
    sim.net.run_until(end)
    sim.score_lookups(metrics)
    if sim.quiescent():
        sim.audit(metrics)
    sim.sample_degrees(metrics)
    return metrics


def run_churn_experiment(config: SimConfig) -> Metrics:
    sim = Simulation(config)
    metrics = Metrics(preset="churn", k=config.ring.k)
    last_join = sim.spawn_publishers()
    churn_start = last_join + 60.0
    end = churn_start + config.duration
    sim.net.run_until(churn_start)
    if config.leave_prob > 0:
        sim.schedule_churn(churn_start, end, metrics)
    sim.audit_when_quiet(metrics, end)
    at = churn_start + config.lookup_round_interval
    while at + config.lookup_spread + config.lookup_deadline <= end:
        sim.schedule_lookup_round(at)
        at += config.lookup_round_interval
    sim.net.run_until(end)
    sim.score_lookups(metrics)
    sim.sample_degrees(metrics)
    return metrics


EXPERIMENTS = {
    "degree": run_degree_experiment,
    "lookup": run_lookup_experiment,
    "churn": run_churn_experiment,
}


def run_experiment(config: SimConfig) -> Metrics:
    logger.info("running %s with %d nodes, seed %d", config.preset, config.node_count, config.seed)
    return EXPERIMENTS[config.preset](config)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


def export_csv(metrics: Metrics, path: Path | str) -> Path:
    """Write "metric,value" summary rows, then "degree,count" histogram rows."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        if not metrics.is_empty():
            for name, value in metrics.summary().items():
                writer.writerow([name, _cell(value)])
        writer.writerow(["degree", "count"])
        for degree in sorted(metrics.out_degree_histogram):
            writer.writerow([degree, metrics.out_degree_histogram[degree]])
    return path
