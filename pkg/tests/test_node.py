"""Node behaviour on the simulated network: joins, leaves, failures, lookups, forum."""

import asyncio
import base64
import random

import pytest

from bruijn_share.config import NodeConfig
from bruijn_share.forum import create_post
from bruijn_share.idspace import DEFAULT_RING, label_from_key, make_zone, sha1_hex, zone_contains
from bruijn_share.index import FileMeta
from bruijn_share.node import Lookup, Node
from bruijn_share.overlay import Phase
from bruijn_share.search import CHUNK_SIZE
from bruijn_share.sim import Metrics, SimConfig, Simulation
from bruijn_share.simnet import SimNetwork
from bruijn_share.wire import Envelope, MsgType

BODY = "Keep-alive messages every two minutes, takeover after five silent minutes. " * 2


def meta(name: str, words: list[str]) -> FileMeta:
    return FileMeta(path=f"shared/{name}", content_hash=sha1_hex(name), size=2048, mtime=0.0,
                    auto_keywords=sorted(words))


def build(count: int, maintenance: bool = False, seed: int = 1) -> Simulation:
    sim = Simulation(SimConfig(node_count=max(count, 2), seed=seed), NodeConfig(maintenance=maintenance))
    for _ in range(count):
        sim.add_node()
        if maintenance:
            sim.net.run_until(sim.net.now + 5.0)
        else:
            sim.net.run_until_idle()
    return sim


def audit(sim: Simulation) -> Metrics:
    metrics = Metrics()
    sim.audit(metrics)
    return metrics


def control(node: Node, msg_type: MsgType, payload: dict | None = None) -> list[Envelope]:
    replies: list[Envelope] = []
    node.handle_control(Envelope(msg_type, "cli", payload or {}), replies.append)
    return replies


class TestJoin:
    def test_first_node_owns_ring(self):
        sim = build(1)
        (node,) = sim.nodes.values()
        assert node.phase == Phase.ACTIVE
        assert node.state.zone.full_ring

    def test_joins_partition_ring(self):
        sim = build(12)
        assert all(n.phase == Phase.ACTIVE for n in sim.nodes.values())
        metrics = audit(sim)
        assert metrics.coverage_violations == 0
        assert metrics.edge_violations == 0

    def test_two_nodes_link_each_other(self):
        sim = build(2)
        a, b = sim.nodes.values()
        assert set(a.state.outgoing) == {b.address}
        assert set(b.state.outgoing) == {a.address}

    def test_keys_move_with_split(self):
        sim = build(1)
        (first,) = sim.nodes.values()
        first.share(meta("paper.pdf", [f"word{i}" for i in range(40)]))
        sim.net.run_until_idle()
        total = len(first.keys)
        for _ in range(5):
            sim.add_node()
            sim.net.run_until_idle()
        assert sum(len(n.keys) for n in sim.active()) == total
        assert audit(sim).key_violations == 0


class TestLookup:
    def test_shared_file_is_found(self):
        sim = build(8)
        publisher, *_, asker = sim.nodes.values()
        publisher.share(meta("overlay-notes.txt", ["gossip", "zones"]))
        sim.net.run_until_idle()
        key = sha1_hex("gossip")
        lookup = asker.multi_key_get([key, sha1_hex("absent")])
        sim.net.run_until_idle()
        assert lookup.status() == {key: "ok", sha1_hex("absent"): "ok"}
        assert [v["holder"] for v in lookup.values[key]] == [publisher.address]
        assert lookup.values[sha1_hex("absent")] == []
        assert lookup.hops[key] <= DEFAULT_RING.d

    def test_answered_lookups_are_forgotten(self):
        sim = build(4)
        asker = list(sim.nodes.values())[-1]
        lookup = asker.multi_key_get([sha1_hex("gossip"), sha1_hex("zones")])
        assert lookup.search_id in asker.lookups
        sim.net.run_until_idle()
        assert set(lookup.status().values()) == {"ok"}
        assert asker.lookups == {}

    def test_unbatched_gets_match(self):
        sim = Simulation(SimConfig(node_count=6, seed=2), NodeConfig(maintenance=False, batching=False))
        for _ in range(6):
            sim.add_node()
            sim.net.run_until_idle()
        publisher, *_, asker = sim.nodes.values()
        publisher.share(meta("notes.txt", ["gossip", "zones", "bundles"]))
        sim.net.run_until_idle()
        keys = [sha1_hex(w) for w in ("gossip", "zones", "bundles")]
        lookup = asker.multi_key_get(keys)
        sim.net.run_until_idle()
        assert set(lookup.status().values()) == {"ok"}
        assert sim.net.stats.sent[MsgType.MGET] == 0

    def test_crashed_owner_times_out(self):
        sim = build(2)
        a, b = sim.nodes.values()
        key = next(sha1_hex(f"lookup{i}") for i in range(1000)
                   if zone_contains(b.state.zone, label_from_key(sha1_hex(f"lookup{i}")), DEFAULT_RING))
        b.crash()
        lookup = a.get(key)
        sim.net.run_until_idle()
        assert lookup.status() == {key: "failed"}
        assert lookup.attempts == 2
        assert a.lookups == {}

    def test_unroutable_key_reports_delivery_failure(self):
        net = SimNetwork()
        node = Node(net.transport("solo"), "rendezvous", config=NodeConfig(maintenance=False),
                    rng=random.Random(0))
        net.attach("solo", node.handle)
        node.state.zone = make_zone(0, DEFAULT_RING.n // 2 - 1)
        node.state.node_id = 0
        node.state.phase = Phase.ACTIVE
        key = "f" * 40
        lookup = node.get(key)
        net.run_until(5.0)
        assert lookup.status() == {key: "failed"}
        assert net.stats.delivered[MsgType.DELIVERY_FAILURE] == 1


class TestLeave:
    def test_graceful_leave_keeps_keys_and_coverage(self):
        sim = build(8)
        publisher = next(iter(sim.nodes.values()))
        for i in range(4):
            publisher.share(meta(f"file{i}.txt", [f"topic{i}{j}" for j in range(20)]))
        sim.net.run_until_idle()
        before = sum(len(n.keys) for n in sim.active())
        leaver = max((n for n in sim.active() if n is not publisher), key=lambda n: len(n.keys))
        assert leaver.begin_leave()
        sim.net.run_until_idle()
        assert leaver.phase == Phase.STOPPED
        assert sum(len(n.keys) for n in sim.active()) == before
        metrics = audit(sim)
        assert metrics.coverage_violations == 0
        assert metrics.key_violations == 0
        assert all(leaver.address not in n.state.neighbor_addresses() for n in sim.active())

    def test_put_during_leave_reaches_acceptor(self):
        sim = build(4)
        leaver = list(sim.nodes.values())[2]
        key = next(k for k in (sha1_hex(f"late{i}") for i in range(5000))
                   if zone_contains(leaver.state.zone, label_from_key(k), DEFAULT_RING))
        value = {"fileHash": sha1_hex("late.txt"), "fileSize": 10, "fileName": "late.txt", "holder": "10.0.0.9:7100"}
        assert leaver.begin_leave()
        leaver.multi_key_put([(key, value)])
        assert [r.holder for r in leaver.keys.get(key)] == ["10.0.0.9:7100"]
        sim.net.run_until_idle()
        assert leaver.phase == Phase.STOPPED
        assert [r.holder for n in sim.active() for r in n.keys.get(key)] == ["10.0.0.9:7100"]
        assert audit(sim).key_violations == 0

    @pytest.mark.slow
    def test_random_joins_and_leaves_conserve_keys(self):
        sim = build(24)
        rng = random.Random(11)
        for i, publisher in enumerate(list(sim.nodes.values())[:3]):
            publisher.share(meta(f"churn{i}.txt", [f"churn{i}-{j}" for j in range(30)]))
        sim.net.run_until_idle()
        total = sum(len(n.keys) for n in sim.active())
        for batch in range(20):
            for _ in range(50):
                active = sim.active()
                if len(active) > 40 or (len(active) > 8 and rng.random() < 0.5):
                    assert rng.choice(active).begin_leave()
                else:
                    sim.add_node()
                sim.net.run_until_idle()
            metrics = audit(sim)
            assert (batch, metrics.coverage_violations, metrics.edge_violations, metrics.key_violations) == (
                batch, 0, 0, 0)
            assert sum(len(n.keys) for n in sim.active()) == total

    def test_last_node_just_stops(self):
        sim = build(1)
        (node,) = sim.nodes.values()
        assert node.begin_leave()
        assert node.phase == Phase.STOPPED

    def test_cannot_leave_twice(self):
        sim = build(3)
        node = list(sim.nodes.values())[1]
        assert node.begin_leave()
        assert not node.begin_leave()


class TestFailure:
    @pytest.mark.slow
    def test_takeover_restores_coverage(self):
        sim = build(6, maintenance=True)
        victim = list(sim.nodes.values())[2]
        victim.crash()
        sim.net.run_until(sim.net.now + 900.0)
        metrics = audit(sim)
        assert metrics.coverage_violations == 0
        assert all(victim.address not in n.state.neighbor_addresses() for n in sim.active())

    @pytest.mark.slow
    def test_refresh_keeps_keys_alive(self):
        sim = build(4, maintenance=True)
        publisher, *_, asker = sim.nodes.values()
        publisher.share(meta("notes.txt", ["gossip"]))
        sim.net.run_until(sim.net.now + 8000.0)
        lookup = asker.get(sha1_hex("gossip"))
        sim.net.run_until(sim.net.now + 20.0)
        assert [v["holder"] for v in lookup.values[sha1_hex("gossip")]] == [publisher.address]


class TestForum:
    def test_announcement_floods_immediately(self):
        sim = build(6)
        first = next(iter(sim.nodes.values()))
        record = create_post(title="maintenance", text=BODY, author="ops", timestamp=0.0, announcement=True)
        first.publish_record(record)
        sim.net.run_until_idle()
        assert all(n.store.has(record["id"]) for n in sim.active())

    def test_plain_post_waits_for_gossip_tick(self):
        sim = build(6)
        first = next(iter(sim.nodes.values()))
        record = create_post(title="hello", text=BODY, author="alice", timestamp=0.0)
        first.publish_record(record)
        sim.net.run_until_idle()
        assert sum(n.store.has(record["id"]) for n in sim.active()) == 1
        assert len(first.gossip) == 1

    @pytest.mark.slow
    def test_gossip_reaches_everyone(self):
        sim = build(6, maintenance=True)
        first = next(iter(sim.nodes.values()))
        record = create_post(title="hello", text=BODY, author="alice", timestamp=sim.net.now)
        first.publish_record(record)
        sim.net.run_until(sim.net.now + 600.0)
        assert all(n.store.has(record["id"]) for n in sim.active())

    def test_reconcile_fills_gap(self):
        sim = build(2)
        a, b = sim.nodes.values()
        records = [create_post(title=f"p{i}", text=BODY, author="alice", timestamp=float(i)) for i in range(5)]
        for record in records:
            a.store.insert_record(record)
        b.store.insert_record(records[0])
        assert a.start_reconcile()
        sim.net.run_until_idle()
        assert b.store.window_ids(0) == a.store.window_ids(0)


class TestControl:
    def test_status(self):
        sim = build(2)
        node = next(iter(sim.nodes.values()))
        (reply,) = control(node, MsgType.CTRL_STATUS)
        assert reply.msg_type == MsgType.CTRL_RESULT
        assert reply.payload["ok"]
        assert reply.payload["phase"] == "active"
        assert reply.payload["state"]["address"] == node.address

    def test_short_post_is_validation_error(self):
        sim = build(2)
        node = next(iter(sim.nodes.values()))
        (reply,) = control(node, MsgType.CTRL_POST, {"title": "t", "text": "too short"})
        assert reply.payload["ok"] is False
        assert reply.payload["errorKind"] == "validation"

    def test_search_before_active_is_runtime_error(self):
        net = SimNetwork()
        node = Node(net.transport("idle"), "rendezvous", config=NodeConfig(maintenance=False))
        (reply,) = control(node, MsgType.CTRL_SEARCH, {"query": "gossip"})
        assert reply.payload["errorKind"] == "runtime"

    def test_search_returns_ranked_results(self):
        sim = build(4)
        publisher, *_, asker = sim.nodes.values()
        shared = meta("gossip-notes.txt", ["gossip", "zones"])
        publisher.share(shared)
        sim.net.run_until_idle()
        replies: list[Envelope] = []
        asker.handle_control(Envelope(MsgType.CTRL_SEARCH, "cli", {"query": "gossip zones", "wait": 2}),
                             replies.append)
        sim.net.run_until_idle()
        (reply,) = replies
        assert reply.payload["keywords"] == ["gossip", "zones"]
        assert reply.payload["results"][0]["fileHash"] == shared.content_hash

    def test_post_and_comment(self):
        sim = build(2)
        node = next(iter(sim.nodes.values()))
        (posted,) = control(node, MsgType.CTRL_POST, {"title": "hello", "text": BODY})
        (commented,) = control(node, MsgType.CTRL_COMMENT, {"replyTo": posted.payload["id"], "text": "agreed"})
        assert commented.payload["ok"]
        thread = node.store.thread(posted.payload["id"])
        assert [r["id"] for r in thread["replies"]] == [commented.payload["id"]]

    def test_get_bad_hash(self):
        sim = build(2)
        node = next(iter(sim.nodes.values()))
        (reply,) = control(node, MsgType.CTRL_GET, {"fileHash": "nope"})
        assert reply.payload["errorKind"] == "validation"


DATA = b"chunked payload for the download directory checks"


class LoopbackTransport:
    """Transport stub that serves every chunk from DATA and collects spawned coroutines."""

    address = "127.0.0.1:7100"

    def __init__(self) -> None:
        self.spawned = []

    def now(self) -> float:
        return 0.0

    def send(self, to, env) -> None:
        pass

    def call_later(self, delay, callback) -> None:
        return None

    def spawn(self, coro) -> None:
        self.spawned.append(coro)

    def stop(self) -> None:
        pass

    async def fetch_chunk(self, holder, file_hash, index, chunk_size) -> bytes:
        return DATA[index * chunk_size:(index + 1) * chunk_size]


def finish_download(tmp_path, file_name: str) -> tuple[LoopbackTransport, list[dict]]:
    transport = LoopbackTransport()
    node = Node(transport, "rendezvous", download_dir=tmp_path / "downloads")
    file_hash = sha1_hex(DATA)
    value = {"fileHash": file_hash, "fileSize": len(DATA), "fileName": file_name, "holder": "10.0.0.2:7100"}
    lookup = Lookup(search_id="s1", keys=[file_hash], issued_at=0.0, values={file_hash: [value]})
    replies: list[dict] = []
    node._finish_get(lookup, file_hash, True, replies.append)
    for coro in transport.spawned:
        asyncio.run(coro)
    return transport, replies


class TestDownloadTarget:
    def test_parent_segments_are_stripped(self, tmp_path):
        _, replies = finish_download(tmp_path, "../escaped.txt")
        saved = tmp_path / "downloads" / "escaped.txt"
        assert replies[0]["ok"]
        assert replies[0]["path"] == str(saved.resolve())
        assert saved.read_bytes() == DATA
        assert not (tmp_path / "escaped.txt").exists()

    def test_absolute_name_lands_in_download_dir(self, tmp_path):
        _, replies = finish_download(tmp_path, str(tmp_path / "elsewhere" / "abs.txt"))
        assert replies[0]["path"] == str((tmp_path / "downloads" / "abs.txt").resolve())
        assert not (tmp_path / "elsewhere").exists()

    def test_unusable_name_is_refused(self, tmp_path):
        transport, replies = finish_download(tmp_path, "..")
        assert transport.spawned == []
        assert replies[0]["ok"] is False
        assert replies[0]["errorKind"] == "runtime"


class TestChunkRequests:
    def serving_node(self, tmp_path) -> Node:
        shared = tmp_path / "shared.bin"
        shared.write_bytes(DATA)
        node = Node(LoopbackTransport(), "rendezvous")
        node.shared[sha1_hex(DATA)] = FileMeta(path=str(shared), content_hash=sha1_hex(DATA), size=len(DATA),
                                               mtime=0.0)
        return node

    def request(self, node: Node, index, chunk_size) -> dict:
        env = Envelope(MsgType.CHUNK_REQ, "10.0.0.3:7100",
                       {"fileHash": sha1_hex(DATA), "index": index, "chunkSize": chunk_size})
        return node.handle_request(env).payload

    def test_serves_requested_slice(self, tmp_path):
        reply = self.request(self.serving_node(tmp_path), 1, 8)
        assert base64.b64decode(reply["data"]) == DATA[8:16]

    def test_oversized_chunk_is_refused(self, tmp_path):
        reply = self.request(self.serving_node(tmp_path), 0, CHUNK_SIZE + 1)
        assert "data" not in reply
        assert "chunk size" in reply["error"]

    def test_negative_index_is_refused(self, tmp_path):
        reply = self.request(self.serving_node(tmp_path), -1, 8)
        assert "error" in reply
