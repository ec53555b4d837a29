"""Tests for ring arithmetic, zone algebra, edges and substring routing."""

import random
from collections import deque

import pytest

from bruijn_share.idspace import (
    DEFAULT_RING,
    LabelFormatError,
    MergeError,
    RingParams,
    UnsupportedRingError,
    Zone,
    ZoneTooSmallError,
    edge_label_arcs,
    full_zone,
    has_edge,
    label_from_key,
    make_zone,
    merge_zones,
    out_neighbors,
    parse_zone,
    routing_path,
    split_zone,
    suffix_overlap,
    zone_contains,
    zone_covers,
    zone_size,
)

B23 = RingParams(k=2, d=3)
B24 = RingParams(k=2, d=4)
B25 = RingParams(k=2, d=5)


def z(text: str, ring: RingParams = DEFAULT_RING) -> Zone:
    return parse_zone(text, ring)


def brute_edge(a: Zone, b: Zone, ring: RingParams) -> bool:
    for x in range(ring.n):
        if zone_contains(a, x, ring) and any(zone_contains(b, y, ring) for y in out_neighbors(x, ring)):
            return True
    return False


def random_partition(ring: RingParams, rng: random.Random) -> list[Zone]:
    count = rng.randint(2, 12)
    cuts = sorted(rng.sample(range(ring.n), count))
    offset = rng.randrange(ring.n)
    zones = []
    for i, start in enumerate(cuts):
        end = cuts[(i + 1) % count] - 1
        zones.append(make_zone(start + offset, end + offset, ring))
    return zones


def bfs_distance(src: int, dst: int, ring: RingParams) -> int:
    seen = {src: 0}
    queue = deque([src])
    while queue:
        x = queue.popleft()
        if x == dst:
            return seen[x]
        for y in out_neighbors(x, ring):
            if y not in seen:
                seen[y] = seen[x] + 1
                queue.append(y)
    raise AssertionError("graph is strongly connected")


class TestLabels:
    def test_render_pads_to_length(self):
        assert DEFAULT_RING.render(0) == "00000000"
        assert DEFAULT_RING.render(DEFAULT_RING.n - 1) == "77777777"

    def test_parse_round_trips(self):
        assert DEFAULT_RING.parse("13752341") == 0o13752341

    def test_parse_rejects_wrong_length(self):
        with pytest.raises(LabelFormatError):
            DEFAULT_RING.parse("1375234")

    def test_parse_rejects_digit_outside_radix(self):
        with pytest.raises(LabelFormatError):
            DEFAULT_RING.parse("13752348")

    def test_render_rejects_out_of_range(self):
        with pytest.raises(LabelFormatError):
            DEFAULT_RING.render(DEFAULT_RING.n)

    def test_ring_sizes(self):
        assert DEFAULT_RING.n == 8 ** 8
        assert DEFAULT_RING.m == 8 ** 7


class TestLabelFromKey:
    def test_golden_value(self):
        label = label_from_key("2fd4e1c67a2d28fced849ee1bb76e7391b93eb12")
        assert DEFAULT_RING.render(label) == "13752341"

    def test_all_zero_digest(self):
        assert DEFAULT_RING.render(label_from_key("0" * 40)) == "00000000"

    def test_all_ones_prefix(self):
        assert DEFAULT_RING.render(label_from_key("ffffff" + "0" * 34)) == "77777777"

    def test_accepts_raw_bytes(self):
        assert label_from_key(bytes(20)) == 0

    def test_radix_not_power_of_two(self):
        with pytest.raises(UnsupportedRingError):
            label_from_key("0" * 40, RingParams(k=3, d=8))

    def test_ring_wider_than_digest(self):
        with pytest.raises(UnsupportedRingError):
            label_from_key("0" * 40, RingParams(k=8, d=60))

    def test_short_digest(self):
        with pytest.raises(UnsupportedRingError):
            label_from_key("abcd")


class TestOutNeighbors:
    def test_shift_and_append(self):
        assert out_neighbors(B23.parse("011"), B23) == {B23.parse("110"), B23.parse("111")}

    def test_self_loop_on_zero(self):
        assert out_neighbors(0, B23) == {0, 1}

    def test_default_ring_zero(self):
        assert out_neighbors(0) == set(range(8))

    def test_every_neighbor_shares_the_suffix(self):
        rng = random.Random(5)
        for _ in range(200):
            x = rng.randrange(DEFAULT_RING.n)
            neighbors = out_neighbors(x)
            assert len(neighbors) == 8
            assert all(y // 8 == x % DEFAULT_RING.m for y in neighbors)


class TestRouting:
    def test_figure_example(self):
        path = routing_path(B24.parse("1110"), B24.parse("1011"), B24)
        assert [B24.render(x) for x in path] == ["1110", "1101", "1011"]

    def test_identity(self):
        assert routing_path(0o1234, 0o1234) == [0o1234]

    def test_no_overlap(self):
        path = routing_path(0, B24.parse("1111"), B24)
        assert [B24.render(x) for x in path] == ["0000", "0001", "0011", "0111", "1111"]

    def test_suffix_overlap(self):
        assert suffix_overlap(B24.parse("1110"), B24.parse("1011"), B24) == 2
        assert suffix_overlap(0o12345670, 0o12345670) == 8
        assert suffix_overlap(0, B24.parse("1111"), B24) == 0

    def test_random_pairs_follow_edges(self):
        rng = random.Random(11)
        for _ in range(10_000):
            src = rng.randrange(DEFAULT_RING.n)
            dst = rng.randrange(DEFAULT_RING.n)
            path = routing_path(src, dst)
            assert path[0] == src and path[-1] == dst
            assert len(path) - 1 <= 8
            assert len(path) == 8 - suffix_overlap(src, dst) + 1
            for a, b in zip(path, path[1:]):
                assert b in out_neighbors(a)

    @pytest.mark.parametrize("ring", [B23, B24])
    def test_never_shorter_than_shortest_path(self, ring):
        for src in range(ring.n):
            for dst in range(ring.n):
                assert len(routing_path(src, dst, ring)) - 1 >= bfs_distance(src, dst, ring)


class TestZones:
    def test_contains_plain(self):
        assert zone_contains(z("00000000-37777777"), 0o25252525)

    def test_contains_wrap(self):
        assert zone_contains(z("77000000-00777777"), 0)
        assert not zone_contains(z("77000000-00777777"), 0o40000000)

    def test_full_ring_contains_everything(self):
        assert zone_contains(full_zone(), 0o77777777)

    def test_make_zone_normalises_full_arc(self):
        assert make_zone(5, 4) == full_zone()

    def test_covers(self):
        assert zone_covers(z("00000000-37777777"), z("10000000-17777777"))
        assert not zone_covers(z("10000000-17777777"), z("00000000-37777777"))
        assert zone_covers(z("70000000-07777777"), z("77000000-00000007"))

    def test_split_full_ring(self):
        kept, given = split_zone(full_zone(), 0o25252525)
        assert kept == z("00000000-37777777")
        assert given == z("40000000-77777777")

    def test_split_odd_size(self):
        kept, given = split_zone(z("00000000-00000002"), 0)
        assert kept == z("00000000-00000001")
        assert given == z("00000002-00000002")

    def test_split_keeps_owner_half(self):
        kept, given = split_zone(full_zone(), 0o60000000)
        assert zone_contains(kept, 0o60000000)
        assert not zone_contains(given, 0o60000000)

    def test_split_single_label(self):
        with pytest.raises(ZoneTooSmallError):
            split_zone(z("00000005-00000005"), 5)

    def test_merge(self):
        assert merge_zones(z("00000000-07777777"), z("10000000-17777777")) == z("00000000-17777777")

    def test_merge_across_zero(self):
        merged = merge_zones(z("70000000-77777777"), z("00000000-07777777"))
        assert merged == Zone(0o70000000, 0o07777777)
        assert zone_size(merged) == 2 * 8 ** 7

    def test_merge_non_adjacent(self):
        with pytest.raises(MergeError):
            merge_zones(z("00000000-07777777"), z("20000000-27777777"))

    def test_merge_overlapping(self):
        with pytest.raises(MergeError):
            merge_zones(z("00000000-17777777"), z("10000000-27777777"))

    def test_merge_to_full_ring(self):
        assert merge_zones(z("00000000-37777777"), z("40000000-77777777")) == full_zone()

    def test_split_then_merge_restores(self):
        rng = random.Random(3)
        for _ in range(1000):
            start = rng.randrange(DEFAULT_RING.n)
            size = rng.randint(2, DEFAULT_RING.n - 1)
            zone = make_zone(start, start + size - 1)
            owner = (start + rng.randrange(size)) % DEFAULT_RING.n
            kept, given = split_zone(zone, owner)
            assert zone_size(kept) + zone_size(given) == size
            assert merge_zones(kept, given) == zone

    def test_parse_zone_needs_separator(self):
        with pytest.raises(LabelFormatError):
            parse_zone("00000000")


class TestHasEdge:
    def test_large_zones_link_both_ways(self):
        a, b = z("00000000-17777777"), z("40000000-77777777")
        assert has_edge(a, b)
        assert has_edge(b, a)

    def test_small_zone_to_neighbor(self):
        assert has_edge(z("00000000-00777777"), z("01000000-01777777"))

    def test_no_reverse_edge(self):
        assert not has_edge(z("01000000-01777777"), z("00000000-00777777"))

    @pytest.mark.parametrize("ring", [B24, B25])
    def test_matches_brute_force(self, ring):
        rng = random.Random(ring.d)
        for _ in range(250):
            zones = random_partition(ring, rng)
            for a in zones:
                for b in zones:
                    assert has_edge(a, b, ring) == brute_edge(a, b, ring), (a, b)

    def test_edge_label_arcs_cover_successors(self):
        zone = z("12340000-12347777")
        (start, count), = edge_label_arcs(zone)
        arc = make_zone(start, start + count - 1)
        for x in (zone.start, zone.end, zone.start + 100):
            assert all(zone_contains(arc, y) for y in out_neighbors(x))

    def test_edge_label_arcs_of_big_zone(self):
        assert edge_label_arcs(z("00000000-17777777")) == [(0, DEFAULT_RING.n)]
