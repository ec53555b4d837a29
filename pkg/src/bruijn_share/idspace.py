"""Virtual ID ring arithmetic for the de Bruijn overlay.

Labels are plain integers in [0, N). Zones are inclusive circular arcs of the
ring. Everything here is pure and takes the ring parameters explicitly.
"""
from __future__ import annotations

import hashlib
import random
import string
from dataclasses import dataclass

Label = int

_DIGITS = string.digits + string.ascii_lowercase


class UnsupportedRingError(ValueError):
    """Raised when a digest cannot be mapped onto the ring."""


class ZoneTooSmallError(ValueError):
    """Raised when a zone of size one is asked to split."""


class MergeError(ValueError):
    """Raised when two zones are not disjoint neighbours on the ring."""


class LabelFormatError(ValueError):
    """Raised when a rendered label cannot be parsed."""


@dataclass(frozen=True)
class RingParams:
    """Radix K and label length D of the graph B(K, D)."""

    k: int = 8
    d: int = 8

    def __post_init__(self) -> None:
        if self.k < 2 or self.k > len(_DIGITS):
            raise ValueError(f"radix must be in [2, {len(_DIGITS)}], got {self.k}")
        if self.d < 1:
            raise ValueError(f"label length must be >= 1, got {self.d}")

    @property
    def n(self) -> int:
        return self.k ** self.d

    @property
    def m(self) -> int:
        """Modulus of the (D-1)-digit suffix space."""
        return self.k ** (self.d - 1)

    def render(self, label: Label) -> str:
        if not 0 <= label < self.n:
            raise LabelFormatError(f"label {label} outside ring of size {self.n}")
        digits = []
        for _ in range(self.d):
            label, rem = divmod(label, self.k)
            digits.append(_DIGITS[rem])
        return "".join(reversed(digits))

    def parse(self, text: str) -> Label:
        if len(text) != self.d:
            raise LabelFormatError(f"label {text!r} must have exactly {self.d} digits")
        value = 0
        for ch in text.lower():
            digit = _DIGITS.find(ch)
            if digit < 0 or digit >= self.k:
                raise LabelFormatError(f"label {text!r} has a digit outside base {self.k}")
            value = value * self.k + digit
        return value


DEFAULT_RING = RingParams()


@dataclass(frozen=True)
class Zone:
    """Inclusive circular arc [start, end]; ``full_ring`` marks the whole ring."""

    start: Label
    end: Label
    full_ring: bool = False


def make_zone(start: Label, end: Label, ring: RingParams = DEFAULT_RING) -> Zone:
    """Build a zone, normalising any arc that covers the ring to the full-ring form."""
    start %= ring.n
    end %= ring.n
    if (end - start) % ring.n + 1 == ring.n:
        return full_zone(ring)
    return Zone(start, end)


def full_zone(ring: RingParams = DEFAULT_RING) -> Zone:
    return Zone(0, ring.n - 1, full_ring=True)


def zone_size(zone: Zone, ring: RingParams = DEFAULT_RING) -> int:
    if zone.full_ring:
        return ring.n
    return (zone.end - zone.start) % ring.n + 1


def zone_contains(zone: Zone, label: Label, ring: RingParams = DEFAULT_RING) -> bool:
    if zone.full_ring:
        return True
    return (label - zone.start) % ring.n <= (zone.end - zone.start) % ring.n


def zones_overlap(a: Zone, b: Zone, ring: RingParams = DEFAULT_RING) -> bool:
    return zone_contains(a, b.start, ring) or zone_contains(b, a.start, ring)


def zone_covers(outer: Zone, inner: Zone, ring: RingParams = DEFAULT_RING) -> bool:
    """True when every label of ``inner`` lies in ``outer``."""
    if outer.full_ring:
        return True
    if inner.full_ring:
        return False
    offset = (inner.start - outer.start) % ring.n
    return offset + zone_size(inner, ring) <= zone_size(outer, ring)


def successor_label(zone: Zone, ring: RingParams = DEFAULT_RING) -> Label:
    return (zone.end + 1) % ring.n


def predecessor_label(zone: Zone, ring: RingParams = DEFAULT_RING) -> Label:
    return (zone.start - 1) % ring.n


def random_label_in(zone: Zone, rng: random.Random, ring: RingParams = DEFAULT_RING) -> Label:
    return (zone.start + rng.randrange(zone_size(zone, ring))) % ring.n


def split_zone(zone: Zone, owner_id: Label, ring: RingParams = DEFAULT_RING) -> tuple[Zone, Zone]:
    """Halve ``zone``; return (kept, given) where kept holds ``owner_id``.

    The first half takes the extra label of an odd-sized zone.
    """
    size = zone_size(zone, ring)
    if size < 2:
        raise ZoneTooSmallError(f"zone {format_zone(zone, ring)} has a single label")
    mid = (zone.start + (size - 1) // 2) % ring.n
    first = make_zone(zone.start, mid, ring)
    second = make_zone(mid + 1, zone.end, ring)
    if zone_contains(first, owner_id, ring):
        return first, second
    return second, first


def merge_zones(a: Zone, b: Zone, ring: RingParams = DEFAULT_RING) -> Zone:
    if a.full_ring or b.full_ring or zones_overlap(a, b, ring):
        raise MergeError(f"zones {format_zone(a, ring)} and {format_zone(b, ring)} overlap")
    if (a.end + 1) % ring.n == b.start:
        return make_zone(a.start, b.end, ring)
    if (b.end + 1) % ring.n == a.start:
        return make_zone(b.start, a.end, ring)
    raise MergeError(f"zones {format_zone(a, ring)} and {format_zone(b, ring)} are not adjacent")


def are_adjacent(a: Zone, b: Zone, ring: RingParams = DEFAULT_RING) -> bool:
    if a.full_ring or b.full_ring or zones_overlap(a, b, ring):
        return False
    return (a.end + 1) % ring.n == b.start or (b.end + 1) % ring.n == a.start


# -- edges -------------------------------------------------------------------


def out_neighbors(label: Label, ring: RingParams = DEFAULT_RING) -> set[Label]:
    return {(label * ring.k + digit) % ring.n for digit in range(ring.k)}


def _arcs_intersect(lo_a: int, count_a: int, lo_b: int, count_b: int, modulus: int) -> bool:
    return (lo_b - lo_a) % modulus < count_a or (lo_a - lo_b) % modulus < count_b


def suffix_arc(zone: Zone, ring: RingParams = DEFAULT_RING) -> tuple[int, int] | None:
    """(lo, count) of ``x mod M`` over the zone, or None when it covers all of M."""
    size = zone_size(zone, ring)
    if size >= ring.m:
        return None
    return zone.start % ring.m, size


def prefix_arc(zone: Zone, ring: RingParams = DEFAULT_RING) -> tuple[int, int] | None:
    """(lo, count) of ``y // K`` over the zone, or None when it covers all of M."""
    size = zone_size(zone, ring)
    first = zone.start // ring.k
    last = (zone.start + size - 1) // ring.k
    count = last - first + 1
    if count >= ring.m:
        return None
    return first % ring.m, count


def has_edge(zone_a: Zone, zone_b: Zone, ring: RingParams = DEFAULT_RING) -> bool:
    """True iff some virtual node of ``zone_a`` has an outgoing edge into ``zone_b``."""
    suffix = suffix_arc(zone_a, ring)
    if suffix is None:
        return True
    prefix = prefix_arc(zone_b, ring)
    if prefix is None:
        return True
    return _arcs_intersect(suffix[0], suffix[1], prefix[0], prefix[1], ring.m)


def edge_label_arcs(zone: Zone, ring: RingParams = DEFAULT_RING) -> list[tuple[Label, int]]:
    """Arcs (start, count) of labels reachable by one edge from ``zone``."""
    suffix = suffix_arc(zone, ring)
    if suffix is None:
        return [(0, ring.n)]
    lo, count = suffix
    return [((lo * ring.k) % ring.n, count * ring.k)]


# -- substring routing ---------------------------------------------------------


def suffix_overlap(src: Label, dst: Label, ring: RingParams = DEFAULT_RING) -> int:
    for overlap in range(ring.d, -1, -1):
        if src % ring.k ** overlap == dst // ring.k ** (ring.d - overlap):
            return overlap
    return 0


def routing_path(src: Label, dst: Label, ring: RingParams = DEFAULT_RING) -> list[Label]:
    """Hop labels from ``src`` to ``dst``, shifting in the non-overlapping digits of ``dst``.

    Self-loop hops are kept; callers owning consecutive labels skip over them.
    """
    overlap = suffix_overlap(src, dst, ring)
    remaining = ring.d - overlap
    path = [src]
    current = src
    for i in range(remaining):
        digit = (dst // ring.k ** (remaining - 1 - i)) % ring.k
        current = (current * ring.k + digit) % ring.n
        path.append(current)
    return path


# -- keys ----------------------------------------------------------------------


def sha1_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha1(data).hexdigest()


def label_from_key(key: str | bytes, ring: RingParams = DEFAULT_RING) -> Label:
    """Leading D*log2(K) bits of a 160-bit digest, big-endian."""
    if ring.k & (ring.k - 1):
        raise UnsupportedRingError(f"radix {ring.k} is not a power of two")
    bits = ring.d * (ring.k.bit_length() - 1)
    if bits > 160:
        raise UnsupportedRingError(f"ring needs {bits} bits, a digest has 160")
    digest = bytes.fromhex(key) if isinstance(key, str) else key
    if len(digest) != 20:
        raise UnsupportedRingError(f"expected a 20-byte digest, got {len(digest)} bytes")
    return int.from_bytes(digest, "big") >> (160 - bits)


# -- text forms ----------------------------------------------------------------


def format_zone(zone: Zone, ring: RingParams = DEFAULT_RING) -> str:
    return f"{ring.render(zone.start)}-{ring.render(zone.end)}"


def parse_zone(text: str, ring: RingParams = DEFAULT_RING) -> Zone:
    start, sep, end = text.partition("-")
    if not sep:
        raise LabelFormatError(f"zone {text!r} must look like START-END")
    return make_zone(ring.parse(start), ring.parse(end), ring)
