"""Bootstrap registry: tells a newcomer its external address and a sample of peers."""
from __future__ import annotations

import logging
import random

from bruijn_share.wire import Envelope, MsgType

logger = logging.getLogger(__name__)

PEER_SAMPLE = 16
STALE_AFTER = 600.0
PRUNE_EVERY = 60.0


class RendezvousRegistry:
    """Known peers with their last registration time; O(1) removal and sampling."""

    def __init__(self, rng: random.Random | None = None, stale_after: float = STALE_AFTER) -> None:
        self.rng = rng or random.Random()
        self.stale_after = stale_after
        self._peers: list[str] = []
        self._slot: dict[str, int] = {}
        self._seen: dict[str, float] = {}
        self._last_prune = float("-inf")

    def __len__(self) -> int:
        return len(self._peers)

    def __contains__(self, address: str) -> bool:
        return address in self._slot

    def register(self, address: str, now: float) -> None:
        if address not in self._slot:
            self._slot[address] = len(self._peers)
            self._peers.append(address)
        self._seen[address] = now

    def unregister(self, address: str) -> None:
        slot = self._slot.pop(address, None)
        if slot is None:
            return
        last = self._peers.pop()
        if last != address:
            self._peers[slot] = last
            self._slot[last] = slot
        self._seen.pop(address, None)

    def prune(self, now: float) -> int:
        if now - self._last_prune < PRUNE_EVERY:
            return 0
        self._last_prune = now
        stale = [a for a, seen in self._seen.items() if now - seen > self.stale_after]
        for address in stale:
            self.unregister(address)
        if stale:
            logger.debug("pruned %d stale peers", len(stale))
        return len(stale)

    def sample(self, requester: str, now: float, limit: int = PEER_SAMPLE) -> list[str]:
        """Up to ``limit`` distinct random peers, never the requester."""
        self.prune(now)
        pool = len(self._peers) - (1 if requester in self._slot else 0)
        wanted = min(limit, pool)
        if wanted <= 0:
            return []
        if pool <= limit * 4:
            choices = [p for p in self._peers if p != requester]
            return self.rng.sample(choices, wanted)
        picked: list[str] = []
        chosen: set[str] = set()
        while len(picked) < wanted:
            peer = self._peers[self.rng.randrange(len(self._peers))]
            if peer != requester and peer not in chosen:
                chosen.add(peer)
                picked.append(peer)
        return picked

    def handle(self, env: Envelope, observed: str, now: float, address: str) -> Envelope | None:
        """Answer RDV_LIST with the observed address and a sample; record RDV_REGISTER."""
        if env.msg_type == MsgType.RDV_REGISTER:
            self.register(observed, now)
            return None
        if env.msg_type == MsgType.RDV_LIST:
            peers = self.sample(observed, now)
            return Envelope(MsgType.RDV_PEERS, sender_address=address,
                            payload={"externalAddress": observed, "peers": peers})
        logger.warning("rendezvous ignoring %s from %s", env.msg_type.value, observed)
        return None
