"""Deterministic in-memory network on a single simpy event queue."""
from __future__ import annotations

import logging
import math
import random
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field

import simpy

from bruijn_share.wire import Envelope, MsgType

logger = logging.getLogger(__name__)

Handler = Callable[[Envelope], None]


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class _Endpoint:
    handler: Handler
    alive: bool = True


@dataclass
class DelayModel:
    low: float = 0.001
    high: float = 0.005
    loss: float = 0.0


@dataclass
class SimStats:
    sent: Counter = field(default_factory=Counter)
    delivered: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    events: int = 0


class SimNetwork:
    """Message delivery and timers in virtual seconds.

    Delivery between a fixed (sender, receiver) pair is FIFO. Messages to
    stopped, crashed or unknown endpoints are dropped silently. Events due at
    the same instant fire in scheduling order.
    """

    def __init__(self, seed: int = 0, delay: DelayModel | None = None, record_events: bool = False) -> None:
        self.env = simpy.Environment()
        self.rng = random.Random(f"net:{seed}")
        self.delay = delay or DelayModel()
        self._scheduled = 0
        self._endpoints: dict[str, _Endpoint] = {}
        self._last_delivery: dict[tuple[str, str], float] = {}
        self.in_flight: Counter = Counter()
        self.stats = SimStats()
        self.event_log: list[tuple[float, str, str, str]] | None = [] if record_events else None

    @property
    def now(self) -> float:
        return float(self.env.now)

    # -- endpoints -------------------------------------------------------------

    def attach(self, address: str, handler: Handler) -> None:
        self._endpoints[address] = _Endpoint(handler)

    def detach(self, address: str) -> None:
        endpoint = self._endpoints.get(address)
        if endpoint is not None:
            endpoint.alive = False

    crash = detach

    def is_alive(self, address: str) -> bool:
        endpoint = self._endpoints.get(address)
        return endpoint is not None and endpoint.alive

    def transport(self, address: str) -> SimTransport:
        return SimTransport(self, address)

    # -- scheduling ------------------------------------------------------------

    def _push(self, delay: float, action: Callable[[], None]) -> None:
        def fire(_event: simpy.events.Event) -> None:
            self._scheduled -= 1
            self.stats.events += 1
            action()

        self._scheduled += 1
        self.env.timeout(max(delay, 0.0)).callbacks.append(fire)

    def call_later(self, delay: float, callback: Callable[[], None]) -> Timer:
        timer = Timer()

        def fire() -> None:
            if not timer.cancelled:
                callback()

        self._push(delay, fire)
        return timer

    def send(self, sender: str, receiver: str, env: Envelope) -> None:
        self.stats.sent[env.msg_type] += 1
        if self.delay.loss and self.rng.random() < self.delay.loss:
            self.stats.dropped[env.msg_type] += 1
            return
        pair = (sender, receiver)
        last = self._last_delivery.get(pair, 0.0)
        delay = max(self.rng.uniform(self.delay.low, self.delay.high), last - self.now)
        while self.now + delay < last:
            delay = math.nextafter(delay, math.inf)
        self._last_delivery[pair] = self.now + delay
        self.in_flight[env.msg_type] += 1

        def deliver() -> None:
            self.in_flight[env.msg_type] -= 1
            endpoint = self._endpoints.get(receiver)
            if endpoint is None or not endpoint.alive:
                self.stats.dropped[env.msg_type] += 1
                return
            self.stats.delivered[env.msg_type] += 1
            if self.event_log is not None:
                self.event_log.append((round(self.now, 9), env.msg_type.value, sender, receiver))
            endpoint.handler(env)

        self._push(delay, deliver)

    def in_flight_of(self, types: frozenset[MsgType]) -> int:
        return sum(self.in_flight[t] for t in types)

    # -- running ---------------------------------------------------------------

    def step(self) -> bool:
        if self.env.peek() == math.inf:
            return False
        self.env.step()
        return True

    def run_until(self, until: float) -> None:
        while self.env.peek() <= until:
            self.env.step()
        if until > self.env.now:
            # nothing is due before ``until``; this only advances the clock
            self.env.run(until=until)

    def run_until_idle(self, limit: float | None = None) -> None:
        """Drain the queue; with periodic timers pass ``limit`` to bound virtual time."""
        while self.env.peek() != math.inf:
            if limit is not None and self.env.peek() > limit:
                break
            self.env.step()

    @property
    def pending(self) -> int:
        return self._scheduled


class SimTransport:
    """One endpoint's view of the network, matching the socket transport's surface."""

    def __init__(self, net: SimNetwork, address: str) -> None:
        self.net = net
        self.address = address

    def now(self) -> float:
        return self.net.now

    def send(self, to: str, env: Envelope) -> None:
        self.net.send(self.address, to, env)

    def call_later(self, delay: float, callback: Callable[[], None]) -> Timer:
        return self.net.call_later(delay, callback)

    def spawn(self, coro) -> None:
        coro.close()
        raise NotImplementedError("the simulated transport runs no coroutines")

    def stop(self) -> None:
        self.net.detach(self.address)
