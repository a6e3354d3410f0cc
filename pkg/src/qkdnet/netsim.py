"""Deterministic discrete-event transport.

`Scheduler` owns virtual time.  `Network.open_channel` returns a pair of
endpoints joined by a reliable, in-order, exactly-once channel whose delivery
time is ``latency + uniform(0, jitter) + size*8/bandwidth`` plus a retransmit
penalty for every simulated loss.  A killed channel delivers and buffers
nothing; sending on it raises `ChannelDown`.

Every delivery is appended to a trace of ``(time, channel, direction, size,
payload hash)`` records; identical seeds give identical traces.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import time as _time
from dataclasses import dataclass
from typing import Any, Callable, Iterable

from .rng import Drbg

Handler = Callable[[bytes], None]


class ChannelDown(ConnectionError):
    pass


class UnknownChannel(KeyError):
    pass


class Event:
    __slots__ = ("time", "seq", "fn", "args", "cancelled")

    def __init__(self, t: float, seq: int, fn: Callable, args: tuple) -> None:
        self.time = t
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "Event") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


class Scheduler:
    """Virtual clock; events at equal times run in scheduling order.

    With ``wall_clock=True`` the run loop sleeps so that virtual seconds track
    real seconds (scaled by `speed`).
    """

    def __init__(self, *, wall_clock: bool = False, speed: float = 1.0) -> None:
        self.now = 0.0
        self._queue: list[Event] = []
        self._seq = 0
        self.wall_clock = wall_clock
        self.speed = speed
        self.events_run = 0

    def at(self, t: float, fn: Callable, *args: Any) -> Event:
        if t < self.now:
            t = self.now
        ev = Event(t, self._seq, fn, args)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def after(self, delay: float, fn: Callable, *args: Any) -> Event:
        return self.at(self.now + max(0.0, delay), fn, *args)

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def run(self, until: float | None = None) -> None:
        """Run events with time <= `until` (all events if None)."""
        start_wall = _time.monotonic()
        start_virtual = self.now
        while self._queue:
            ev = self._queue[0]
            if until is not None and ev.time > until:
                break
            heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            if self.wall_clock:
                target = start_wall + (ev.time - start_virtual) / self.speed
                delay = target - _time.monotonic()
                if delay > 0:
                    _time.sleep(delay)
            self.now = ev.time
            self.events_run += 1
            ev.fn(*ev.args)
        if until is not None and until > self.now:
            self.now = until


@dataclass(frozen=True)
class ChannelSpec:
    channel_id: str
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    bandwidth_bps: float | None = None
    loss_before_retry: float = 0.0
    retry_timeout_ms: float | None = None

    def __post_init__(self) -> None:
        if not self.channel_id:
            raise ValueError("channel_id must be non-empty")
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError(f"{self.channel_id}: latency and jitter must be non-negative")
        if self.bandwidth_bps is not None and self.bandwidth_bps <= 0:
            raise ValueError(f"{self.channel_id}: bandwidth must be positive or unlimited")
        if not 0.0 <= self.loss_before_retry < 1.0:
            raise ValueError(f"{self.channel_id}: loss_before_retry must lie in [0, 1)")

    @property
    def retry_penalty(self) -> float:
        """Seconds added per lost attempt (a retransmission timeout)."""
        if self.retry_timeout_ms is not None:
            return self.retry_timeout_ms / 1000.0
        return max(0.2, 2 * self.latency_ms / 1000.0)


class _Direction:
    __slots__ = ("busy_until", "last_delivery")

    def __init__(self) -> None:
        self.busy_until = 0.0
        self.last_delivery = 0.0


class Endpoint:
    """One side of a channel.  `address` is the local node, like an IP."""

    def __init__(self, channel: "Channel", side: int, address: str, remote_address: str) -> None:
        self.channel = channel
        self.side = side
        self.address = address
        self.remote_address = remote_address
        self._handler: Handler | None = None

    @property
    def alive(self) -> bool:
        return self.channel.alive

    def listen(self, handler: Handler) -> None:
        self._handler = handler

    def send(self, payload: bytes) -> None:
        self.channel._send(self.side, bytes(payload))

    def _deliver(self, payload: bytes) -> None:
        if self._handler is not None:
            self._handler(payload)


class Channel:
    def __init__(self, net: "Network", spec: ChannelSpec, a: str, b: str) -> None:
        self.net = net
        self.spec = spec
        self.alive = True
        self.generation = 0
        self.rng = net.rng.fork("channel:" + spec.channel_id)
        self.endpoints = (Endpoint(self, 0, a, b), Endpoint(self, 1, b, a))
        self._dirs = (_Direction(), _Direction())
        self.tamper: Callable[[int, bytes], bytes | None] | None = None
        self.sent = [0, 0]
        self.delivered = [0, 0]

    @property
    def channel_id(self) -> str:
        return self.spec.channel_id

    def _send(self, side: int, payload: bytes) -> None:
        if not self.alive:
            raise ChannelDown(self.spec.channel_id)
        sched = self.net.scheduler
        spec = self.spec
        d = self._dirs[side]
        start = max(sched.now, d.busy_until)
        tx = 0.0 if spec.bandwidth_bps is None else len(payload) * 8 / spec.bandwidth_bps
        d.busy_until = start + tx
        extra = 0.0
        if spec.loss_before_retry > 0:
            while self.rng.random() < spec.loss_before_retry:
                extra += spec.retry_penalty
        jitter = self.rng.uniform(0.0, spec.jitter_ms) / 1000.0 if spec.jitter_ms else 0.0
        t = start + tx + spec.latency_ms / 1000.0 + jitter + extra
        t = max(t, d.last_delivery)
        d.last_delivery = t
        self.sent[side] += 1
        sched.at(t, self._arrive, side, self.generation, payload)

    def _arrive(self, side: int, generation: int, payload: bytes) -> None:
        if not self.alive or generation != self.generation:
            return
        if self.tamper is not None:
            payload = self.tamper(side, payload)
            if payload is None:
                return
        self.delivered[side] += 1
        self.net._record(self, side, payload)
        self.endpoints[1 - side]._deliver(payload)

    def kill(self) -> None:
        self.alive = False
        self.generation += 1

    def heal(self) -> None:
        if self.alive:
            return
        self.alive = True
        now = self.net.scheduler.now
        self._dirs = (_Direction(), _Direction())
        for d in self._dirs:
            d.busy_until = d.last_delivery = now


class Network:
    def __init__(self, scheduler: Scheduler | None = None, seed: int | bytes | str = 0) -> None:
        self.scheduler = scheduler or Scheduler()
        self.rng = Drbg(seed).fork("netsim")
        self.channels: dict[str, Channel] = {}
        self.trace: list[str] = []
        self._trace_hash = hashlib.sha256()
        self.trace_sink: Callable[[str], None] | None = None

    def open_channel(self, spec: ChannelSpec, endpoint_a: str, endpoint_b: str) -> tuple[Endpoint, Endpoint]:
        if spec.channel_id in self.channels:
            raise ValueError(f"duplicate channel id {spec.channel_id!r}")
        ch = Channel(self, spec, endpoint_a, endpoint_b)
        self.channels[spec.channel_id] = ch
        return ch.endpoints

    def _get(self, channel_id: str) -> Channel:
        try:
            return self.channels[channel_id]
        except KeyError:
            raise UnknownChannel(channel_id) from None

    def kill(self, channel_id: str) -> None:
        self._get(channel_id).kill()

    def heal(self, channel_id: str) -> None:
        self._get(channel_id).heal()

    def channels_of(self, address: str) -> list[str]:
        return sorted(
            cid for cid, ch in self.channels.items()
            if address in (ch.endpoints[0].address, ch.endpoints[1].address)
        )

    def kill_node(self, address: str) -> None:
        for cid in self.channels_of(address):
            self.kill(cid)

    def heal_node(self, address: str) -> None:
        for cid in self.channels_of(address):
            self.heal(cid)

    def _record(self, ch: Channel, side: int, payload: bytes) -> None:
        ep = ch.endpoints[side]
        line = json.dumps(
            {
                "t": round(self.scheduler.now, 9),
                "channel": ch.channel_id,
                "dir": f"{ep.address}>{ep.remote_address}",
                "size": len(payload),
                "hash": hashlib.sha256(payload).hexdigest()[:32],
            },
            sort_keys=True,
        )
        self.trace.append(line)
        self._trace_hash.update(line.encode() + b"\n")
        if self.trace_sink is not None:
            self.trace_sink(line)

    def trace_hash(self) -> str:
        return self._trace_hash.hexdigest()


def trace_digest(lines: Iterable[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.rstrip("\n").encode() + b"\n")
    return h.hexdigest()


# --------------------------------------------------------------------------
# stream multiplexing over one endpoint


class Mux:
    """Carries several named streams over one endpoint.

    Frame: 16-bit stream-name length, name, payload.  Frames for streams
    nobody listens to are counted and dropped.
    """

    def __init__(self, endpoint: Endpoint) -> None:
        self.endpoint = endpoint
        self._ports: dict[str, "Port"] = {}
        self.unrouted = 0
        self.malformed = 0
        endpoint.listen(self._on_frame)

    @property
    def address(self) -> str:
        return self.endpoint.address

    @property
    def remote_address(self) -> str:
        return self.endpoint.remote_address

    @property
    def alive(self) -> bool:
        return self.endpoint.alive

    def port(self, stream: str) -> "Port":
        if stream not in self._ports:
            self._ports[stream] = Port(self, stream)
        return self._ports[stream]

    def _on_frame(self, frame: bytes) -> None:
        if len(frame) < 2:
            self.malformed += 1
            return
        n = int.from_bytes(frame[:2], "big")
        name = frame[2 : 2 + n]
        if len(name) != n:
            self.malformed += 1
            return
        port = self._ports.get(name.decode("utf-8", "replace"))
        if port is None:
            self.unrouted += 1
            return
        port._deliver(frame[2 + n :])


class Port:
    def __init__(self, mux: Mux, stream: str) -> None:
        self.mux = mux
        self.stream = stream
        self._prefix = len(stream.encode()).to_bytes(2, "big") + stream.encode()
        self._handler: Handler | None = None

    @property
    def address(self) -> str:
        return self.mux.address

    @property
    def remote_address(self) -> str:
        return self.mux.remote_address

    @property
    def alive(self) -> bool:
        return self.mux.alive

    def listen(self, handler: Handler) -> None:
        self._handler = handler

    def send(self, payload: bytes) -> None:
        self.mux.endpoint.send(self._prefix + payload)

    def _deliver(self, payload: bytes) -> None:
        if self._handler is not None:
            self._handler(payload)
