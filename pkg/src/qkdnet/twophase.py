"""Coordinator/participant handshake used by every key-moving protocol.

The sender (coordinator) ships data frames, waits for the receiver's ACK,
then decides: on ACK it stores its own copy and sends COMMIT; on timeout or a
dead channel it sends ABORT.  The receiver (participant) holds verified keys
as *prepared* and only stores them on COMMIT.  Decisions are retransmitted
with exponential backoff until acknowledged, so once channels heal both
stores converge: a key is in both or in neither.

COMMIT frames carry a sequence number and, in ordered mode, the participant
applies them in sequence order.  Both stores therefore see keys of one
stream in the same order, which is what FIFO pairing of two streams relies
on.

Frame layout: kind (1 octet), transfer id (16 octets), then a 64-bit
sequence number for COMMIT or free-form info for ACK.  DATA frames carry the
protocol payload after the kind octet.
"""

from __future__ import annotations

import logging
import struct
import uuid
from dataclasses import dataclass
from typing import Callable, Sequence

from .netsim import ChannelDown, Event, Port, Scheduler

log = logging.getLogger(__name__)

DATA = 0x01
ACK = 0x02
COMMIT = 0x03
COMMIT_ACK = 0x04
ABORT = 0x05
ABORT_ACK = 0x06

CONTROL_KINDS = {ACK, COMMIT_ACK, ABORT_ACK}
DECISION_KINDS = {COMMIT, ABORT}


def data_frame(payload: bytes) -> bytes:
    return bytes([DATA]) + payload


def _frame(kind: int, tid: uuid.UUID, extra: bytes = b"") -> bytes:
    return bytes([kind]) + tid.bytes + extra


def parse_control(frame: bytes) -> tuple[int, uuid.UUID, bytes] | None:
    if len(frame) < 17:
        return None
    return frame[0], uuid.UUID(bytes=frame[1:17]), frame[17:]


@dataclass
class _Transfer:
    tid: uuid.UUID
    on_commit: Callable[[bytes], None]
    on_abort: Callable[[str], None]
    timer: Event | None = None
    state: str = "sent"  # sent -> committing/aborting -> done
    decision: int = 0
    seq: int = -1
    retry_delay: float = 1.0
    retry_timer: Event | None = None


@dataclass
class Counters:
    begun: int = 0
    committed: int = 0
    aborted: int = 0

    @property
    def pending(self) -> int:
        return self.begun - self.committed - self.aborted


class Coordinator:
    """Sending side.  `control_ports` are tried in order for decisions."""

    def __init__(
        self,
        scheduler: Scheduler,
        control_ports: Sequence[Port],
        *,
        timeout: float = 10.0,
        backoff_base: float = 1.0,
        backoff_cap: float = 60.0,
        name: str = "",
    ) -> None:
        self.scheduler = scheduler
        self.control_ports = list(control_ports)
        self.timeout = timeout
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.name = name
        self.counters = Counters()
        self._live: dict[uuid.UUID, _Transfer] = {}
        self._next_seq = 0

    def outstanding(self) -> int:
        return sum(1 for t in self._live.values() if t.state == "sent")

    def undelivered_decisions(self) -> int:
        return sum(1 for t in self._live.values() if t.state != "sent")

    def begin(
        self,
        tid: uuid.UUID,
        sends: Sequence[tuple[Port, bytes]],
        on_commit: Callable[[bytes], None],
        on_abort: Callable[[str], None],
        timeout: float | None = None,
    ) -> bool:
        """Send the data frames; False if a channel was down (already aborted)."""
        if tid in self._live:
            raise ValueError(f"transfer {tid} already in progress")
        tr = _Transfer(tid, on_commit, on_abort, retry_delay=self.backoff_base)
        self._live[tid] = tr
        self.counters.begun += 1
        for port, payload in sends:
            try:
                port.send(data_frame(payload))
            except ChannelDown:
                self._abort(tr, "channel down")
                return False
        tr.timer = self.scheduler.after(
            self.timeout if timeout is None else timeout, self._on_timeout, tid
        )
        return True

    def handle(self, frame: bytes) -> None:
        parsed = parse_control(frame)
        if parsed is None:
            return
        kind, tid, extra = parsed
        tr = self._live.get(tid)
        if tr is None:
            return
        if kind == ACK and tr.state == "sent":
            if tr.timer is not None:
                tr.timer.cancel()
            tr.state = "committing"
            tr.decision = COMMIT
            tr.seq = self._next_seq
            self._next_seq += 1
            self.counters.committed += 1
            tr.on_commit(extra)
            self._send_decision(tr)
        elif kind == COMMIT_ACK and tr.decision == COMMIT:
            self._finish(tr)
        elif kind == ABORT_ACK and tr.decision == ABORT:
            self._finish(tr)

    def _finish(self, tr: _Transfer) -> None:
        if tr.retry_timer is not None:
            tr.retry_timer.cancel()
        tr.state = "done"
        del self._live[tr.tid]

    def abort(self, tid: uuid.UUID, reason: str) -> bool:
        """Abort a transfer still waiting for its ACK; False if already decided."""
        tr = self._live.get(tid)
        if tr is None or tr.state != "sent":
            return False
        self._abort(tr, reason)
        return True

    def _on_timeout(self, tid: uuid.UUID) -> None:
        tr = self._live.get(tid)
        if tr is not None and tr.state == "sent":
            self._abort(tr, "timeout")

    def _abort(self, tr: _Transfer, reason: str) -> None:
        if tr.timer is not None:
            tr.timer.cancel()
        tr.state = "aborting"
        tr.decision = ABORT
        self.counters.aborted += 1
        log.debug("%s: abort %s (%s)", self.name, tr.tid, reason)
        tr.on_abort(reason)
        self._send_decision(tr)

    def _send_decision(self, tr: _Transfer) -> None:
        if tr.tid not in self._live:
            return
        extra = struct.pack(">Q", tr.seq) if tr.decision == COMMIT else b""
        frame = _frame(tr.decision, tr.tid, extra)
        for port in self.control_ports:
            try:
                port.send(frame)
                break
            except ChannelDown:
                continue
        # retransmit until acknowledged; the frame may be lost in flight
        tr.retry_timer = self.scheduler.after(tr.retry_delay, self._send_decision, tr)
        tr.retry_delay = min(tr.retry_delay * 2, self.backoff_cap)


class Participant:
    """Receiving side.  `prepare` holds a verified key until the decision."""

    def __init__(self, *, ordered: bool = True, name: str = "") -> None:
        self.ordered = ordered
        self.name = name
        self._prepared: dict[uuid.UUID, tuple[Callable[[], None], Callable[[], None] | None]] = {}
        self._decided: dict[uuid.UUID, int] = {}
        self._buffer: dict[int, uuid.UUID] = {}
        self._next_seq = 0
        self.committed = 0
        self.aborted = 0

    def seen(self, tid: uuid.UUID) -> bool:
        return tid in self._prepared or tid in self._decided

    def prepared_count(self) -> int:
        return len(self._prepared)

    def prepare(
        self,
        tid: uuid.UUID,
        reply_ports: Sequence[Port],
        apply: Callable[[], None],
        info: bytes = b"",
        discard: Callable[[], None] | None = None,
    ) -> None:
        if self.seen(tid):
            raise ValueError(f"transfer {tid} already known")
        self._prepared[tid] = (apply, discard)
        self._reply(reply_ports, _frame(ACK, tid, info))

    def handle(self, frame: bytes, reply_ports: Sequence[Port]) -> None:
        parsed = parse_control(frame)
        if parsed is None:
            return
        kind, tid, extra = parsed
        if kind == COMMIT:
            if len(extra) != 8:
                return
            (seq,) = struct.unpack(">Q", extra)
            if tid in self._prepared:
                if self.ordered:
                    self._buffer[seq] = tid
                    self._drain()
                else:
                    self._apply(tid)
            elif tid not in self._decided:
                # never prepared here; keep the ordered stream moving
                log.warning("%s: commit for unknown transfer %s", self.name, tid)
                if self.ordered:
                    self._buffer[seq] = tid
                    self._drain()
            self._reply(reply_ports, _frame(COMMIT_ACK, tid))
        elif kind == ABORT:
            entry = self._prepared.pop(tid, None)
            if entry is not None:
                self._decided[tid] = ABORT
                self.aborted += 1
                if entry[1] is not None:
                    entry[1]()
            self._reply(reply_ports, _frame(ABORT_ACK, tid))

    def _drain(self) -> None:
        while self._next_seq in self._buffer:
            tid = self._buffer.pop(self._next_seq)
            self._next_seq += 1
            if tid in self._prepared:
                self._apply(tid)

    def _apply(self, tid: uuid.UUID) -> None:
        apply, _ = self._prepared.pop(tid)
        self._decided[tid] = COMMIT
        self.committed += 1
        apply()

    @staticmethod
    def _reply(ports: Sequence[Port], frame: bytes) -> None:
        for port in ports:
            try:
                port.send(frame)
                return
            except ChannelDown:
                continue
