"""Per-node key store with session-based and fetch-based delivery."""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from ..core import (
    DEFAULT_KEY_LEN,
    Consumption,
    KeyEntry,
    KeyId,
    KeyMaterial,
    NodeId,
    deserialize,
    serialize,
)
from ..crypto import hybridize
from ..seclevel import parallel_all

log = logging.getLogger(__name__)


class KmsError(Exception):
    code = 1


class NoKeyAvailable(KmsError):
    code = 2

    def __init__(self, message: str, retry_after: float | None = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class UnknownSession(KmsError):
    code = 3


class UnknownKey(KmsError):
    code = 4


class KeyConsumed(KmsError):
    """The key was already served: handing it out again would reuse a pad."""

    code = 5


class QosUnsatisfiable(KmsError):
    code = 6


class IntegrityAlarm(KmsError):
    code = 7


class UnknownSupplier(KmsError):
    code = 8


class HybridizationError(KmsError):
    code = 9


ERRORS = {cls.code: cls for cls in (
    KmsError, NoKeyAvailable, UnknownSession, UnknownKey, KeyConsumed,
    QosUnsatisfiable, IntegrityAlarm, UnknownSupplier, HybridizationError,
)}


def owns(node: NodeId, peer: NodeId, key_id: KeyId) -> bool:
    """Direction split of a shared stream.

    Keys whose id ends in an even octet belong to the lexicographically
    smaller endpoint when it acts as master, odd ones to the other.  Two
    masters drawing concurrently from one stream therefore never pick the
    same key.
    """
    bit = key_id.bytes[-1] & 1
    return bit == (0 if node < peer else 1)


@dataclass(frozen=True)
class Qos:
    key_len: int = DEFAULT_KEY_LEN
    rate_bps: int | None = None
    suppliers: tuple[str, ...] | None = None


@dataclass
class SupplierInfo:
    supplier_id: str
    peer: NodeId
    rate_bps: int | None = None
    key_len: int = DEFAULT_KEY_LEN


@dataclass
class _Record:
    entry: KeyEntry
    seq: int
    consumed: bool = False
    reason: str = ""


@dataclass
class KeySession:
    ksid: uuid.UUID
    source: NodeId
    destination: NodeId
    qos: Qos
    suppliers: tuple[str, ...]
    served: int = 0
    open: bool = True


@dataclass(frozen=True)
class HybridPolicy:
    """How `hybridize_stores` picks one key per supplier.

    ``lowest-id`` takes the lexicographically lowest unconsumed key id of
    each supplier; ``fifo`` takes the oldest by arrival.  FIFO is what live
    bridges use: both stores receive a stream's keys in the same order, but
    not necessarily the same set at the same moment.
    """

    pairing: str = "lowest-id"
    key_len: int = DEFAULT_KEY_LEN

    def __post_init__(self) -> None:
        if self.pairing not in ("lowest-id", "fifo"):
            raise ValueError(f"unknown pairing rule {self.pairing!r}")


def hybrid_supplier_id(suppliers: Iterable[str]) -> str:
    return "hybrid:" + ",".join(sorted(suppliers))


def hybrid_key_id(key_ids: Sequence[KeyId]) -> KeyId:
    digest = hashlib.sha256(b"".join(k.bytes for k in key_ids)).digest()
    return uuid.UUID(bytes=digest[:16])


class KeyStore:
    """Thread-safe single authority for one node's keys.

    `clock` returns seconds since the Unix epoch (virtual time in
    simulations).  When `persist_path` is given every stored entry and every
    consumption is appended to that file as a length-prefixed canonical
    record, and `KeyStore.recover` rebuilds the store from it.
    """

    def __init__(
        self,
        node: NodeId,
        clock: Callable[[], float],
        persist_path: str | os.PathLike | None = None,
        rng=None,
    ) -> None:
        self.node = node
        self.clock = clock
        self.rng = rng
        self._lock = threading.RLock()
        self._suppliers: dict[str, SupplierInfo] = {}
        self._records: dict[tuple[str, KeyId], _Record] = {}
        self._by_id: dict[KeyId, list[str]] = {}
        self._fresh: dict[tuple[NodeId, str], OrderedDict[KeyId, None]] = {}
        self._sessions: dict[uuid.UUID, KeySession] = {}
        self._seq = 0
        self.consumption_log: list[tuple[float, KeyId, str, str]] = []
        self.integrity_alarms = 0
        self._observers: list[Callable[[KeyEntry], None]] = []
        self._waiters: dict[tuple[str, KeyId], list[Callable[[], None]]] = {}
        self._persist = None
        if persist_path is not None:
            self._persist = open(persist_path, "ab")

    # ------------------------------------------------------------------ setup

    def register_supplier(
        self, supplier_id: str, peer: NodeId, *, rate_bps: int | None = None, key_len: int = DEFAULT_KEY_LEN
    ) -> None:
        with self._lock:
            known = self._suppliers.get(supplier_id)
            if known is not None and known.peer != peer:
                raise ValueError(f"supplier {supplier_id} already registered for {known.peer}")
            self._suppliers[supplier_id] = SupplierInfo(supplier_id, peer, rate_bps, key_len)
            self._fresh.setdefault((peer, supplier_id), OrderedDict())

    def suppliers(self, peer: NodeId | None = None) -> list[SupplierInfo]:
        return [s for s in self._suppliers.values() if peer is None or s.peer == peer]

    def subscribe(self, callback: Callable[[KeyEntry], None]) -> None:
        """Call `callback(entry)` after every newly stored entry."""
        self._observers.append(callback)

    def when_available(self, supplier_id: str, key_id: KeyId, callback: Callable[[], None]) -> None:
        """Run `callback` once the given key is stored (now, if it already is)."""
        with self._lock:
            if (supplier_id, key_id) in self._records:
                callback()
                return
            self._waiters.setdefault((supplier_id, key_id), []).append(callback)

    def cancel_wait(self, supplier_id: str, key_id: KeyId, callback: Callable[[], None]) -> None:
        with self._lock:
            waiters = self._waiters.get((supplier_id, key_id))
            if waiters and callback in waiters:
                waiters.remove(callback)

    # ------------------------------------------------------------------ ingress

    def push_key(self, supplier_id: str, entry: KeyEntry) -> bool:
        """Store an entry; True if new, False if an identical copy was present."""
        with self._lock:
            info = self._suppliers.get(supplier_id)
            if info is None:
                raise UnknownSupplier(f"{self.node}: supplier {supplier_id!r} not registered")
            if entry.supplier_id != supplier_id:
                raise IntegrityAlarm(f"entry names supplier {entry.supplier_id!r}, pushed as {supplier_id!r}")
            if entry.peer != info.peer:
                raise IntegrityAlarm(f"supplier {supplier_id} serves {info.peer}, entry names {entry.peer}")
            key = (supplier_id, entry.key_id)
            rec = self._records.get(key)
            if rec is not None:
                if rec.entry.key.data == entry.key.data:
                    return False
                self.integrity_alarms += 1
                raise IntegrityAlarm(
                    f"{self.node}: conflicting bytes for key {entry.key_id} from {supplier_id}"
                )
            self._store(entry)
            waiters = self._waiters.pop(key, [])
        for cb in self._observers:
            cb(entry)
        for cb in waiters:
            cb()
        return True

    def _store(self, entry: KeyEntry, persist: bool = True) -> None:
        rec = _Record(entry, self._seq)
        self._seq += 1
        self._records[(entry.supplier_id, entry.key_id)] = rec
        self._by_id.setdefault(entry.key_id, []).append(entry.supplier_id)
        self._fresh.setdefault((entry.peer, entry.supplier_id), OrderedDict())[entry.key_id] = None
        if persist:
            self._write(entry)

    def _write(self, record) -> None:
        if self._persist is None:
            return
        blob = serialize(record)
        self._persist.write(len(blob).to_bytes(4, "big") + blob)
        self._persist.flush()

    def _consume(self, rec: _Record, reason: str, persist: bool = True) -> None:
        rec.consumed = True
        rec.reason = reason
        e = rec.entry
        self._fresh[(e.peer, e.supplier_id)].pop(e.key_id, None)
        self.consumption_log.append((self.clock(), e.key_id, e.supplier_id, reason))
        if persist:
            self._write(Consumption(e.key_id, e.supplier_id, reason))

    def _usable(self, rec: _Record, length: int | None, now: float) -> bool:
        if rec.consumed or not rec.entry.validity.contains(now):
            return False
        return length is None or rec.entry.key.length == length

    # ------------------------------------------------------------------ queries

    def available(
        self, peer: NodeId, supplier_id: str, length: int | None = None, *, owned: bool = False
    ) -> int:
        with self._lock:
            now = self.clock()
            n = 0
            for kid in self._fresh.get((peer, supplier_id), ()):
                rec = self._records[(supplier_id, kid)]
                if self._usable(rec, length, now) and (not owned or owns(self.node, peer, kid)):
                    n += 1
            return n

    def has_key(self, key_id: KeyId, supplier_id: str | None = None) -> bool:
        with self._lock:
            sups = self._by_id.get(key_id, [])
            return bool(sups) and (supplier_id is None or supplier_id in sups)

    def entry(self, supplier_id: str, key_id: KeyId) -> KeyEntry:
        with self._lock:
            rec = self._records.get((supplier_id, key_id))
            if rec is None:
                raise UnknownKey(f"{self.node}: no key {key_id} from {supplier_id}")
            return rec.entry

    def is_consumed(self, supplier_id: str, key_id: KeyId) -> bool:
        return self._records[(supplier_id, key_id)].consumed

    def listing(self) -> list[dict]:
        with self._lock:
            rows = sorted(self._records.values(), key=lambda r: r.seq)
            return [
                {
                    "key_id": str(r.entry.key_id),
                    "supplier": r.entry.supplier_id,
                    "peer": str(r.entry.peer),
                    "label": str(r.entry.label),
                    "consumed": r.consumed,
                }
                for r in rows
            ]

    def entries(self, supplier_id: str | None = None) -> list[KeyEntry]:
        with self._lock:
            return [
                r.entry for r in sorted(self._records.values(), key=lambda r: r.seq)
                if supplier_id is None or r.entry.supplier_id == supplier_id
            ]

    # ------------------------------------------------------------------ pads for relays

    def take_oldest(
        self, peer: NodeId, supplier_id: str, length: int, reason: str, *, owned: bool = True
    ) -> KeyEntry:
        """Consume the oldest usable key of a stream (this node's half if `owned`)."""
        with self._lock:
            now = self.clock()
            for kid in self._fresh.get((peer, supplier_id), ()):
                rec = self._records[(supplier_id, kid)]
                if self._usable(rec, length, now) and (not owned or owns(self.node, peer, kid)):
                    self._consume(rec, reason)
                    return rec.entry
            raise NoKeyAvailable(
                f"{self.node}: no {length}-octet key from {supplier_id} for {peer}",
                retry_after=self._retry_hint([supplier_id]),
            )

    def take_by_id(self, peer: NodeId, supplier_id: str, key_id: KeyId, reason: str) -> KeyEntry:
        with self._lock:
            rec = self._records.get((supplier_id, key_id))
            if rec is None or rec.entry.peer != peer:
                raise UnknownKey(f"{self.node}: no key {key_id} from {supplier_id} for {peer}")
            if rec.consumed:
                raise KeyConsumed(f"{self.node}: key {key_id} already consumed ({rec.reason})")
            if not rec.entry.validity.contains(self.clock()):
                raise UnknownKey(f"{self.node}: key {key_id} outside its validity window")
            self._consume(rec, reason)
            return rec.entry

    def burn(self, supplier_id: str, key_id: KeyId, reason: str = "burned") -> bool:
        """Mark a key consumed without serving it; False if unknown or already gone."""
        with self._lock:
            rec = self._records.get((supplier_id, key_id))
            if rec is None or rec.consumed:
                return False
            self._consume(rec, reason)
            return True

    def _retry_hint(self, suppliers: Iterable[str]) -> float | None:
        rates = [
            (self._suppliers[s].rate_bps, self._suppliers[s].key_len)
            for s in suppliers if s in self._suppliers and self._suppliers[s].rate_bps
        ]
        if not rates:
            return None
        keys_per_s = sum(r / (8 * k) for r, k in rates)
        return 1.0 / keys_per_s

    # ------------------------------------------------------------------ session (004 style)

    def _peer_of(self, source: NodeId, destination: NodeId) -> NodeId:
        if source == self.node:
            return destination
        if destination == self.node:
            return source
        raise QosUnsatisfiable(f"{self.node} is neither {source} nor {destination}")

    def open_connect(
        self, source: NodeId, destination: NodeId, qos: Qos = Qos(), ksid: uuid.UUID | None = None
    ) -> uuid.UUID:
        with self._lock:
            peer = self._peer_of(source, destination)
            candidates = [
                s for s in self.suppliers(peer)
                if s.key_len == qos.key_len and (qos.suppliers is None or s.supplier_id in qos.suppliers)
            ]
            if not candidates:
                raise QosUnsatisfiable(
                    f"{self.node}: no supplier for {peer} offers {qos.key_len}-octet keys"
                )
            if qos.rate_bps is not None:
                offered = sum(s.rate_bps or 0 for s in candidates)
                if offered < qos.rate_bps:
                    raise QosUnsatisfiable(
                        f"{self.node}: {qos.rate_bps} bit/s requested, {offered} bit/s offered"
                    )
            if ksid is None:
                ksid = uuid.UUID(bytes=self.rng.bytes(16), version=4) if self.rng else uuid.uuid4()
            elif ksid in self._sessions:
                raise UnknownSession(f"{self.node}: key stream {ksid} already used")
            self._sessions[ksid] = KeySession(
                ksid, source, destination, qos, tuple(sorted(s.supplier_id for s in candidates))
            )
            return ksid

    def get_key(self, ksid: uuid.UUID) -> tuple[KeyMaterial, KeyId]:
        """Next key of the stream: lowest unconsumed key id among its suppliers."""
        with self._lock:
            sess = self._sessions.get(ksid)
            if sess is None or not sess.open:
                raise UnknownSession(f"{self.node}: unknown key stream {ksid}")
            peer = self._peer_of(sess.source, sess.destination)
            now = self.clock()
            best: _Record | None = None
            for sup in sess.suppliers:
                for kid in self._fresh.get((peer, sup), ()):
                    rec = self._records[(sup, kid)]
                    if self._usable(rec, sess.qos.key_len, now) and (
                        best is None or kid.bytes < best.entry.key_id.bytes
                    ):
                        best = rec
            if best is None:
                raise NoKeyAvailable(
                    f"{self.node}: key stream {ksid} exhausted",
                    retry_after=self._retry_hint(sess.suppliers),
                )
            self._consume(best, f"004:{ksid}")
            sess.served += 1
            return best.entry.key, best.entry.key_id

    def close(self, ksid: uuid.UUID) -> None:
        with self._lock:
            sess = self._sessions.get(ksid)
            if sess is None or not sess.open:
                raise UnknownSession(f"{self.node}: unknown key stream {ksid}")
            sess.open = False

    # ------------------------------------------------------------------ fetch (014 style)

    def _peer_suppliers(self, peer: NodeId, suppliers: Sequence[str] | None) -> list[str]:
        sups = [s.supplier_id for s in self.suppliers(peer)]
        if suppliers is not None:
            unknown = set(suppliers) - set(sups)
            if unknown:
                raise UnknownSupplier(f"{self.node}: {sorted(unknown)} do not serve {peer}")
            sups = [s for s in sups if s in suppliers]
        return sorted(sups)

    def get_key_014(
        self,
        requester: NodeId,
        peer: NodeId,
        number: int = 1,
        size: int = DEFAULT_KEY_LEN,
        suppliers: Sequence[str] | None = None,
    ) -> list[tuple[KeyId, KeyMaterial]]:
        """Master side: fresh keys plus ids for the slave to fetch."""
        if number < 1:
            raise ValueError("number must be at least 1")
        with self._lock:
            if requester != self.node:
                raise KmsError(f"{requester} cannot fetch from {self.node}'s store")
            now = self.clock()
            picked: list[_Record] = []
            for sup in self._peer_suppliers(peer, suppliers):
                for kid in self._fresh.get((peer, sup), ()):
                    rec = self._records[(sup, kid)]
                    if self._usable(rec, size, now) and owns(self.node, peer, kid):
                        picked.append(rec)
                        if len(picked) == number:
                            break
                if len(picked) == number:
                    break
            if len(picked) < number:
                raise NoKeyAvailable(f"{self.node}: only {len(picked)} of {number} keys available")
            for rec in picked:
                self._consume(rec, "014:master")
            return [(r.entry.key_id, r.entry.key) for r in picked]

    def get_key_with_ids(
        self,
        requester: NodeId,
        peer: NodeId,
        ids: Sequence[KeyId],
        suppliers: Sequence[str] | None = None,
    ) -> list[tuple[KeyId, KeyMaterial]]:
        """Slave side: the keys the master announced, by id; all or nothing."""
        with self._lock:
            if requester != self.node:
                raise KmsError(f"{requester} cannot fetch from {self.node}'s store")
            allowed = set(self._peer_suppliers(peer, suppliers))
            now = self.clock()
            picked: list[_Record] = []
            for kid in ids:
                sups = [s for s in self._by_id.get(kid, []) if s in allowed]
                if not sups:
                    raise UnknownKey(f"{self.node}: unknown key id {kid}")
                rec = self._records[(sups[0], kid)]
                if rec.consumed or rec in picked:
                    raise KeyConsumed(f"{self.node}: key {kid} already consumed")
                if not rec.entry.validity.contains(now):
                    raise UnknownKey(f"{self.node}: key {kid} outside its validity window")
                picked.append(rec)
            for rec in picked:
                self._consume(rec, "014:slave")
            return [(r.entry.key_id, r.entry.key) for r in picked]

    # ------------------------------------------------------------------ hybridization

    def hybridize_stores(
        self, peer: NodeId, suppliers: Sequence[str], policy: HybridPolicy = HybridPolicy()
    ) -> KeyEntry:
        """Consume one key per supplier and store their XOR as a new entry.

        All-or-nothing: if any supplier lacks a usable key nothing is consumed.
        """
        # sorted so both endpoints derive the same id whatever order they list
        suppliers = sorted(set(suppliers))
        if len(suppliers) < 2:
            raise HybridizationError("hybridization needs at least two suppliers")
        with self._lock:
            for s in suppliers:
                info = self._suppliers.get(s)
                if info is None:
                    raise UnknownSupplier(f"{self.node}: supplier {s!r} not registered")
                if info.peer != peer:
                    raise HybridizationError(f"supplier {s} serves {info.peer}, not {peer}")
            now = self.clock()
            picked: list[_Record] = []
            for s in suppliers:
                usable = [
                    self._records[(s, kid)] for kid in self._fresh[(peer, s)]
                    if self._usable(self._records[(s, kid)], policy.key_len, now)
                ]
                if not usable:
                    raise NoKeyAvailable(
                        f"{self.node}: supplier {s} has no key for hybridization",
                        retry_after=self._retry_hint([s]),
                    )
                if policy.pairing == "fifo":
                    picked.append(usable[0])
                else:
                    picked.append(min(usable, key=lambda r: r.entry.key_id.bytes))
            out_supplier = hybrid_supplier_id(suppliers)
            entries = [r.entry for r in picked]
            validity = entries[0].validity
            for e in entries[1:]:
                validity = validity.intersect(e.validity)
            hybrid = KeyEntry(
                key_id=hybrid_key_id([e.key_id for e in entries]),
                key=hybridize([e.key for e in entries]),
                peer=peer,
                supplier_id=out_supplier,
                validity=validity,
                label=parallel_all([e.label for e in entries]),
            )
            for r in picked:
                self._consume(r, f"paired:{out_supplier}")
            if out_supplier not in self._suppliers:
                rates = [self._suppliers[s].rate_bps for s in suppliers]
                rate = min(rates) if all(rates) else None
                self.register_supplier(out_supplier, peer, rate_bps=rate, key_len=policy.key_len)
        self.push_key(out_supplier, hybrid)
        return hybrid

    # ------------------------------------------------------------------ persistence

    def close_file(self) -> None:
        if self._persist is not None:
            self._persist.close()
            self._persist = None

    @classmethod
    def recover(
        cls, node: NodeId, path: str | os.PathLike, clock: Callable[[], float], rng=None
    ) -> "KeyStore":
        """Rebuild a store from its append-only file and keep appending to it."""
        store = cls(node, clock, rng=rng)
        with open(path, "rb") as fh:
            data = fh.read()
        pos = 0
        while pos + 4 <= len(data):
            n = int.from_bytes(data[pos : pos + 4], "big")
            blob = data[pos + 4 : pos + 4 + n]
            if len(blob) < n:
                log.warning("%s: truncated record at offset %d ignored", node, pos)
                break
            pos += 4 + n
            rec = deserialize(blob)
            if isinstance(rec, KeyEntry):
                if rec.supplier_id not in store._suppliers:
                    store.register_supplier(rec.supplier_id, rec.peer)
                if (rec.supplier_id, rec.key_id) not in store._records:
                    store._store(rec, persist=False)
            elif isinstance(rec, Consumption):
                r = store._records.get((rec.supplier_id, rec.key_id))
                if r is not None and not r.consumed:
                    store._consume(r, rec.reason, persist=False)
        store._persist = open(path, "ab")
        return store
