"""Border-node interconnection methods.

Method 1 and 2 bridges XOR two independent key streams that connect the same
border pair (two QKD links, or two PQC-emulated links with different suites)
and expose the result as one supplier.  Methods 3 and 4 are application-level
senders and receivers exchanging signed `KeyPackage` values:

* Method 3 sends one package over a single path, encrypted independently
  under two KEM suites and signed under two signature suites.
* Method 4 sends two packages with a shared RNDID over two disjoint paths,
  each with its own KEM/signature pair, and combines the halves with
  ``kdf_combine``.

Receivers never store anything before every signature checks out.  Every
key is handed over with the coordinator/participant handshake, so a key sits
in both border stores or in neither.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import crypto
from .core import (
    DEFAULT_KEY_LEN,
    CipherBlock,
    DecodeError,
    KeyEntry,
    KeyId,
    KeyMaterial,
    KeyPackage,
    NodeId,
    PackageMeta,
    PathId,
    Reader,
    SigBlock,
    ValidationError,
    Validity,
    Writer,
    deserialize,
    new_key_id,
    serialize,
)
from .kms.store import HybridPolicy, KeyStore, NoKeyAvailable, hybrid_supplier_id
from .netsim import Port, Scheduler
from .seclevel import SecurityExpr, mc, parallel, serial
from .twophase import ABORT, DATA, Coordinator, Participant, parse_control

log = logging.getLogger(__name__)

DEFAULT_TTL = 30.0
DEFAULT_BLOCK = 50
MAX_BLOCK = 100
DEFAULT_VALIDITY_S = 3600


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# key material shared out of band


@dataclass(frozen=True)
class KemKeys:
    suite: str
    public: bytes
    secret: bytes

    @classmethod
    def generate(cls, suite: str, rng) -> "KemKeys":
        pk, sk = crypto.kem_keygen(suite, rng)
        return cls(suite, pk, sk)


@dataclass(frozen=True)
class SigKeys:
    suite: str
    public: bytes
    secret: bytes

    @classmethod
    def generate(cls, suite: str, rng) -> "SigKeys":
        pk, sk = crypto.sig_keygen(suite, rng)
        return cls(suite, pk, sk)


@dataclass(frozen=True)
class SenderProfile:
    """What a receiver knows about an allowed sender, keyed by its address."""

    node: NodeId
    address: str
    sig_publics: tuple[tuple[str, bytes], ...]


def _context(rnd_id: KeyId, suite: str) -> bytes:
    return b"border|" + suite.encode() + b"|" + rnd_id.bytes


def seal(rnd_id: KeyId, kem: KemKeys, value: bytes, rng) -> tuple[CipherBlock, bytes]:
    """Encapsulate to `kem.public` and pad `value` with the expanded secret."""
    ct, ss = crypto.kem_encap(kem.suite, kem.public, rng)
    pad = crypto.expand(ss, len(value), _context(rnd_id, kem.suite))
    return CipherBlock(kem.suite, ct, crypto.otp_wrap(value, pad)), ss


def unseal(rnd_id: KeyId, kem: KemKeys, block: CipherBlock) -> tuple[bytes, bytes]:
    ss = crypto.kem_decap(kem.suite, kem.secret, block.ciphertext)
    pad = crypto.expand(ss, len(block.payload), _context(rnd_id, kem.suite))
    return crypto.otp_unwrap(block.payload, pad).data, ss


def sign_package(pkg: KeyPackage, sigs: Sequence[SigKeys]) -> KeyPackage:
    body = pkg.signed_body()
    blocks = tuple(SigBlock(s.suite, crypto.sign(s.suite, s.secret, body)) for s in sigs)
    return KeyPackage(pkg.rnd_id, pkg.ciphertexts, pkg.meta, blocks)


def verify_package(pkg: KeyPackage, publics: Sequence[tuple[str, bytes]]) -> bool:
    """All listed signatures, in order, and nothing else."""
    if len(pkg.signatures) != len(publics):
        return False
    body = pkg.signed_body()
    return all(
        blk.suite_id == suite and crypto.verify(suite, pk, body, blk.signature)
        for blk, (suite, pk) in zip(pkg.signatures, publics)
    )


def encode_block(packages: Sequence[bytes]) -> bytes:
    w = Writer()
    w.u32(len(packages))
    for p in packages:
        w.octets(p)
    return w.getvalue()


def decode_block(data: bytes) -> list[bytes]:
    r = Reader(data)
    out = [r.octets() for _ in range(r.count(MAX_BLOCK * 4))]
    r.done()
    return out


@dataclass
class MethodCounters:
    sent: int = 0
    delivered: int = 0
    lost: int = 0
    dos: int = 0
    integrity_alarms: int = 0
    unknown_sender: int = 0
    replays: int = 0
    malformed: int = 0

    @property
    def pending(self) -> int:
        return self.sent - self.delivered - self.lost

    def as_dict(self) -> dict:
        return {
            "sent": self.sent, "delivered": self.delivered, "lost": self.lost,
            "pending": self.pending, "dos": self.dos, "integrity_alarms": self.integrity_alarms,
            "unknown_sender": self.unknown_sender, "replays": self.replays, "malformed": self.malformed,
        }


# --------------------------------------------------------------------------
# methods 1 and 2: hybrid bridges


class HybridBridge:
    """Pairs one key per input stream, oldest first, as keys arrive.

    Both border stores receive every stream in the same order, so FIFO
    pairing yields the same pairs on both sides.  If any input runs dry the
    bridge stalls; it never falls back to a single input.
    """

    def __init__(self, store: KeyStore, peer: NodeId, suppliers: Sequence[str], key_len: int = DEFAULT_KEY_LEN) -> None:
        if len(set(suppliers)) < 2:
            raise ConfigError("a bridge needs two distinct input streams")
        self.store = store
        self.peer = peer
        self.suppliers = tuple(sorted(set(suppliers)))
        self.policy = HybridPolicy(pairing="fifo", key_len=key_len)
        self.supplier_id = hybrid_supplier_id(self.suppliers)
        self.produced = 0
        rates = [s.rate_bps for s in store.suppliers(peer) if s.supplier_id in self.suppliers]
        store.register_supplier(
            self.supplier_id, peer, rate_bps=min(rates) if rates and all(rates) else None, key_len=key_len
        )
        store.subscribe(self._on_push)

    def _on_push(self, entry: KeyEntry) -> None:
        if entry.supplier_id in self.suppliers and entry.peer == self.peer:
            self.pump()

    def pump(self) -> int:
        n = 0
        while all(self.store.available(self.peer, s, self.policy.key_len) for s in self.suppliers):
            try:
                self.store.hybridize_stores(self.peer, self.suppliers, self.policy)
            except NoKeyAvailable:
                break
            n += 1
        self.produced += n
        return n


def method1_bridge(
    store_a: KeyStore, store_b: KeyStore, suppliers: Sequence[str], key_len: int = DEFAULT_KEY_LEN
) -> tuple[HybridBridge, HybridBridge]:
    """Bridge over two QKD links joining the same border pair."""
    return (
        HybridBridge(store_a, store_b.node, suppliers, key_len),
        HybridBridge(store_b, store_a.node, suppliers, key_len),
    )


def check_distinct_suites(pairs: Sequence[tuple[str, str]]) -> None:
    """Two stand-ins for independent implementations must not share a suite."""
    kems = [k for k, _ in pairs]
    sigs = [s for _, s in pairs]
    if len(set(kems)) != len(kems) or len(set(sigs)) != len(sigs):
        raise ConfigError(f"suites must differ between the two streams, got {list(pairs)}")
    for k, s in pairs:
        crypto.get_kem(k)
        crypto.get_sig(s)


def method2_bridge(
    store_a: KeyStore, store_b: KeyStore, suppliers: Sequence[str], suites: Sequence[tuple[str, str]],
    key_len: int = DEFAULT_KEY_LEN,
) -> tuple[HybridBridge, HybridBridge]:
    """Bridge over two emulated PQC links; `suites` are their (kem, sig) pairs."""
    check_distinct_suites(suites)
    return method1_bridge(store_a, store_b, suppliers, key_len)


# --------------------------------------------------------------------------
# method 3: dual-suite application border


class Method3Sender:
    """Sending side.  `receiver_kems` hold only what the sender may know (public keys)."""

    def __init__(
        self,
        node: NodeId,
        peer: NodeId,
        port: Port,
        store: KeyStore,
        scheduler: Scheduler,
        rng,
        receiver_kems: Sequence[KemKeys],
        sigs: Sequence[SigKeys],
        *,
        supplier_id: str,
        label: SecurityExpr,
        mode: str = "a",
        key_len: int = DEFAULT_KEY_LEN,
        rate_bps: int | None = None,
        timeout: float = 10.0,
        validity_s: int = DEFAULT_VALIDITY_S,
        clock: Callable[[], float] | None = None,
    ) -> None:
        if mode not in ("a", "b"):
            raise ConfigError(f"unknown method 3 mode {mode!r}")
        if len(receiver_kems) != 2 or len(sigs) != 2:
            raise ConfigError("method 3 uses exactly two KEM and two signature suites")
        check_distinct_suites([(k.suite, s.suite) for k, s in zip(receiver_kems, sigs)])
        self.node, self.peer, self.port = node, peer, port
        self.store, self.scheduler, self.rng = store, scheduler, rng
        self.kems = [KemKeys(k.suite, k.public, b"") for k in receiver_kems]
        self.sigs = list(sigs)
        self.supplier_id = supplier_id
        self.label = label
        self.mode = mode
        self.key_len = key_len
        self.rate_bps = rate_bps
        self.validity_s = validity_s
        self.clock = clock or (lambda: scheduler.now)
        self.counters = MethodCounters()
        self.coordinator = Coordinator(scheduler, [port], timeout=timeout, name=f"m3@{node}")
        self._timer = None
        store.register_supplier(supplier_id, peer, rate_bps=rate_bps, key_len=key_len)
        port.listen(self.coordinator.handle)

    def build(self) -> tuple[KeyEntry, KeyPackage]:
        rnd_id = new_key_id(self.rng)
        start = int(self.clock())
        validity = Validity(start, start + self.validity_s)
        if self.mode == "a":
            rnd = self.rng.bytes(self.key_len)
            blocks = [seal(rnd_id, k, rnd, self.rng)[0] for k in self.kems]
            key = rnd
        else:
            blocks, parts = [], []
            for k in self.kems:
                ct, ss = crypto.kem_encap(k.suite, k.public, self.rng)
                blocks.append(CipherBlock(k.suite, ct, b""))
                parts.append(crypto.expand(ss, self.key_len, _context(rnd_id, k.suite)))
            key = crypto.hybridize(parts).data
        body = KeyPackage(rnd_id, tuple(blocks), PackageMeta(self.node, validity, PathId.SINGLE))
        pkg = sign_package(body, self.sigs)
        entry = KeyEntry(rnd_id, KeyMaterial(key), self.peer, self.supplier_id, validity, self.label)
        return entry, pkg

    def send(self, count: int = 1) -> list[KeyId]:
        ids = []
        for _ in range(count):
            entry, pkg = self.build()
            self.counters.sent += 1

            def committed(_info: bytes, entry=entry) -> None:
                self.store.push_key(self.supplier_id, entry)
                self.counters.delivered += 1

            def aborted(reason: str, entry=entry) -> None:
                self.counters.lost += 1
                log.debug("m3 %s: %s lost (%s)", self.node, entry.key_id, reason)

            self.coordinator.begin(entry.key_id, [(self.port, serialize(pkg))], committed, aborted)
            ids.append(entry.key_id)
        return ids

    def start(self, until: float | None = None) -> None:
        """Send at the configured QoS rate (one key per period)."""
        if not self.rate_bps:
            raise ConfigError("no rate configured")
        period = 8 * self.key_len / self.rate_bps

        def tick() -> None:
            if until is not None and self.scheduler.now > until:
                return
            if self.port.alive:
                self.send(1)
            self._timer = self.scheduler.after(period, tick)

        self._timer = self.scheduler.after(period, tick)

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.cancel()


class Method3Receiver:
    """Receiving side; several senders may be registered, each by address."""

    def __init__(
        self,
        node: NodeId,
        store: KeyStore,
        kems: Sequence[KemKeys],
        *,
        mode: str = "a",
        key_len: int = DEFAULT_KEY_LEN,
    ) -> None:
        if mode not in ("a", "b"):
            raise ConfigError(f"unknown method 3 mode {mode!r}")
        self.node = node
        self.store = store
        self.kems = list(kems)
        self.mode = mode
        self.key_len = key_len
        self.senders: dict[str, tuple[SenderProfile, str, SecurityExpr]] = {}
        self.participant = Participant(ordered=True, name=f"m3@{node}")
        self.counters = MethodCounters()

    def register_sender(self, profile: SenderProfile, supplier_id: str, label: SecurityExpr, *, rate_bps=None) -> None:
        self.senders[profile.address] = (profile, supplier_id, label)
        self.store.register_supplier(supplier_id, profile.node, rate_bps=rate_bps, key_len=self.key_len)

    def attach(self, port: Port) -> None:
        port.listen(lambda frame: self._on_frame(frame, port))

    def _on_frame(self, frame: bytes, port: Port) -> None:
        if not frame:
            return
        if frame[0] == DATA:
            self.handle_package(frame[1:], port.remote_address, [port])
        else:
            self.participant.handle(frame, [port])

    def handle_package(self, data: bytes, source_address: str, reply_ports: Sequence[Port] = ()) -> bool:
        """Verify, decrypt and prepare one package; False if it was dropped."""
        known = self.senders.get(source_address)
        if known is None:
            self.counters.unknown_sender += 1
            log.info("m3 %s: package from unknown sender %s dropped", self.node, source_address)
            return False
        profile, supplier_id, label = known
        try:
            pkg = deserialize(data, KeyPackage)
        except (DecodeError, ValidationError, ValueError):
            self.counters.dos += 1
            return False
        if not verify_package(pkg, profile.sig_publics) or pkg.meta.sender != profile.node:
            self.counters.dos += 1
            log.info("m3 %s: signature check failed for %s", self.node, pkg.rnd_id)
            return False
        if pkg.meta.path_id != PathId.SINGLE or len(pkg.ciphertexts) != len(self.kems):
            self.counters.dos += 1
            return False
        if self.participant.seen(pkg.rnd_id) or self.store.has_key(pkg.rnd_id, supplier_id):
            self.counters.replays += 1
            return False
        try:
            recovered = []
            for kem, block in zip(self.kems, pkg.ciphertexts):
                if block.suite_id != kem.suite:
                    raise crypto.CryptoError("suite order mismatch")
                if self.mode == "a":
                    recovered.append(unseal(pkg.rnd_id, kem, block)[0])
                else:
                    ss = crypto.kem_decap(kem.suite, kem.secret, block.ciphertext)
                    recovered.append(crypto.expand(ss, self.key_len, _context(pkg.rnd_id, kem.suite)))
        except (crypto.CryptoError, ValueError):
            self.counters.dos += 1
            return False
        if self.mode == "a":
            if len(set(recovered)) != 1 or len(recovered[0]) != self.key_len:
                # one suite disagrees: denial of service, never a silent key
                self.counters.dos += 1
                self.counters.integrity_alarms += 1
                return False
            key = recovered[0]
        else:
            key = crypto.hybridize(recovered).data
        entry = KeyEntry(pkg.rnd_id, KeyMaterial(key), profile.node, supplier_id, pkg.meta.validity, label)
        self.counters.sent += 1

        def apply() -> None:
            self.store.push_key(supplier_id, entry)
            self.counters.delivered += 1

        def discard() -> None:
            self.counters.lost += 1

        self.participant.prepare(pkg.rnd_id, reply_ports, apply, discard=discard)
        return True


def method3_label(kem_tags: Sequence[Iterable[str]], mode: str = "a") -> SecurityExpr:
    """Mode a leaks RND if either suite breaks (serial); mode b needs both broken (parallel)."""
    a, b = (mc(*t) for t in kem_tags)
    return serial(a, b) if mode == "a" else parallel(a, b)


# --------------------------------------------------------------------------
# method 4: two disjoint paths


class MatchQueue:
    """Halves waiting for their partner, keyed by RNDID; thread-safe."""

    def __init__(self, ttl: float = DEFAULT_TTL) -> None:
        self.ttl = ttl
        self._pending: dict[KeyId, dict[PathId, tuple[bytes, Validity, float]]] = {}
        self._lock = threading.Lock()
        self.losses = 0

    def __len__(self) -> int:
        return len(self._pending)

    def has(self, rnd_id: KeyId, path: PathId) -> bool:
        with self._lock:
            return path in self._pending.get(rnd_id, {})

    def put(self, rnd_id: KeyId, path: PathId, value: bytes, validity: Validity, now: float):
        """Add a half; returns both halves (and drops the entry) once complete."""
        with self._lock:
            slot = self._pending.setdefault(rnd_id, {})
            if path in slot:
                return None
            slot[path] = (value, validity, now)
            if len(slot) == 2:
                del self._pending[rnd_id]
                return slot
            return None

    def discard(self, rnd_id: KeyId) -> bool:
        with self._lock:
            if self._pending.pop(rnd_id, None) is not None:
                self.losses += 1
                return True
            return False

    def purge(self, now: float) -> int:
        """Drop incomplete entries older than the TTL; they count as losses."""
        with self._lock:
            stale = [
                rid for rid, slot in self._pending.items()
                if min(t for _, _, t in slot.values()) + self.ttl <= now
            ]
            for rid in stale:
                del self._pending[rid]
            self.losses += len(stale)
            return len(stale)


@dataclass(frozen=True)
class PathConfig:
    path: PathId
    kem: KemKeys
    sig: SigKeys
    side_channels: tuple[str, ...] = ()


def method4_label(paths: Sequence[PathConfig]) -> SecurityExpr:
    labels = [mc(*p.side_channels) for p in paths]
    return parallel(labels[0], labels[1])


def _check_paths(paths: Sequence[PathConfig]) -> dict[PathId, PathConfig]:
    by = {p.path: p for p in paths}
    if set(by) != {PathId.SPACE, PathId.GROUND} or len(paths) != 2:
        raise ConfigError("method 4 needs exactly one space and one ground path")
    check_distinct_suites([(p.kem.suite, p.sig.suite) for p in paths])
    return by


class Method4Sender:
    """Sends blocks of key halves over both paths and waits for each block to settle.

    Each block models one request/response session: the next block on a
    session goes out once every key of the previous one is committed or
    aborted.  `sessions` blocks may be in flight at once.
    """

    def __init__(
        self,
        node: NodeId,
        peer: NodeId,
        ports: dict[PathId, Port],
        store: KeyStore,
        scheduler: Scheduler,
        rng,
        paths: Sequence[PathConfig],
        *,
        supplier_id: str,
        psk: crypto.Psk = crypto.Psk(),
        kdf: str = "xor",
        block_size: int = DEFAULT_BLOCK,
        key_len: int = DEFAULT_KEY_LEN,
        ttl: float = DEFAULT_TTL,
        sessions: int = 1,
        validity_s: int = DEFAULT_VALIDITY_S,
        clock: Callable[[], float] | None = None,
    ) -> None:
        if not 1 <= block_size <= MAX_BLOCK:
            raise ConfigError(f"block_size must lie in [1, {MAX_BLOCK}], got {block_size}")
        self.paths = _check_paths(paths)
        if set(ports) != set(self.paths):
            raise ConfigError("one port per path required")
        if kdf not in crypto.KDFS:
            raise ConfigError(f"unknown KDF {kdf!r}")
        self.node, self.peer, self.ports = node, peer, ports
        self.store, self.scheduler, self.rng = store, scheduler, rng
        self.supplier_id = supplier_id
        self.psk, self.kdf = psk, kdf
        self.block_size, self.key_len = block_size, key_len
        self.sessions = sessions
        self.validity_s = validity_s
        self.clock = clock or (lambda: scheduler.now)
        self.label = method4_label(paths)
        self.counters = MethodCounters()
        self.blocks_sent = 0
        self._remaining: int | None = None
        self._until: float | None = None
        control = [ports[PathId.GROUND], ports[PathId.SPACE]]
        self.coordinator = Coordinator(scheduler, control, timeout=ttl, name=f"m4@{node}")
        store.register_supplier(supplier_id, peer, key_len=key_len)
        for p in ports.values():
            p.listen(self.coordinator.handle)

    def _package(self, rnd_id: KeyId, cfg: PathConfig, rnd: bytes, validity: Validity) -> bytes:
        block, _ = seal(rnd_id, cfg.kem, rnd, self.rng)
        body = KeyPackage(rnd_id, (block,), PackageMeta(self.node, validity, cfg.path))
        return serialize(sign_package(body, [cfg.sig]))

    def send_block(self, on_settled: Callable[[], None] | None = None) -> list[KeyId]:
        """One block on both paths; `on_settled` fires when every key is decided."""
        start = int(self.clock())
        validity = Validity(start, start + self.validity_s)
        halves: dict[PathId, list[bytes]] = {PathId.SPACE: [], PathId.GROUND: []}
        ids: list[KeyId] = []
        left = [self.block_size]

        def settle() -> None:
            left[0] -= 1
            if left[0] == 0 and on_settled is not None:
                on_settled()

        for _ in range(self.block_size):
            rnd_id = new_key_id(self.rng)
            rnd1 = self.rng.bytes(self.key_len)  # space
            rnd2 = self.rng.bytes(self.key_len)  # ground
            halves[PathId.SPACE].append(self._package(rnd_id, self.paths[PathId.SPACE], rnd1, validity))
            halves[PathId.GROUND].append(self._package(rnd_id, self.paths[PathId.GROUND], rnd2, validity))
            key = crypto.kdf_combine(rnd1, rnd2, self.psk, self.kdf)
            entry = KeyEntry(rnd_id, key, self.peer, self.supplier_id, validity, self.label)

            def committed(_info: bytes, entry=entry) -> None:
                self.store.push_key(self.supplier_id, entry)
                self.counters.delivered += 1
                settle()

            def aborted(reason: str, entry=entry) -> None:
                self.counters.lost += 1
                settle()

            self.counters.sent += 1
            # transfers are armed first; the block frames follow below
            self.coordinator.begin(rnd_id, [], committed, aborted)
            ids.append(rnd_id)
        self.blocks_sent += 1
        for path in (PathId.SPACE, PathId.GROUND):
            try:
                self.ports[path].send(bytes([DATA]) + encode_block(halves[path]))
            except ConnectionError:
                log.info("m4 %s: %s path down, block half not sent", self.node, path.name.lower())
        return ids

    def run(self, blocks: int | None = None, until: float | None = None) -> None:
        """Keep `sessions` blocks in flight until `blocks` are sent or time `until`."""
        self._remaining = blocks
        self._until = until
        for _ in range(self.sessions):
            self._next()

    def stop(self) -> None:
        """Send no further blocks; blocks in flight still settle."""
        self._remaining = 0

    def _next(self) -> None:
        if self._remaining is not None:
            if self._remaining <= 0:
                return
            self._remaining -= 1
        if self._until is not None and self.scheduler.now >= self._until:
            return
        self.send_block(on_settled=lambda: self.scheduler.after(0, self._next))


class Method4Receiver:
    def __init__(
        self,
        node: NodeId,
        store: KeyStore,
        scheduler: Scheduler,
        paths: Sequence[PathConfig],
        *,
        psk: crypto.Psk = crypto.Psk(),
        kdf: str = "xor",
        ttl: float = DEFAULT_TTL,
        key_len: int = DEFAULT_KEY_LEN,
    ) -> None:
        self.paths = _check_paths(paths)
        self.node, self.store, self.scheduler = node, store, scheduler
        self.psk, self.kdf = psk, kdf
        self.key_len = key_len
        self.queue = MatchQueue(ttl)
        self.label = method4_label(paths)
        self.senders: dict[str, tuple[SenderProfile, str]] = {}
        self.participant = Participant(ordered=True, name=f"m4@{node}")
        self.counters = MethodCounters()
        self._done: set[KeyId] = set()
        self._reply: list[Port] = []

    def register_sender(self, profile: SenderProfile, supplier_id: str) -> None:
        """`profile.sig_publics` lists (suite, key) for the space then the ground path."""
        self.senders[profile.address] = (profile, supplier_id)
        self.store.register_supplier(supplier_id, profile.node, key_len=self.key_len)

    def attach(self, ports: dict[PathId, Port]) -> None:
        reply = [ports[PathId.GROUND], ports[PathId.SPACE]]
        for path, port in ports.items():
            port.listen(lambda frame, path=path, port=port: self._on_frame(frame, path, port, reply))

    def _on_frame(self, frame: bytes, path: PathId, port: Port, reply: list[Port]) -> None:
        if not frame:
            return
        if frame[0] != DATA:
            parsed = parse_control(frame)
            if parsed is not None and parsed[0] == ABORT:
                # the sender gave up; a late partner half must not complete it
                self.queue.discard(parsed[1])
                self._done.add(parsed[1])
            self.participant.handle(frame, reply)
            return
        try:
            packages = decode_block(frame[1:])
        except (DecodeError, ValueError):
            self.counters.malformed += 1
            self.counters.dos += 1
            return
        for data in packages:
            self.handle_package(data, path, port.remote_address, reply)

    def _sig_key(self, profile: SenderProfile, path: PathId) -> tuple[str, bytes]:
        return profile.sig_publics[0 if path == PathId.SPACE else 1]

    def handle_package(self, data: bytes, path: PathId, source_address: str, reply_ports: Sequence[Port] = ()) -> bool:
        known = self.senders.get(source_address)
        if known is None:
            self.counters.unknown_sender += 1
            return False
        profile, supplier_id = known
        cfg = self.paths[path]
        try:
            pkg = deserialize(data, KeyPackage)
        except (DecodeError, ValidationError, ValueError):
            self.counters.dos += 1
            return False
        if (
            not verify_package(pkg, [self._sig_key(profile, path)])
            or pkg.meta.sender != profile.node
            or pkg.meta.path_id != path
            or len(pkg.ciphertexts) != 1
            or pkg.ciphertexts[0].suite_id != cfg.kem.suite
        ):
            self.counters.dos += 1
            return False
        if pkg.rnd_id in self._done or self.queue.has(pkg.rnd_id, path) or self.store.has_key(pkg.rnd_id, supplier_id):
            self.counters.replays += 1
            return False
        try:
            rnd, _ = unseal(pkg.rnd_id, cfg.kem, pkg.ciphertexts[0])
        except (crypto.CryptoError, ValueError):
            self.counters.dos += 1
            return False
        if len(rnd) != self.key_len:
            self.counters.dos += 1
            return False
        now = self.scheduler.now
        both = self.queue.put(pkg.rnd_id, path, rnd, pkg.meta.validity, now)
        if both is None:
            self.scheduler.after(self.queue.ttl, self._purge)
            return True
        self._combine(pkg.rnd_id, both, profile.node, supplier_id, reply_ports)
        return True

    def _combine(self, rnd_id, both, sender: NodeId, supplier_id: str, reply_ports) -> None:
        self._done.add(rnd_id)
        rnd1, v1, _ = both[PathId.SPACE]
        rnd2, v2, _ = both[PathId.GROUND]
        key = crypto.kdf_combine(rnd1, rnd2, self.psk, self.kdf)
        entry = KeyEntry(rnd_id, key, sender, supplier_id, v1.intersect(v2), self.label)
        self.counters.sent += 1

        def apply() -> None:
            self.store.push_key(supplier_id, entry)
            self.counters.delivered += 1

        def discard() -> None:
            self.counters.lost += 1

        self.participant.prepare(rnd_id, reply_ports, apply, discard=discard)

    def _purge(self) -> None:
        self.queue.purge(self.scheduler.now)

    @property
    def losses(self) -> int:
        return self.queue.losses
