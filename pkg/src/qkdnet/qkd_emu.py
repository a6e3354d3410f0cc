"""Emulated key-generating link.

The initiator (the link's ``endpoint_a``) draws a key every QoS period, wraps
it under a fresh KEM encapsulation to the responder, signs the package and
sends it.  The responder verifies the signature before anything else,
unwraps, and holds the key as prepared; the two-phase handshake then stores
it on both sides or on neither.

Link type decides the label: QKD links stand in for future quantum links and
carry ``ITS \\ tags``; PQC links carry ``MC \\ tags``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from . import crypto
from .core import (
    CipherBlock,
    DecodeError,
    KeyEntry,
    KeyMaterial,
    KeyPackage,
    LinkDescriptor,
    LinkType,
    NodeId,
    PackageMeta,
    PathId,
    SigBlock,
    ValidationError,
    Validity,
    deserialize,
    new_key_id,
    serialize,
)
from .kms.store import IntegrityAlarm, KeyStore
from .netsim import Port, Scheduler
from .seclevel import SecurityExpr, its, mc
from .twophase import DATA, Coordinator, Participant

log = logging.getLogger(__name__)

DEFAULT_VALIDITY_S = 3600


class Role(Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


@dataclass(frozen=True)
class LinkCredentials:
    """Responder KEM key pair and initiator signature key pair for one link."""

    kem_suite: str
    sig_suite: str
    kem_public: bytes
    kem_secret: bytes
    sig_public: bytes
    sig_secret: bytes

    @classmethod
    def generate(cls, kem_suite: str, sig_suite: str, rng) -> "LinkCredentials":
        kpk, ksk = crypto.kem_keygen(kem_suite, rng)
        spk, ssk = crypto.sig_keygen(sig_suite, rng)
        return cls(kem_suite, sig_suite, kpk, ksk, spk, ssk)


def link_label(link_type: LinkType, side_channels: Iterable[str] = ()) -> SecurityExpr:
    if link_type == LinkType.QKD:
        return its(*side_channels)
    if link_type == LinkType.PQC:
        return mc(*side_channels)
    raise ValueError(f"link type {link_type.name} does not generate keys")


def wrap_context(rnd_id, suite_id: str) -> bytes:
    return b"wrap|" + suite_id.encode() + b"|" + rnd_id.bytes


@dataclass
class LinkStats:
    produced: int = 0
    dos: int = 0
    replays: int = 0
    aborted: int = 0
    unavailable: int = 0


@dataclass
class LinkSession:
    link: LinkDescriptor
    role: Role
    node: NodeId
    peer: NodeId
    supplier_id: str
    label: SecurityExpr
    creds: LinkCredentials
    store: KeyStore
    port: Port
    scheduler: Scheduler
    clock: Callable[[], float]
    rng: object = None
    validity_s: int = DEFAULT_VALIDITY_S
    started_at: float = 0.0
    next_emit_time: float = 0.0
    stats: LinkStats = field(default_factory=LinkStats)
    coordinator: Coordinator | None = None
    participant: Participant | None = None
    _retry_delay: float = 1.0
    _tick_event: object = None
    running: bool = True

    @property
    def produced_count(self) -> int:
        return self.stats.produced

    @property
    def kem(self) -> str:
        return self.creds.kem_suite

    @property
    def sig(self) -> str:
        return self.creds.sig_suite

    # ------------------------------------------------------------ initiator

    def _schedule(self, t: float) -> None:
        self.next_emit_time = t
        self._tick_event = self.scheduler.at(t, self._tick)

    def _tick(self) -> None:
        if not self.running:
            return
        now = self.scheduler.now
        if not self.port.alive:
            self.stats.unavailable += 1
            delay = self._retry_delay
            self._retry_delay = min(self._retry_delay * 2, 60.0)
            # one-key burst: after an outage the bucket holds at most one token
            self._schedule(max(now + delay, self.next_emit_time + self.link.key_period))
            return
        self._retry_delay = 1.0
        if self.emit_key() is None:
            self.stats.unavailable += 1
        self._schedule(max(self.next_emit_time + self.link.key_period, now))

    def build_package(self) -> tuple[KeyEntry, KeyPackage]:
        """Draw a key and produce its signed, wrapped package."""
        n = self.link.qos_key_len
        key = KeyMaterial(self.rng.bytes(n))
        kid = new_key_id(self.rng)
        ct, ss = crypto.kem_encap(self.kem, self.creds.kem_public, self.rng)
        pad = crypto.expand(ss, n, wrap_context(kid, self.kem))
        start = int(self.clock())
        validity = Validity(start, start + self.validity_s)
        body = KeyPackage(
            kid,
            (CipherBlock(self.kem, ct, crypto.otp_wrap(key, pad)),),
            PackageMeta(self.node, validity, PathId.SINGLE),
        )
        sig = crypto.sign(self.sig, self.creds.sig_secret, body.signed_body())
        pkg = KeyPackage(kid, body.ciphertexts, body.meta, (SigBlock(self.sig, sig),))
        entry = KeyEntry(kid, key, self.peer, self.supplier_id, validity, self.label)
        return entry, pkg

    def emit_key(self) -> KeyEntry | None:
        """Send one key; it reaches the local store only after the peer ACKs."""
        entry, pkg = self.build_package()

        def committed(_info: bytes) -> None:
            self.store.push_key(self.supplier_id, entry)
            self.stats.produced += 1

        def aborted(reason: str) -> None:
            self.stats.aborted += 1
            log.debug("%s: key %s discarded (%s)", self.supplier_id, entry.key_id, reason)

        ok = self.coordinator.begin(entry.key_id, [(self.port, serialize(pkg))], committed, aborted)
        return entry if ok else None

    # ------------------------------------------------------------ responder

    def _on_frame(self, frame: bytes) -> None:
        if not frame:
            return
        if self.role is Role.INITIATOR:
            self.coordinator.handle(frame)
        elif frame[0] == DATA:
            self.receive_package(frame[1:])
        else:
            self.participant.handle(frame, [self.port])

    def receive_package(self, data: bytes) -> bool:
        try:
            pkg = deserialize(data, KeyPackage)
        except (DecodeError, ValidationError, ValueError) as exc:
            self.stats.dos += 1
            log.info("%s: undecodable package dropped (%s)", self.supplier_id, exc)
            return False
        if not self._accept(pkg):
            self.stats.dos += 1
            return False
        if self.participant.seen(pkg.rnd_id) or self.store.has_key(pkg.rnd_id, self.supplier_id):
            self.stats.replays += 1
            return False
        block = pkg.ciphertexts[0]
        try:
            ss = crypto.kem_decap(self.kem, self.creds.kem_secret, block.ciphertext)
            pad = crypto.expand(ss, len(block.payload), wrap_context(pkg.rnd_id, self.kem))
            key = crypto.otp_unwrap(block.payload, pad)
        except (crypto.CryptoError, ValueError):
            self.stats.dos += 1
            return False
        if key.length != self.link.qos_key_len:
            self.stats.dos += 1
            return False
        log.debug("%s: key %s confirmation %s", self.supplier_id, pkg.rnd_id, crypto.key_confirmation(ss))
        entry = KeyEntry(pkg.rnd_id, key, self.peer, self.supplier_id, pkg.meta.validity, self.label)

        def apply() -> None:
            try:
                self.store.push_key(self.supplier_id, entry)
            except IntegrityAlarm:
                log.error("%s: conflicting copy of %s", self.supplier_id, entry.key_id)
                return
            self.stats.produced += 1

        self.participant.prepare(pkg.rnd_id, [self.port], apply)
        return True

    def _accept(self, pkg: KeyPackage) -> bool:
        if len(pkg.ciphertexts) != 1 or len(pkg.signatures) != 1:
            return False
        if pkg.meta.sender != self.peer or pkg.meta.path_id != PathId.SINGLE:
            return False
        if pkg.ciphertexts[0].suite_id != self.kem or pkg.signatures[0].suite_id != self.sig:
            return False
        return crypto.verify(self.sig, self.creds.sig_public, pkg.signed_body(), pkg.signatures[0].signature)

    def stop(self) -> None:
        self.running = False
        if self._tick_event is not None:
            self._tick_event.cancel()

    def measured_rate_bps(self) -> float:
        elapsed = self.scheduler.now - self.started_at
        if elapsed <= 0:
            return 0.0
        return self.stats.produced * 8 * self.link.qos_key_len / elapsed


def start_link(
    link: LinkDescriptor,
    port: Port,
    *,
    node: NodeId,
    store: KeyStore,
    creds: LinkCredentials,
    scheduler: Scheduler,
    rng=None,
    supplier_id: str | None = None,
    side_channels: Iterable[str] = (),
    clock: Callable[[], float] | None = None,
    validity_s: int = DEFAULT_VALIDITY_S,
    timeout: float = 10.0,
) -> LinkSession:
    """Start this endpoint's half of an emulated link over `port`.

    The initiator needs `rng`; both halves must share `creds` (distributed out
    of band).  The local store gets the supplier registered as a side effect.
    """
    if link.link_type not in (LinkType.QKD, LinkType.PQC):
        raise ValueError(f"link {link.link_id}: type {link.link_type.name} cannot be emulated")
    crypto.get_kem(creds.kem_suite)
    crypto.get_sig(creds.sig_suite)
    role = Role.INITIATOR if node == link.endpoint_a else Role.RESPONDER
    peer = link.other(node)
    supplier_id = supplier_id or f"link:{link.link_id}"
    store.register_supplier(supplier_id, peer, rate_bps=link.qos_rate_bps, key_len=link.qos_key_len)
    sess = LinkSession(
        link=link,
        role=role,
        node=node,
        peer=peer,
        supplier_id=supplier_id,
        label=link_label(link.link_type, side_channels),
        creds=creds,
        store=store,
        port=port,
        scheduler=scheduler,
        clock=clock or (lambda: scheduler.now),
        rng=rng,
        validity_s=validity_s,
        started_at=scheduler.now,
    )
    if role is Role.INITIATOR:
        if rng is None:
            raise ValueError("the initiating endpoint needs an RNG")
        sess.coordinator = Coordinator(scheduler, [port], timeout=timeout, name=supplier_id)
        sess._schedule(scheduler.now + link.key_period)
    else:
        sess.participant = Participant(ordered=True, name=supplier_id)
    port.listen(sess._on_frame)
    return sess


def emulate_link(
    link: LinkDescriptor,
    ports: tuple[Port, Port],
    stores: tuple[KeyStore, KeyStore],
    creds: LinkCredentials,
    scheduler: Scheduler,
    rng,
    **kwargs,
) -> tuple[LinkSession, LinkSession]:
    """Both halves at once; `ports` and `stores` are ordered (endpoint_a, endpoint_b)."""
    a = start_link(link, ports[0], node=link.endpoint_a, store=stores[0], creds=creds,
                   scheduler=scheduler, rng=rng, **kwargs)
    b = start_link(link, ports[1], node=link.endpoint_b, store=stores[1], creds=creds,
                   scheduler=scheduler, **kwargs)
    return a, b
