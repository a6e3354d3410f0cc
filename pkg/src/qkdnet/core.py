"""Domain types and their canonical binary encoding.

Every value that is signed, persisted or sent between nodes goes through
`serialize`/`deserialize`.  The encoding is a one-octet type tag followed by
the fields in declaration order: integers big-endian, octet strings and text
prefixed with a 32-bit big-endian length, 128-bit identifiers as 16 raw
octets, enums as one octet, sequences as a 32-bit count followed by items.
Sets are written in sorted order so the encoding does not depend on how a
value was built.
"""

from __future__ import annotations

import struct
import uuid
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable

from .seclevel import Base, SecurityExpr, SecurityLabel

DEFAULT_KEY_LEN = 32
MIN_KEY_LEN = 16
MAX_KEY_LEN = 4096

KeyId = uuid.UUID
LinkId = uuid.UUID


class ValidationError(ValueError):
    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class DecodeError(ValueError):
    pass


def new_key_id(rng) -> KeyId:
    return uuid.UUID(bytes=rng.bytes(16), version=4)


def _check_ident(field_name: str, value: str) -> None:
    if not isinstance(value, str) or not value:
        raise ValidationError(field_name, "must be a non-empty string")
    if not value.isascii() or any(c.isspace() for c in value) or "/" in value:
        raise ValidationError(field_name, f"{value!r} must be ASCII without whitespace or '/'")


class LinkType(IntEnum):
    QKD = 0
    PQC = 1
    RAW = 2
    OTHER = 3


class PathId(IntEnum):
    SINGLE = 0
    GROUND = 1
    SPACE = 2


@dataclass(frozen=True, order=True)
class NodeId:
    domain: str
    name: str

    def __post_init__(self) -> None:
        _check_ident("domain", self.domain)
        _check_ident("name", self.name)

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        domain, sep, name = text.partition("/")
        if not sep:
            raise ValidationError("node", f"{text!r} is not of the form domain/name")
        return cls(domain, name)

    def __str__(self) -> str:
        return f"{self.domain}/{self.name}"


@dataclass(frozen=True)
class KeyMaterial:
    data: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.data, (bytes, bytearray)):
            raise ValidationError("key", "must be bytes")
        object.__setattr__(self, "data", bytes(self.data))
        if not MIN_KEY_LEN <= len(self.data) <= MAX_KEY_LEN:
            raise ValidationError(
                "key", f"length {len(self.data)} outside [{MIN_KEY_LEN}, {MAX_KEY_LEN}]"
            )

    @property
    def length(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        # key bytes never end up in logs through repr
        return f"KeyMaterial(<{len(self.data)} bytes>)"


@dataclass(frozen=True)
class Validity:
    start: int
    end: int

    def __post_init__(self) -> None:
        if not (isinstance(self.start, int) and isinstance(self.end, int)):
            raise ValidationError("validity", "bounds must be integer seconds")
        if self.start >= self.end:
            raise ValidationError("validity", f"start {self.start} must precede end {self.end}")

    def contains(self, t: float) -> bool:
        return self.start <= t < self.end

    def intersect(self, other: "Validity") -> "Validity":
        return Validity(max(self.start, other.start), min(self.end, other.end))


@dataclass(frozen=True)
class KeyEntry:
    key_id: KeyId
    key: KeyMaterial
    peer: NodeId
    supplier_id: str
    validity: Validity
    label: SecurityExpr

    def __post_init__(self) -> None:
        if not isinstance(self.key_id, uuid.UUID):
            raise ValidationError("key_id", "must be a 128-bit UUID")
        if not self.supplier_id:
            raise ValidationError("supplier_id", "must be non-empty")


@dataclass(frozen=True)
class LinkDescriptor:
    link_id: LinkId
    endpoint_a: NodeId
    endpoint_b: NodeId
    link_type: LinkType
    qos_rate_bps: int
    qos_key_len: int = DEFAULT_KEY_LEN

    def __post_init__(self) -> None:
        object.__setattr__(self, "link_type", LinkType(self.link_type))
        if self.endpoint_a == self.endpoint_b:
            raise ValidationError("endpoint_b", "a link needs two distinct endpoints")
        if not MIN_KEY_LEN <= self.qos_key_len <= MAX_KEY_LEN:
            raise ValidationError("qos_key_len", f"{self.qos_key_len} outside key length bounds")
        if self.qos_rate_bps <= 0:
            raise ValidationError("qos_rate_bps", "must be positive")
        if self.qos_rate_bps * 3600 < 8 * self.qos_key_len:
            raise ValidationError("qos_rate_bps", "must yield at least one key per hour")

    @property
    def key_period(self) -> float:
        """Seconds between keys at the QoS rate."""
        return 8 * self.qos_key_len / self.qos_rate_bps

    def other(self, node: NodeId) -> NodeId:
        if node == self.endpoint_a:
            return self.endpoint_b
        if node == self.endpoint_b:
            return self.endpoint_a
        raise ValueError(f"{node} is not an endpoint of link {self.link_id}")

    def endpoints(self) -> tuple[NodeId, NodeId]:
        return (self.endpoint_a, self.endpoint_b)


@dataclass(frozen=True)
class PathSpec:
    hops: tuple[NodeId, ...]
    links: tuple[LinkId, ...]
    border_crossings: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "hops", tuple(self.hops))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "border_crossings", frozenset(self.border_crossings))
        if len(self.hops) < 2:
            raise ValidationError("hops", "a path needs at least two hops")
        if len(self.links) != len(self.hops) - 1:
            raise ValidationError("links", "need exactly one link per consecutive hop pair")
        if len(set(self.hops)) != len(self.hops):
            raise ValidationError("hops", "hops must be pairwise distinct")
        for i in self.border_crossings:
            if not 0 <= i < len(self.hops) - 1:
                raise ValidationError("border_crossings", f"index {i} out of range")

    def check_links(self, links: dict[LinkId, LinkDescriptor]) -> None:
        for i, lid in enumerate(self.links):
            desc = links.get(lid)
            if desc is None:
                raise ValidationError(f"links[{i}]", f"unknown link {lid}")
            if {self.hops[i], self.hops[i + 1]} != {desc.endpoint_a, desc.endpoint_b}:
                raise ValidationError(f"links[{i}]", "hops are not the link's endpoints")


@dataclass(frozen=True)
class CipherBlock:
    suite_id: str
    ciphertext: bytes
    payload: bytes


@dataclass(frozen=True)
class SigBlock:
    suite_id: str
    signature: bytes


@dataclass(frozen=True)
class PackageMeta:
    sender: NodeId
    validity: Validity
    path_id: PathId = PathId.SINGLE

    def __post_init__(self) -> None:
        object.__setattr__(self, "path_id", PathId(self.path_id))


@dataclass(frozen=True)
class KeyPackage:
    rnd_id: KeyId
    ciphertexts: tuple[CipherBlock, ...]
    meta: PackageMeta
    signatures: tuple[SigBlock, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ciphertexts", tuple(self.ciphertexts))
        object.__setattr__(self, "signatures", tuple(self.signatures))
        if not self.ciphertexts:
            raise ValidationError("ciphertexts", "must not be empty")

    def signed_body(self) -> bytes:
        """Canonical bytes covered by the signatures (everything but them)."""
        w = Writer()
        w.u8(_TAG_PACKAGE_BODY)
        _write_package_body(w, self)
        return w.getvalue()


@dataclass(frozen=True)
class Consumption:
    """Persistence record: a key left the store (served, paired or burned)."""

    key_id: KeyId
    supplier_id: str
    reason: str


# --------------------------------------------------------------------------
# codec


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack(">B", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack(">I", v))

    def i64(self, v: int) -> None:
        self._parts.append(struct.pack(">q", v))

    def octets(self, b: bytes) -> None:
        self.u32(len(b))
        self._parts.append(bytes(b))

    def text(self, s: str) -> None:
        self.octets(s.encode("utf-8"))

    def uid(self, u: uuid.UUID) -> None:
        self._parts.append(u.bytes)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise DecodeError("truncated input")
        out = bytes(self._data[self._pos : self._pos + n])
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def i64(self) -> int:
        return struct.unpack(">q", self._take(8))[0]

    def octets(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        try:
            return self.octets().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8 text") from exc

    def uid(self) -> uuid.UUID:
        return uuid.UUID(bytes=self._take(16))

    def count(self, max_items: int = 1 << 16) -> int:
        n = self.u32()
        if n > max_items:
            raise DecodeError(f"sequence of {n} items exceeds limit")
        return n

    def done(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing octets")


_TAG_NODE = 0x01
_TAG_KEY_ENTRY = 0x02
_TAG_LINK = 0x03
_TAG_PATH = 0x04
_TAG_PACKAGE = 0x05
_TAG_PACKAGE_BODY = 0x06
_TAG_EXPR = 0x07
_TAG_CONSUMPTION = 0x08


def write_node(w: Writer, n: NodeId) -> None:
    w.text(n.domain)
    w.text(n.name)


def read_node(r: Reader) -> NodeId:
    return NodeId(r.text(), r.text())


def write_expr(w: Writer, e: SecurityExpr) -> None:
    atoms = e.sorted_atoms()
    w.u32(len(atoms))
    for a in atoms:
        w.u8(int(a.base))
        tags = sorted(a.side_channels)
        w.u32(len(tags))
        for t in tags:
            w.text(t)


def read_expr(r: Reader) -> SecurityExpr:
    atoms = []
    for _ in range(r.count()):
        base = r.u8()
        if base not in (0, 1):
            raise DecodeError(f"bad security base {base}")
        tags = frozenset(r.text() for _ in range(r.count()))
        atoms.append(SecurityLabel(Base(base), tags))
    return SecurityExpr(frozenset(atoms))


def write_validity(w: Writer, v: Validity) -> None:
    w.i64(v.start)
    w.i64(v.end)


def read_validity(r: Reader) -> Validity:
    return Validity(r.i64(), r.i64())


def _write_package_body(w: Writer, p: KeyPackage) -> None:
    w.uid(p.rnd_id)
    w.u32(len(p.ciphertexts))
    for c in p.ciphertexts:
        w.text(c.suite_id)
        w.octets(c.ciphertext)
        w.octets(c.payload)
    write_node(w, p.meta.sender)
    write_validity(w, p.meta.validity)
    w.u8(int(p.meta.path_id))


def _write(w: Writer, value: Any) -> None:
    if isinstance(value, NodeId):
        w.u8(_TAG_NODE)
        write_node(w, value)
    elif isinstance(value, KeyEntry):
        w.u8(_TAG_KEY_ENTRY)
        w.uid(value.key_id)
        w.octets(value.key.data)
        write_node(w, value.peer)
        w.text(value.supplier_id)
        write_validity(w, value.validity)
        write_expr(w, value.label)
    elif isinstance(value, LinkDescriptor):
        w.u8(_TAG_LINK)
        w.uid(value.link_id)
        write_node(w, value.endpoint_a)
        write_node(w, value.endpoint_b)
        w.u8(int(value.link_type))
        w.i64(value.qos_rate_bps)
        w.u32(value.qos_key_len)
    elif isinstance(value, PathSpec):
        w.u8(_TAG_PATH)
        w.u32(len(value.hops))
        for h in value.hops:
            write_node(w, h)
        w.u32(len(value.links))
        for lid in value.links:
            w.uid(lid)
        crossings = sorted(value.border_crossings)
        w.u32(len(crossings))
        for i in crossings:
            w.u32(i)
    elif isinstance(value, KeyPackage):
        w.u8(_TAG_PACKAGE)
        _write_package_body(w, value)
        w.u32(len(value.signatures))
        for s in value.signatures:
            w.text(s.suite_id)
            w.octets(s.signature)
    elif isinstance(value, SecurityExpr):
        w.u8(_TAG_EXPR)
        write_expr(w, value)
    elif isinstance(value, Consumption):
        w.u8(_TAG_CONSUMPTION)
        w.uid(value.key_id)
        w.text(value.supplier_id)
        w.text(value.reason)
    else:
        raise TypeError(f"no canonical encoding for {type(value).__name__}")


def serialize(value: Any) -> bytes:
    w = Writer()
    _write(w, value)
    return w.getvalue()


def _read_package(r: Reader) -> KeyPackage:
    rnd_id = r.uid()
    blocks = tuple(
        CipherBlock(r.text(), r.octets(), r.octets()) for _ in range(r.count())
    )
    sender = read_node(r)
    validity = read_validity(r)
    path = r.u8()
    if path > max(PathId):
        raise DecodeError(f"bad path id {path}")
    meta = PackageMeta(sender, validity, PathId(path))
    sigs = tuple(SigBlock(r.text(), r.octets()) for _ in range(r.count()))
    return KeyPackage(rnd_id, blocks, meta, sigs)


def _read_link(r: Reader) -> LinkDescriptor:
    link_id = r.uid()
    a, b = read_node(r), read_node(r)
    lt = r.u8()
    if lt > max(LinkType):
        raise DecodeError(f"bad link type {lt}")
    return LinkDescriptor(link_id, a, b, LinkType(lt), r.i64(), r.u32())


def _read_path(r: Reader) -> PathSpec:
    hops = tuple(read_node(r) for _ in range(r.count()))
    links = tuple(r.uid() for _ in range(r.count()))
    crossings = frozenset(r.u32() for _ in range(r.count()))
    return PathSpec(hops, links, crossings)


def _read_entry(r: Reader) -> KeyEntry:
    return KeyEntry(
        key_id=r.uid(),
        key=KeyMaterial(r.octets()),
        peer=read_node(r),
        supplier_id=r.text(),
        validity=read_validity(r),
        label=read_expr(r),
    )


_READERS: dict[int, Callable[[Reader], Any]] = {
    _TAG_NODE: read_node,
    _TAG_KEY_ENTRY: _read_entry,
    _TAG_LINK: _read_link,
    _TAG_PATH: _read_path,
    _TAG_PACKAGE: _read_package,
    _TAG_EXPR: read_expr,
    _TAG_CONSUMPTION: lambda r: Consumption(r.uid(), r.text(), r.text()),
}


def deserialize(data: bytes, expected: type | None = None) -> Any:
    """Inverse of `serialize`; raises DecodeError/ValidationError on bad input."""
    r = Reader(data)
    tag = r.u8()
    reader = _READERS.get(tag)
    if reader is None:
        raise DecodeError(f"unknown type tag 0x{tag:02x}")
    value = reader(r)
    r.done()
    if expected is not None and not isinstance(value, expected):
        raise DecodeError(f"expected {expected.__name__}, got {type(value).__name__}")
    return value


# --------------------------------------------------------------------------
# JSON rendering (logs and CLI only; never signed)


def to_json(value: Any, *, reveal_keys: bool = False) -> Any:
    if isinstance(value, NodeId):
        return str(value)
    if isinstance(value, uuid.UUID):
        return str(value)
    if isinstance(value, SecurityExpr):
        return str(value)
    if isinstance(value, Validity):
        return {"start": value.start, "end": value.end}
    if isinstance(value, KeyMaterial):
        return value.data.hex() if reveal_keys else f"<{value.length} bytes>"
    if isinstance(value, KeyEntry):
        return {
            "key_id": str(value.key_id),
            "key": to_json(value.key, reveal_keys=reveal_keys),
            "peer": str(value.peer),
            "supplier_id": value.supplier_id,
            "validity": to_json(value.validity),
            "label": str(value.label),
        }
    if isinstance(value, LinkDescriptor):
        return {
            "link_id": str(value.link_id),
            "endpoint_a": str(value.endpoint_a),
            "endpoint_b": str(value.endpoint_b),
            "link_type": value.link_type.name,
            "qos_rate_bps": value.qos_rate_bps,
            "qos_key_len": value.qos_key_len,
        }
    if isinstance(value, PathSpec):
        return {
            "hops": [str(h) for h in value.hops],
            "links": [str(lid) for lid in value.links],
            "border_crossings": sorted(value.border_crossings),
        }
    if isinstance(value, KeyPackage):
        return {
            "rnd_id": str(value.rnd_id),
            "ciphertexts": [
                {"suite_id": c.suite_id, "ciphertext": c.ciphertext.hex(), "payload": c.payload.hex()}
                for c in value.ciphertexts
            ],
            "meta": {
                "sender": str(value.meta.sender),
                "validity": to_json(value.meta.validity),
                "path_id": value.meta.path_id.name.lower(),
            },
            "signatures": [
                {"suite_id": s.suite_id, "signature": s.signature.hex()} for s in value.signatures
            ],
        }
    raise TypeError(f"no JSON rendering for {type(value).__name__}")
