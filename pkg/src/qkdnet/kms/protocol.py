"""Request/response wire protocol in front of a `KeyStore`.

Request: request id (u32), verb (u8), requester node, verb body.
Response: request id (u32), status (u8; 0 = ok, else a `KmsError` code),
then either the body or an error message and a retry-after hint in
milliseconds (-1 when none).

The same bytes travel over an in-process loopback or a netsim port.
"""

from __future__ import annotations

import uuid
from enum import IntEnum
from typing import Callable

from ..core import (
    DecodeError,
    KeyEntry,
    KeyId,
    KeyMaterial,
    NodeId,
    Reader,
    Writer,
    deserialize,
    read_node,
    serialize,
    write_node,
)
from .store import ERRORS, KeyStore, KmsError, NoKeyAvailable, Qos


class Verb(IntEnum):
    OPEN_CONNECT = 1
    GET_KEY = 2
    CLOSE = 3
    GET_KEY_014 = 4
    GET_KEY_WITH_IDS = 5
    PUSH_KEY = 6


class ProtocolError(KmsError):
    code = 10


ERRORS[ProtocolError.code] = ProtocolError


def _write_suppliers(w: Writer, suppliers) -> None:
    if suppliers is None:
        w.u8(0)
        return
    w.u8(1)
    w.u32(len(suppliers))
    for sup in suppliers:
        w.text(sup)


def _read_suppliers(r: Reader):
    if not r.u8():
        return None
    return [r.text() for _ in range(r.count())]


def _write_keys(w: Writer, keys: list[tuple[KeyId, KeyMaterial]]) -> None:
    w.u32(len(keys))
    for kid, key in keys:
        w.uid(kid)
        w.octets(key.data)


def _read_keys(r: Reader) -> list[tuple[KeyId, KeyMaterial]]:
    return [(r.uid(), KeyMaterial(r.octets())) for _ in range(r.count())]


class KmsService:
    """Decodes requests, runs them against the store, encodes the answer."""

    def __init__(self, store: KeyStore) -> None:
        self.store = store

    def handle(self, request: bytes) -> bytes:
        rid = int.from_bytes(request[:4], "big") if len(request) >= 4 else 0
        out = Writer()
        out.u32(rid)
        try:
            body = self._dispatch(Reader(request[4:])) if len(request) >= 4 else None
            if body is None:
                raise ProtocolError("truncated request")
        except KmsError as exc:
            out.u8(exc.code)
            out.text(str(exc))
            retry = getattr(exc, "retry_after", None)
            out.i64(-1 if retry is None else int(retry * 1000))
            return out.getvalue()
        except (DecodeError, ValueError) as exc:
            out.u8(ProtocolError.code)
            out.text(str(exc))
            out.i64(-1)
            return out.getvalue()
        out.u8(0)
        return out.getvalue() + body

    def _dispatch(self, r: Reader) -> bytes:
        verb = r.u8()
        requester = read_node(r)
        w = Writer()
        s = self.store
        if verb == Verb.OPEN_CONNECT:
            source, dest = read_node(r), read_node(r)
            key_len = r.u32()
            rate = r.i64()
            ksid = uuid.UUID(bytes=r.octets()) if r.u8() else None
            r.done()
            qos = Qos(key_len=key_len, rate_bps=None if rate < 0 else rate)
            w.uid(s.open_connect(source, dest, qos, ksid))
        elif verb == Verb.GET_KEY:
            ksid = r.uid()
            r.done()
            key, kid = s.get_key(ksid)
            _write_keys(w, [(kid, key)])
        elif verb == Verb.CLOSE:
            ksid = r.uid()
            r.done()
            s.close(ksid)
        elif verb == Verb.GET_KEY_014:
            peer = read_node(r)
            number, size = r.u32(), r.u32()
            suppliers = _read_suppliers(r)
            r.done()
            _write_keys(w, s.get_key_014(requester, peer, number, size, suppliers))
        elif verb == Verb.GET_KEY_WITH_IDS:
            peer = read_node(r)
            ids = [r.uid() for _ in range(r.count())]
            suppliers = _read_suppliers(r)
            r.done()
            _write_keys(w, s.get_key_with_ids(requester, peer, ids, suppliers))
        elif verb == Verb.PUSH_KEY:
            supplier = r.text()
            entry = deserialize(r.octets(), KeyEntry)
            r.done()
            w.u8(1 if s.push_key(supplier, entry) else 0)
        else:
            raise ProtocolError(f"unknown verb {verb}")
        return w.getvalue()

    def serve(self, port) -> None:
        """Answer requests arriving on a netsim endpoint or port."""
        port.listen(lambda req: port.send(self.handle(req)))


class KmsClient:
    """Typed client.  `transport(request_bytes) -> response_bytes`."""

    def __init__(self, node: NodeId, transport: Callable[[bytes], bytes]) -> None:
        self.node = node
        self.transport = transport
        self._rid = 0

    @classmethod
    def loopback(cls, store: KeyStore) -> "KmsClient":
        return cls(store.node, KmsService(store).handle)

    def _call(self, verb: Verb, build: Callable[[Writer], None]) -> Reader:
        self._rid = (self._rid + 1) & 0xFFFFFFFF
        w = Writer()
        w.u32(self._rid)
        w.u8(verb)
        write_node(w, self.node)
        build(w)
        r = Reader(self.transport(w.getvalue()))
        if r.u32() != self._rid:
            raise ProtocolError("response does not match request")
        status = r.u8()
        if status:
            message, retry = r.text(), r.i64()
            cls = ERRORS.get(status, KmsError)
            if cls is NoKeyAvailable:
                raise NoKeyAvailable(message, None if retry < 0 else retry / 1000)
            raise cls(message)
        return r

    def open_connect(
        self, source: NodeId, destination: NodeId, qos: Qos = Qos(), ksid: uuid.UUID | None = None
    ) -> uuid.UUID:
        def body(w: Writer) -> None:
            write_node(w, source)
            write_node(w, destination)
            w.u32(qos.key_len)
            w.i64(-1 if qos.rate_bps is None else qos.rate_bps)
            w.u8(0 if ksid is None else 1)
            if ksid is not None:
                w.octets(ksid.bytes)

        r = self._call(Verb.OPEN_CONNECT, body)
        out = r.uid()
        r.done()
        return out

    def get_key(self, ksid: uuid.UUID) -> tuple[KeyMaterial, KeyId]:
        r = self._call(Verb.GET_KEY, lambda w: w.uid(ksid))
        [(kid, key)] = _read_keys(r)
        r.done()
        return key, kid

    def close(self, ksid: uuid.UUID) -> None:
        self._call(Verb.CLOSE, lambda w: w.uid(ksid)).done()

    def get_key_014(
        self, peer: NodeId, number: int = 1, size: int = 32, suppliers: list[str] | None = None
    ) -> list[tuple[KeyId, KeyMaterial]]:
        def body(w: Writer) -> None:
            write_node(w, peer)
            w.u32(number)
            w.u32(size)
            _write_suppliers(w, suppliers)

        r = self._call(Verb.GET_KEY_014, body)
        keys = _read_keys(r)
        r.done()
        return keys

    def get_key_with_ids(
        self, peer: NodeId, ids: list[KeyId], suppliers: list[str] | None = None
    ) -> list[tuple[KeyId, KeyMaterial]]:
        def body(w: Writer) -> None:
            write_node(w, peer)
            w.u32(len(ids))
            for kid in ids:
                w.uid(kid)
            _write_suppliers(w, suppliers)

        r = self._call(Verb.GET_KEY_WITH_IDS, body)
        keys = _read_keys(r)
        r.done()
        return keys

    def push_key(self, supplier_id: str, entry: KeyEntry) -> bool:
        def body(w: Writer) -> None:
            w.text(supplier_id)
            w.octets(serialize(entry))

        r = self._call(Verb.PUSH_KEY, body)
        fresh = r.u8() == 1
        r.done()
        return fresh
