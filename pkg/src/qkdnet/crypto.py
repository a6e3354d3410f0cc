"""KEM/signature suites, hybridization, KDF combination and one-time pad.

The bundled suites ``kem-a``, ``kem-b``, ``sig-a`` and ``sig-b`` are TEST
suites built from a keyed pseudorandom permutation (a four-round Feistel
network over BLAKE2b).  They satisfy the KEM and signature interfaces and are
deterministic given the injected RNG, but they are not public-key secure: the
public key is the permutation key, so anyone holding it can decapsulate or
sign.  They exist so a full network runs with no external dependency and so
corruption, replay and key-confusion behaviour can be exercised.

`register_classical_suites` adds X25519/Ed25519 suites from the optional
``cryptography`` package behind the same interface.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Callable, Sequence

from .core import KeyMaterial

MAX_PSK_LEN = 64


class CryptoError(ValueError):
    pass


class UnknownSuite(KeyError):
    pass


# --------------------------------------------------------------------------
# keyed pseudorandom permutation


def _round(key: bytes, tag: bytes, i: int, half: bytes, out_len: int) -> bytes:
    h = hashlib.blake2b(half, key=key[:64], digest_size=64, person=tag[:16], salt=bytes([i]) * 16)
    stream = h.digest()
    while len(stream) < out_len:
        stream += hashlib.blake2b(stream, digest_size=64).digest()
    return stream[:out_len]


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def prp_encrypt(key: bytes, tag: bytes, block: bytes, rounds: int = 4) -> bytes:
    h = len(block) // 2
    left, right = block[:h], block[h:]
    for i in range(rounds):
        left, right = right, _xor(left, _round(key, tag, i, right, len(left)))
    return left + right


def prp_decrypt(key: bytes, tag: bytes, block: bytes, rounds: int = 4) -> bytes:
    n = len(block)
    # undo rounds; lengths alternate when the block length is odd
    lens = []
    h = n // 2
    ll, rl = h, n - h
    for _ in range(rounds):
        lens.append((ll, rl))
        ll, rl = rl, ll
    left, right = block[:ll], block[ll:]
    for i in reversed(range(rounds)):
        pl, pr = lens[i]
        prev_right = left
        prev_left = _xor(right, _round(key, tag, i, prev_right, pl))
        left, right = prev_left, prev_right
    return left + right


def _h(tag: bytes, *parts: bytes, n: int = 32) -> bytes:
    h = hashlib.shake_256(tag)
    for p in parts:
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return h.digest(n)


def expand(secret: bytes, n: int, context: bytes = b"") -> bytes:
    """Stretch a shared secret into an n-octet pad."""
    return _h(b"qkdnet-expand", secret, context, n=n)


def key_confirmation(secret: bytes) -> str:
    """8-octet fingerprint of a decapsulated secret, for logs only."""
    return hashlib.sha256(secret).digest()[:8].hex()


# --------------------------------------------------------------------------
# suites


@dataclass(frozen=True)
class KemSuite:
    suite_id: str
    pk_len: int
    sk_len: int
    ct_len: int
    ss_len: int

    def __post_init__(self) -> None:
        if self.ss_len < 32:
            raise ValueError("shared secrets must be at least 32 octets")

    def keygen(self, rng) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def encap(self, pk: bytes, rng) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def decap(self, sk: bytes, ct: bytes) -> bytes:
        raise NotImplementedError


@dataclass(frozen=True)
class SigSuite:
    suite_id: str
    pk_len: int
    sk_len: int
    sig_len: int

    def keygen(self, rng) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def sign(self, sk: bytes, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, pk: bytes, message: bytes, signature: bytes) -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class PrpKem(KemSuite):
    """Test KEM: ct = P_pk(r), ss = H(pk, r); the secret key derives pk."""

    def _pk(self, sk: bytes) -> bytes:
        return _h(b"kem-pk|" + self.suite_id.encode(), sk, n=self.pk_len)

    def keygen(self, rng):
        sk = rng.bytes(self.sk_len)
        return self._pk(sk), sk

    def encap(self, pk, rng):
        r = rng.bytes(self.ct_len)
        ct = prp_encrypt(pk, self.suite_id.encode(), r)
        return ct, _h(b"kem-ss|" + self.suite_id.encode(), pk, r, n=self.ss_len)

    def decap(self, sk, ct):
        pk = self._pk(sk)
        r = prp_decrypt(pk, self.suite_id.encode(), ct)
        return _h(b"kem-ss|" + self.suite_id.encode(), pk, r, n=self.ss_len)


@dataclass(frozen=True)
class PrpSig(SigSuite):
    """Test signature: sig = P_pk(H(m)); verification inverts the permutation."""

    def _pk(self, sk: bytes) -> bytes:
        return _h(b"sig-pk|" + self.suite_id.encode(), sk, n=self.pk_len)

    def keygen(self, rng):
        sk = rng.bytes(self.sk_len)
        return self._pk(sk), sk

    def _digest(self, message: bytes) -> bytes:
        return _h(b"sig-msg|" + self.suite_id.encode(), message, n=self.sig_len)

    def sign(self, sk, message):
        return prp_encrypt(self._pk(sk), self.suite_id.encode(), self._digest(message))

    def verify(self, pk, message, signature):
        if len(signature) != self.sig_len or len(pk) != self.pk_len:
            return False
        recovered = prp_decrypt(pk, self.suite_id.encode(), signature)
        return hmac.compare_digest(recovered, self._digest(message))


_KEMS: dict[str, KemSuite] = {}
_SIGS: dict[str, SigSuite] = {}


def register_kem(suite: KemSuite) -> None:
    _KEMS[suite.suite_id] = suite


def register_sig(suite: SigSuite) -> None:
    _SIGS[suite.suite_id] = suite


def get_kem(suite: str | KemSuite) -> KemSuite:
    if isinstance(suite, KemSuite):
        return suite
    try:
        return _KEMS[suite]
    except KeyError:
        raise UnknownSuite(f"unknown KEM suite {suite!r}") from None


def get_sig(suite: str | SigSuite) -> SigSuite:
    if isinstance(suite, SigSuite):
        return suite
    try:
        return _SIGS[suite]
    except KeyError:
        raise UnknownSuite(f"unknown signature suite {suite!r}") from None


def kem_suites() -> list[str]:
    return sorted(_KEMS)


def sig_suites() -> list[str]:
    return sorted(_SIGS)


register_kem(PrpKem("kem-a", pk_len=32, sk_len=32, ct_len=32, ss_len=32))
register_kem(PrpKem("kem-b", pk_len=48, sk_len=48, ct_len=48, ss_len=48))
register_sig(PrpSig("sig-a", pk_len=32, sk_len=32, sig_len=32))
register_sig(PrpSig("sig-b", pk_len=48, sk_len=48, sig_len=48))


def kem_keygen(suite, rng) -> tuple[bytes, bytes]:
    """Return (public_key, secret_key)."""
    return get_kem(suite).keygen(rng)


def kem_encap(suite, public_key: bytes, rng) -> tuple[bytes, bytes]:
    """Return (ciphertext, shared_secret)."""
    s = get_kem(suite)
    if len(public_key) != s.pk_len:
        raise CryptoError(f"{s.suite_id}: public key must be {s.pk_len} octets")
    return s.encap(public_key, rng)


def kem_decap(suite, secret_key: bytes, ciphertext: bytes) -> bytes:
    s = get_kem(suite)
    if len(secret_key) != s.sk_len:
        raise CryptoError(f"{s.suite_id}: secret key must be {s.sk_len} octets")
    if len(ciphertext) != s.ct_len:
        raise CryptoError(f"{s.suite_id}: ciphertext must be {s.ct_len} octets")
    return s.decap(secret_key, ciphertext)


def sig_keygen(suite, rng) -> tuple[bytes, bytes]:
    return get_sig(suite).keygen(rng)


def sign(suite, secret_key: bytes, message: bytes) -> bytes:
    s = get_sig(suite)
    if len(secret_key) != s.sk_len:
        raise CryptoError(f"{s.suite_id}: secret key must be {s.sk_len} octets")
    return s.sign(secret_key, message)


def verify(suite, public_key: bytes, message: bytes, signature: bytes) -> bool:
    s = get_sig(suite)
    if len(public_key) != s.pk_len or len(signature) != s.sig_len:
        return False
    return s.verify(public_key, message, signature)


def register_classical_suites() -> list[str]:
    """Register X25519 (``kem-x25519``) and Ed25519 (``sig-ed25519``) suites.

    Requires the ``cryptography`` package.  Key generation and encapsulation
    draw their private scalars from the injected RNG, so runs stay
    reproducible under a seeded generator.
    """
    from cryptography.hazmat.primitives import serialization
    from cryptography.hazmat.primitives.asymmetric import ed25519, x25519

    raw = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)

    @dataclass(frozen=True)
    class X25519Kem(KemSuite):
        def keygen(self, rng):
            sk = x25519.X25519PrivateKey.from_private_bytes(rng.bytes(32))
            return sk.public_key().public_bytes(**raw), rng_bytes(sk)

        def encap(self, pk, rng):
            eph = x25519.X25519PrivateKey.from_private_bytes(rng.bytes(32))
            ct = eph.public_key().public_bytes(**raw)
            shared = eph.exchange(x25519.X25519PublicKey.from_public_bytes(pk))
            return ct, _h(b"x25519-kem", shared, ct, pk, n=self.ss_len)

        def decap(self, sk, ct):
            priv = x25519.X25519PrivateKey.from_private_bytes(sk)
            pk = priv.public_key().public_bytes(**raw)
            try:
                shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(ct))
            except ValueError as exc:  # low-order point
                raise CryptoError(str(exc)) from exc
            return _h(b"x25519-kem", shared, ct, pk, n=self.ss_len)

    def rng_bytes(sk) -> bytes:
        return sk.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    @dataclass(frozen=True)
    class Ed25519Sig(SigSuite):
        def keygen(self, rng):
            sk = ed25519.Ed25519PrivateKey.from_private_bytes(rng.bytes(32))
            return sk.public_key().public_bytes(**raw), rng_bytes(sk)

        def sign(self, sk, message):
            return ed25519.Ed25519PrivateKey.from_private_bytes(sk).sign(message)

        def verify(self, pk, message, signature):
            from cryptography.exceptions import InvalidSignature

            try:
                ed25519.Ed25519PublicKey.from_public_bytes(pk).verify(signature, message)
            except (InvalidSignature, ValueError):
                return False
            return True

    register_kem(X25519Kem("kem-x25519", pk_len=32, sk_len=32, ct_len=32, ss_len=32))
    register_sig(Ed25519Sig("sig-ed25519", pk_len=32, sk_len=32, sig_len=64))
    return ["kem-x25519", "sig-ed25519"]


# --------------------------------------------------------------------------
# combiners


@dataclass(frozen=True)
class Psk:
    data: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) > MAX_PSK_LEN:
            raise ValueError(f"PSK longer than {MAX_PSK_LEN} octets")


def _as_bytes(k: KeyMaterial | bytes) -> bytes:
    return k.data if isinstance(k, KeyMaterial) else bytes(k)


def hybridize(keys: Sequence[KeyMaterial | bytes]) -> KeyMaterial:
    """Bytewise XOR of two or more equal-length keys."""
    if len(keys) < 2:
        raise CryptoError("hybridization needs at least two keys")
    raw = [_as_bytes(k) for k in keys]
    n = len(raw[0])
    if any(len(k) != n for k in raw):
        raise CryptoError("hybridized keys must have equal length")
    acc = 0
    for k in raw:
        acc ^= int.from_bytes(k, "big")
    return KeyMaterial(acc.to_bytes(n, "big"))


def _pad_psk(psk: Psk, n: int) -> bytes:
    return psk.data[:n].ljust(n, b"\0")


def _xor_kdf(rnd1: bytes, rnd2: bytes, psk: Psk) -> bytes:
    return _xor(_xor(rnd1, rnd2), _pad_psk(psk, len(rnd1)))


def _hkdf_kdf(rnd1: bytes, rnd2: bytes, psk: Psk) -> bytes:
    prk = hmac.new(psk.data or b"\0" * 32, rnd1 + rnd2, hashlib.sha256).digest()
    out, block, i = b"", b"", 1
    while len(out) < len(rnd1):
        block = hmac.new(prk, block + b"qkdnet-combine" + bytes([i]), hashlib.sha256).digest()
        out += block
        i += 1
    return out[: len(rnd1)]


KDFS: dict[str, Callable[[bytes, bytes, Psk], bytes]] = {
    "xor": _xor_kdf,
    "hkdf-sha256": _hkdf_kdf,
}


def kdf_combine(
    rnd1: KeyMaterial | bytes, rnd2: KeyMaterial | bytes, psk: Psk = Psk(), kdf: str = "xor"
) -> KeyMaterial:
    """KEY = KDF(RND1, RND2, PSK); default is RND1 ^ RND2 ^ pad(PSK)."""
    a, b = _as_bytes(rnd1), _as_bytes(rnd2)
    if len(a) != len(b):
        raise CryptoError("combined random numbers must have equal length")
    try:
        fn = KDFS[kdf]
    except KeyError:
        raise UnknownSuite(f"unknown KDF {kdf!r}") from None
    return KeyMaterial(fn(a, b, psk))


def otp_wrap(payload: KeyMaterial | bytes, pad: KeyMaterial | bytes) -> bytes:
    p, k = _as_bytes(payload), _as_bytes(pad)
    if len(p) != len(k):
        raise CryptoError("pad length must equal payload length")
    return _xor(p, k)


def otp_unwrap(ciphertext: bytes, pad: KeyMaterial | bytes) -> KeyMaterial:
    k = _as_bytes(pad)
    if len(ciphertext) != len(k):
        raise CryptoError("pad length must equal ciphertext length")
    return KeyMaterial(_xor(ciphertext, k))
