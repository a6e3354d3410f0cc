"""Random sources.

`Drbg` is a deterministic counter-mode generator over BLAKE2b used by the
simulator and the tests; `SystemRng` draws from the operating system.  Both
expose the same small surface, and components receive one of them rather
than touching a global generator.
"""

from __future__ import annotations

import hashlib
import os
import struct

_U53 = float(1 << 53)


class Drbg:
    """Seedable generator: ``blake2b(key=seed, counter)`` blocks, buffered."""

    def __init__(self, seed: bytes | int | str = 0) -> None:
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "big", signed=True)
        elif isinstance(seed, str):
            seed = seed.encode()
        self._key = hashlib.blake2b(seed, digest_size=32, person=b"qkdnet-drbg").digest()
        self._counter = 0
        self._buf = b""

    def bytes(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("negative length")
        while len(self._buf) < n:
            block = hashlib.blake2b(
                struct.pack(">Q", self._counter), key=self._key, digest_size=64
            ).digest()
            self._counter += 1
            self._buf += block
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return (int.from_bytes(self.bytes(8), "big") >> 11) / _U53

    def uniform(self, a: float, b: float) -> float:
        return a + (b - a) * self.random()

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("empty range")
        nbytes = (n.bit_length() + 7) // 8 + 1
        limit = (1 << (8 * nbytes)) // n * n
        while True:
            x = int.from_bytes(self.bytes(nbytes), "big")
            if x < limit:
                return x % n

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def fork(self, label: str) -> "Drbg":
        """Independent child stream; depends only on the parent seed and label."""
        return Drbg(hashlib.blake2b(label.encode(), key=self._key, digest_size=32).digest())


class SystemRng:
    """OS entropy.  `fork` returns another OS-backed source."""

    def bytes(self, n: int) -> bytes:
        return os.urandom(n)

    def random(self) -> float:
        return (int.from_bytes(os.urandom(8), "big") >> 11) / _U53

    def uniform(self, a: float, b: float) -> float:
        return a + (b - a) * self.random()

    def randrange(self, n: int) -> int:
        import secrets

        return secrets.randbelow(n)

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def fork(self, label: str) -> "SystemRng":
        return SystemRng()
