"""Additively homomorphic encryption (Paillier, ``g = N + 1``).

``Enc(m) = (1 + N)^m * r^N mod N^2``; ``Refresh`` multiplies by a fresh
``r^N``. The key owner encrypts through CRT, which is roughly 4x faster.
"""
from __future__ import annotations

import hashlib
import random
import secrets
import struct
from dataclasses import dataclass, field

import gmpy2
from gmpy2 import mpz

TEST_BITS = 512
PROD_BITS = 2048
PAYLOAD_MAX = 2**32 - 1


class AheError(ValueError):
    pass


def _rng(rng):
    return rng or secrets.SystemRandom()


def _random_prime(bits: int, rng: random.Random) -> mpz:
    while True:
        cand = mpz(rng.getrandbits(bits)) | (mpz(3) << (bits - 2)) | 1
        if gmpy2.is_prime(cand, 40):
            return cand


@dataclass(frozen=True)
class PublicKey:
    n: int

    @property
    def n_square(self) -> int:
        return self.n * self.n

    @property
    def key_id(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()[:8]

    def to_bytes(self) -> bytes:
        raw = int(self.n).to_bytes((int(self.n).bit_length() + 7) // 8, "big")
        return struct.pack(">I", len(raw)) + raw

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicKey":
        (length,) = struct.unpack_from(">I", data)
        if len(data) != 4 + length:
            raise AheError("bad public key encoding")
        return cls(int.from_bytes(data[4:], "big"))

    def random_unit(self, rng=None) -> mpz:
        rng = _rng(rng)
        n = self.n
        while True:
            r = mpz(rng.randrange(1, n))
            if gmpy2.gcd(r, n) == 1:
                return r


@dataclass(frozen=True)
class Ciphertext:
    value: int
    pk: PublicKey = field(repr=False)

    @property
    def key_id(self) -> bytes:
        return self.pk.key_id

    def to_bytes(self) -> bytes:
        raw = int(self.value).to_bytes((int(self.value).bit_length() + 7) // 8 or 1, "big")
        return struct.pack(">I", len(raw)) + raw

    def body(self) -> bytes:
        return self.to_bytes()[4:]

    @classmethod
    def from_body(cls, pk: PublicKey, body: bytes) -> "Ciphertext":
        value = int.from_bytes(body, "big")
        if not 0 < value < pk.n_square:
            raise AheError("ciphertext out of range")
        return cls(value, pk)


@dataclass(frozen=True)
class SecretKey:
    p: int
    q: int
    public: PublicKey

    def __post_init__(self):
        p, q, n = mpz(self.p), mpz(self.q), mpz(self.public.n)
        lam = (p - 1) * (q - 1)
        object.__setattr__(self, "_lam", lam)
        object.__setattr__(self, "_mu", gmpy2.invert(lam, n))
        object.__setattr__(self, "_p2", p * p)
        object.__setattr__(self, "_q2", q * q)
        object.__setattr__(self, "_q2_inv", gmpy2.invert(q * q, p * p))

    def rn(self, r: mpz) -> mpz:
        """``r^N mod N^2`` through CRT."""
        n = mpz(self.public.n)
        a = gmpy2.powmod(r, n, self._p2)
        b = gmpy2.powmod(r, n, self._q2)
        return b + self._q2 * ((a - b) * self._q2_inv % self._p2)


@dataclass(frozen=True)
class AheKeypair:
    public: PublicKey
    secret: SecretKey

    @property
    def message_space(self) -> int:
        return self.public.n


def gen(security_bits: int = TEST_BITS, rng=None) -> AheKeypair:
    if security_bits not in (TEST_BITS, PROD_BITS):
        raise AheError(f"security_bits must be {TEST_BITS} (test) or {PROD_BITS} (prod)")
    rng = _rng(rng)
    half = security_bits // 2
    while True:
        p, q = _random_prime(half, rng), _random_prime(half, rng)
        n = p * q
        if p != q and n.bit_length() == security_bits:
            break
    pk = PublicKey(int(n))
    return AheKeypair(pk, SecretKey(int(p), int(q), pk))


def _check_plain(pk: PublicKey, m: int) -> None:
    if not 0 <= m < pk.n:
        raise AheError("plaintext outside the message space")


def enc(pk: PublicKey, m: int, rng=None, sk: SecretKey | None = None) -> Ciphertext:
    _check_plain(pk, m)
    n, n2 = mpz(pk.n), mpz(pk.n_square)
    r = pk.random_unit(rng)
    rn = sk.rn(r) if sk is not None else gmpy2.powmod(r, n, n2)
    return Ciphertext(int((1 + m * n) % n2 * rn % n2), pk)


def enc_payload(pk: PublicKey, m: int, rng=None, sk: SecretKey | None = None) -> Ciphertext:
    """Encrypt a protocol payload, which must fit in 32 bits."""
    if not 0 <= m <= PAYLOAD_MAX:
        raise AheError(f"payload {m} outside [0, 2^32 - 1]")
    return enc(pk, m, rng, sk)


def dec(sk: SecretKey, ct: Ciphertext) -> int:
    pk = sk.public
    if ct.pk != pk:
        raise AheError("ciphertext under a different key")
    n = mpz(pk.n)
    u = gmpy2.powmod(mpz(ct.value), sk._lam, n * n)
    return int((u - 1) // n * sk._mu % n)


def sum(cts: list[Ciphertext]) -> Ciphertext:  # noqa: A001
    if not cts:
        raise AheError("cannot sum an empty ciphertext list")
    pk = cts[0].pk
    if any(c.pk != pk for c in cts):
        raise AheError("ciphertexts under different keys")
    n2 = mpz(pk.n_square)
    acc = mpz(1)
    for c in cts:
        acc = acc * c.value % n2
    return Ciphertext(int(acc), pk)


def refresh(pk: PublicKey, ct: Ciphertext, rng=None) -> Ciphertext:
    if ct.pk != pk:
        raise AheError("ciphertext under a different key")
    n, n2 = mpz(pk.n), mpz(pk.n_square)
    rn = gmpy2.powmod(pk.random_unit(rng), n, n2)
    return Ciphertext(int(mpz(ct.value) * rn % n2), pk)


def mask_share(pk: PublicKey, ct: Ciphertext, rng=None) -> tuple[Ciphertext, int]:
    """Blind ``ct`` with a uniform mask ``r``; returns the refreshed masked ciphertext and ``r``."""
    rng = _rng(rng)
    r = rng.randrange(pk.n)
    masked = sum([ct, enc(pk, r, rng)])
    return refresh(pk, masked, rng), r
