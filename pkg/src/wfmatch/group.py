"""Prime-order groups used as the substrate for the distributed PRF.

Two backends are provided:

* ``P256Group`` -- NIST P-256 through OpenSSL (``cryptography``). Elements are
  handled x-only: an element is the class ``{P, -P}`` and is stored as its
  x-coordinate. Scalar multiplication is well defined on these classes
  (``x(k*P) == x(k*(-P))``), which is all the PRF needs, and it lets us use
  OpenSSL's ECDH as a fast exponentiation primitive.
* ``ModPGroup`` -- the order-``q`` subgroup of ``Z_p^*``. Used with tiny
  parameters for brute-force checks in tests.
"""
from __future__ import annotations

import hashlib
import random
import secrets
from dataclasses import dataclass
from enum import Enum
from typing import Union

import gmpy2
from cryptography.hazmat.primitives.asymmetric import ec

HASH_COUNTER_LIMIT = 1 << 16
TRUNCATED_TAG_BYTES = 12


class GroupError(ValueError):
    pass


class GroupId(str, Enum):
    P256 = "p256"
    MODP = "modp"


class TagWidth(str, Enum):
    FULL = "full"
    BITS96 = "96"

    @classmethod
    def parse(cls, value: Union[str, int, "TagWidth"]) -> "TagWidth":
        if isinstance(value, TagWidth):
            return value
        return cls(str(value))


@dataclass(frozen=True)
class GroupParams:
    group_id: GroupId
    order: int
    security_bits: int


class Group:
    """Interface shared by the concrete groups.

    Group elements are opaque to callers; only the methods below touch them.
    Scalars are plain ``int`` in ``[1, q-1]``.
    """

    params: GroupParams
    element_size: int

    @property
    def order(self) -> int:
        return self.params.order

    def random_scalar(self, rng: random.Random | None = None) -> int:
        rng = rng or secrets.SystemRandom()
        return rng.randrange(1, self.order)

    def scalar_inverse(self, a: int) -> int:
        if a % self.order == 0:
            raise GroupError("zero scalar has no inverse")
        return pow(a, -1, self.order)

    def hash_to_group(self, data: bytes):
        raise NotImplementedError

    def exp(self, h, a: int):
        raise NotImplementedError

    def serialize(self, h) -> bytes:
        raise NotImplementedError

    def deserialize(self, data: bytes):
        raise NotImplementedError

    def to_tag(self, h, width: TagWidth | str = TagWidth.FULL) -> bytes:
        """Bytes used for equality comparison only; never decoded again."""
        raw = self.serialize(h)
        if TagWidth.parse(width) is TagWidth.BITS96:
            return raw[-TRUNCATED_TAG_BYTES:]
        return raw

    def tag_size(self, width: TagWidth | str) -> int:
        if TagWidth.parse(width) is TagWidth.BITS96:
            return TRUNCATED_TAG_BYTES
        return self.element_size


def _candidate_digests(data: bytes):
    for counter in range(HASH_COUNTER_LIMIT):
        yield hashlib.sha256(data + counter.to_bytes(2, "big")).digest()


# NIST P-256 domain parameters
_P256_P = 2**256 - 2**224 + 2**192 + 2**96 - 1
_P256_B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
_P256_N = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class P256Group(Group):
    params = GroupParams(GroupId.P256, _P256_N, 128)
    element_size = 33  # SEC1 compressed

    def __init__(self):
        self._curve = ec.SECP256R1()

    def _on_curve_x(self, x: int) -> bool:
        rhs = (x * x * x - 3 * x + _P256_B) % _P256_P
        return rhs == 0 or gmpy2.legendre(rhs, _P256_P) == 1

    def hash_to_group(self, data: bytes) -> bytes:
        # try-and-increment: first digest that is a valid x-coordinate
        for digest in _candidate_digests(data):
            x = int.from_bytes(digest, "big")
            if x < _P256_P and self._on_curve_x(x):
                return digest
        raise GroupError("hash_to_group exhausted the counter space")

    def _point(self, x: bytes) -> ec.EllipticCurvePublicKey:
        return ec.EllipticCurvePublicKey.from_encoded_point(self._curve, b"\x02" + x)

    def exp(self, h: bytes, a: int) -> bytes:
        a %= self.order
        if a == 0:
            raise GroupError("exponent must be nonzero")
        key = ec.derive_private_key(a, self._curve)
        return key.exchange(ec.ECDH(), self._point(h))

    def exp_many(self, hs, a: int) -> list[bytes]:
        """Raise every element of ``hs`` to the same scalar."""
        a %= self.order
        if a == 0:
            raise GroupError("exponent must be nonzero")
        key = ec.derive_private_key(a, self._curve)
        ecdh = ec.ECDH()
        point = self._point
        return [key.exchange(ecdh, point(h)) for h in hs]

    def serialize(self, h: bytes) -> bytes:
        return b"\x02" + h

    def deserialize(self, data: bytes) -> bytes:
        if len(data) != self.element_size or data[0] not in (2, 3):
            raise GroupError("bad P-256 element encoding")
        x = data[1:]
        try:
            self._point(x)
        except ValueError as exc:
            raise GroupError("point not on P-256") from exc
        return x


class ModPGroup(Group):
    """Order-``q`` subgroup of ``Z_p^*`` with ``q | p - 1``.

    Elements are ints in ``[1, p)``. Only meant for small test parameters or
    as an independent cross-check of the curve backend.
    """

    def __init__(self, p: int, q: int):
        if not (gmpy2.is_prime(p) and gmpy2.is_prime(q)) or (p - 1) % q:
            raise GroupError("need primes p, q with q | p - 1")
        self.p = p
        self.cofactor = (p - 1) // q
        self.params = GroupParams(GroupId.MODP, q, q.bit_length() // 2)
        self.element_size = (p.bit_length() + 7) // 8

    def is_element(self, h: int) -> bool:
        return 0 < h < self.p and pow(h, self.order, self.p) == 1

    def hash_to_group(self, data: bytes) -> int:
        for digest in _candidate_digests(data):
            c = int.from_bytes(digest, "big") % self.p
            if c > 1 and self.is_element(c):
                return c
        raise GroupError("hash_to_group exhausted the counter space")

    def exp(self, h: int, a: int) -> int:
        a %= self.order
        if a == 0:
            raise GroupError("exponent must be nonzero")
        return pow(h, a, self.p)

    def exp_many(self, hs, a: int) -> list[int]:
        return [self.exp(h, a) for h in hs]

    def serialize(self, h: int) -> bytes:
        return h.to_bytes(self.element_size, "big")

    def deserialize(self, data: bytes) -> int:
        if len(data) != self.element_size:
            raise GroupError("bad element length")
        h = int.from_bytes(data, "big")
        if not self.is_element(h):
            raise GroupError("not a subgroup element")
        return h


_DEFAULT: P256Group | None = None


def default_group() -> P256Group:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = P256Group()
    return _DEFAULT


def get_group(group_id: GroupId | str) -> Group:
    if GroupId(group_id) is GroupId.P256:
        return default_group()
    raise GroupError("modp groups need explicit parameters; construct ModPGroup directly")
