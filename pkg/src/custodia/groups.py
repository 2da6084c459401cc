"""Arithmetic over the multiplicative group of a safe prime.

All cryptography in this package lives in Z_p* with p = 2q + 1 (p, q prime)
and a generator g of the full group of order p - 1.  The full group, rather
than the prime-order subgroup, is deliberate: the scheme relies on exponents
that do and do not have multiplicative inverses modulo p - 1, and such
non-invertible exponents do not exist in a prime-order group.

Three hash domains are kept separate so a value hashed for one purpose can
never be confused with another:

* ``hash_to_field``    -> element of [1, p-1], used in Z_p products,
* ``hash_to_exponent`` -> element of Z_(p-1), used as an exponent,
* ``hash_to_key``      -> 64 raw bytes, used as symmetric-key material;
  ``key_field``/``key_parity`` give its Z_p interpretation and parity bit.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from pathlib import Path

import gmpy2

from .errors import DivisionByZero, NotInvertible

_SYSRAND = random.SystemRandom()

# Miller-Rabin round count: error probability below 2^-128.
_MR_ROUNDS = 64

_DOMAIN_FIELD = b"custodia.field:"
_DOMAIN_EXPONENT = b"custodia.expo:"
_DOMAIN_KEY = b"custodia.key:"

DIGEST_SIZE = 64  # SHA-512


@dataclass(frozen=True)
class GroupParams:
    """Safe-prime group: modulus p = 2q + 1, generator g of order p - 1."""

    p: int
    q: int
    g: int

    @property
    def element_size(self) -> int:
        """Width in bytes of the canonical fixed-width element encoding."""
        return (self.p.bit_length() + 7) // 8

    def encode(self, x: int) -> bytes:
        """Canonical big-endian fixed-width encoding of a Z_p element or exponent."""
        return x.to_bytes(self.element_size, "big")

    def decode(self, raw: bytes) -> int:
        if len(raw) != self.element_size:
            raise ValueError(f"expected {self.element_size} bytes, got {len(raw)}")
        return int.from_bytes(raw, "big")

    def validate(self) -> None:
        if self.p != 2 * self.q + 1:
            raise ValueError("p != 2q + 1")
        if not gmpy2.is_prime(self.p, _MR_ROUNDS):
            raise ValueError("p is not prime")
        if not gmpy2.is_prime(self.q, _MR_ROUNDS):
            raise ValueError("q is not prime")
        if not 1 < self.g < self.p - 1:
            raise ValueError("g out of range")
        if pow(self.g, 2, self.p) == 1 or pow(self.g, self.q, self.p) == 1:
            raise ValueError("g does not generate the full group")


@dataclass(frozen=True)
class KeyPair:
    """Exponent keypair: public = g^private, private invertible mod p - 1."""

    private: int
    public: int
    private_inv: int


def generate_params(bit_length: int, rng: random.Random | None = None) -> GroupParams:
    """Search for a safe prime of exactly `bit_length` bits and a generator.

    Deterministic for a seeded `rng`; uses OS entropy otherwise.
    """
    if bit_length < 5:
        raise ValueError("bit_length too small for a safe prime")
    rng = rng or _SYSRAND
    while True:
        q = rng.getrandbits(bit_length - 1) | (1 << (bit_length - 2)) | 1
        if not gmpy2.is_prime(q, _MR_ROUNDS):
            continue
        p = 2 * q + 1
        if p.bit_length() != bit_length:
            continue
        if gmpy2.is_prime(p, _MR_ROUNDS):
            break
    while True:
        g = rng.randrange(2, p - 1)
        if pow(g, 2, p) != 1 and pow(g, q, p) != 1:
            break
    params = GroupParams(p=p, q=q, g=g)
    params.validate()
    return params


def sample_invertible_exponent(params: GroupParams, rng: random.Random | None = None) -> int:
    """Uniform exponent in [2, p-2] with gcd(e, p-1) = 1."""
    rng = rng or _SYSRAND
    n = params.p - 1
    while True:
        e = rng.randrange(2, params.p - 1)
        if math.gcd(e, n) == 1:
            return e


def sample_noninvertible_exponent(params: GroupParams, rng: random.Random | None = None) -> int:
    """Uniform exponent in [2, p-2] with gcd(e, p-1) != 1 (no inverse exists)."""
    rng = rng or _SYSRAND
    n = params.p - 1
    while True:
        e = rng.randrange(2, params.p - 1)
        if math.gcd(e, n) != 1:
            return e


def generate_keypair(params: GroupParams, rng: random.Random | None = None) -> KeyPair:
    private = sample_invertible_exponent(params, rng)
    public = pow(params.g, private, params.p)
    return KeyPair(private=private, public=public, private_inv=exponent_inverse(private, params))


def exponent_inverse(a: int, params: GroupParams) -> int:
    """Inverse of `a` modulo p - 1.  Raises NotInvertible when none exists."""
    n = params.p - 1
    g, x, _ = _extended_gcd(a % n, n)
    if g != 1:
        raise NotInvertible(f"gcd(a, p-1) = {g}")
    return x % n


def field_div(a: int, b: int, params: GroupParams) -> int:
    """a / b in Z_p, i.e. a * b^-1 mod p."""
    b %= params.p
    if b == 0:
        raise DivisionByZero("division by zero in Z_p")
    # p is prime, so Fermat inversion always applies.
    return (a * pow(b, params.p - 2, params.p)) % params.p


def _extended_gcd(a: int, b: int) -> tuple[int, int, int]:
    old_r, r = a, b
    old_s, s = 1, 0
    old_t, t = 0, 1
    while r:
        quot = old_r // r
        old_r, r = r, old_r - quot * r
        old_s, s = s, old_s - quot * s
        old_t, t = t, old_t - quot * t
    return old_r, old_s, old_t


def _digest(domain: bytes, data: bytes) -> bytes:
    return hashlib.sha512(domain + data).digest()


def hash_to_field(params: GroupParams, data: bytes) -> int:
    """Hash to [1, p-1].  A zero residue is re-hashed with a counter suffix."""
    value = int.from_bytes(_digest(_DOMAIN_FIELD, data), "big") % params.p
    counter = 0
    while value == 0:
        counter += 1
        suffixed = data + counter.to_bytes(4, "big")
        value = int.from_bytes(_digest(_DOMAIN_FIELD, suffixed), "big") % params.p
    return value


def hash_to_exponent(params: GroupParams, data: bytes) -> int:
    """Hash to Z_(p-1)."""
    return int.from_bytes(_digest(_DOMAIN_EXPONENT, data), "big") % (params.p - 1)


def hash_to_key(data: bytes) -> bytes:
    """Hash to 64 bytes of symmetric-key material."""
    return _digest(_DOMAIN_KEY, data)


def key_field(params: GroupParams, key: bytes) -> int:
    """Z_p interpretation of key material."""
    return int.from_bytes(key, "big") % params.p


def key_parity(params: GroupParams, key: bytes) -> int:
    """Parity bit of the Z_p interpretation of key material."""
    return key_field(params, key) & 1


def element_hash_field(params: GroupParams, x: int) -> int:
    """hash_to_field over the canonical encoding of a group element."""
    return hash_to_field(params, params.encode(x))


def save_params(params: GroupParams, path: str | Path) -> None:
    text = f"p = {params.p:x}\nq = {params.q:x}\ng = {params.g:x}\n"
    Path(path).write_text(text)


def load_params(path: str | Path) -> GroupParams:
    fields: dict[str, int] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = int(value.strip(), 16)
    try:
        params = GroupParams(p=fields["p"], q=fields["q"], g=fields["g"])
    except KeyError as missing:
        raise ValueError(f"parameter file missing {missing}") from None
    params.validate()
    return params
