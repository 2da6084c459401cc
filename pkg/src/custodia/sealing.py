"""Deterministic authenticated encryption and ledger signatures.

The record store looks anchors up *by ciphertext*, so encryption must be
deterministic: the same key and plaintext always produce the same bytes.
AES-SIV gives exactly that (synthetic IV, no nonce) while still failing
loudly on a wrong key or a flipped bit.  Every key encrypts a single
plaintext in this system, so determinism leaks nothing.

Blocks are signed with a Schnorr-style discrete-log signature over the same
group the rest of the scheme uses.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag

from .errors import AuthenticationFailure
from .groups import GroupParams, KeyPair

try:
    from cryptography.hazmat.primitives.ciphers.aead import AESSIV
except ImportError as exc:  # pragma: no cover
    raise ImportError("cryptography>=35 with AES-SIV support is required") from exc

_SYSRAND = random.SystemRandom()

_DOMAIN_SIV = b"custodia.siv:"
_DOMAIN_SIG = b"custodia.sig:"


def _siv(key: bytes) -> AESSIV:
    # Accept key material of any length; AES-SIV itself wants 64 bytes.
    return AESSIV(hashlib.sha512(_DOMAIN_SIV + key).digest())


def sym_encrypt(key: bytes, plaintext: bytes) -> bytes:
    """Deterministic authenticated encryption (AES-SIV)."""
    return _siv(key).encrypt(plaintext, None)


def sym_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    """Inverse of sym_encrypt; raises AuthenticationFailure on any mismatch."""
    try:
        return _siv(key).decrypt(ciphertext, None)
    except (InvalidTag, ValueError) as exc:
        raise AuthenticationFailure("decryption failed") from exc


@dataclass(frozen=True)
class Signature:
    challenge: int  # hash of (commitment, message), reduced mod p-1
    response: int   # in Z_(p-1)


def _challenge(params: GroupParams, commitment: int, message: bytes) -> int:
    data = _DOMAIN_SIG + params.encode(commitment) + message
    return int.from_bytes(hashlib.sha512(data).digest(), "big") % (params.p - 1)


def sign(params: GroupParams, message: bytes, keypair: KeyPair,
         rng: random.Random | None = None) -> Signature:
    rng = rng or _SYSRAND
    n = params.p - 1
    k = rng.randrange(2, n)
    commitment = pow(params.g, k, params.p)
    e = _challenge(params, commitment, message)
    s = (k - keypair.private * e) % n
    return Signature(challenge=e, response=s)


def verify_signature(params: GroupParams, message: bytes, sig: Signature, public: int) -> bool:
    if not (0 <= sig.challenge < params.p - 1 and 0 <= sig.response < params.p - 1):
        return False
    commitment = (pow(params.g, sig.response, params.p) * pow(public, sig.challenge, params.p)) % params.p
    return _challenge(params, commitment, message) == sig.challenge
