"""Vertically partitioned record store.

The identity table and the medical table share no foreign key.  Each
medical record carries an anchor {owner_cipher, masked_prev_hop, hop}: the
owner's public key encrypted under a key derived from the *previous* hop
exponent, and the previous hop itself masked by a hash of the current one.
Walking or re-linking a patient's chain therefore requires the anchor key
g^theta, which the server forgets at provisioning and can only reconstruct
through the two-party protocol.

Per patient the chain starts at a random seed exponent stored on the
identity side; each subsequent anchor is looked up by recomputing its
owner_cipher from the hop chain, so the medical table alone reveals nothing
about ownership or ordering.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from . import groups
from .errors import (
    AuthenticationFailure,
    DuplicatePatient,
    UnknownAnchor,
    UnknownPatient,
)
from .groups import GroupParams
from .sealing import sym_decrypt, sym_encrypt
from .storage import KVStore

IDENTITY_PREFIX = b"idn/"
MEDICAL_PREFIX = b"med/"


@dataclass(frozen=True)
class IdentityRecord:
    public_key: int
    chain_seed: int       # start exponent of the patient's anchor chain
    personal_data: bytes


@dataclass(frozen=True)
class Anchor:
    owner_cipher: bytes     # owner public key sealed under the previous hop
    masked_prev_hop: int    # previous hop * H(anchor_key^hop) in Z_p
    hop: int                # this record's chain exponent, stored in clear
    payload: bytes          # opaque de-identified record


class AnchorStore:
    """Both partitioned tables over one key-value backend.

    `anchor_key_commitment` is the persisted exponent-domain hash of the
    true g^theta; every operation that takes an anchor key checks the
    caller's value against it before touching the tables, so a wrong key
    fails closed instead of silently corrupting a chain.
    """

    def __init__(self, store: KVStore, params: GroupParams, anchor_key_commitment: int) -> None:
        self._store = store
        self._params = params
        self._commitment = anchor_key_commitment

    # -- helpers -----------------------------------------------------------

    def _check_anchor_key(self, anchor_key: int) -> None:
        digest = groups.hash_to_exponent(self._params, self._params.encode(anchor_key))
        if digest != self._commitment:
            raise AuthenticationFailure("anchor key does not match provisioning commitment")

    def _seal_owner(self, anchor_key: int, prev_hop: int, public_key: int) -> bytes:
        p = self._params.p
        key = groups.hash_to_key(self._params.encode(pow(anchor_key, prev_hop, p)))
        return sym_encrypt(key, self._params.encode(public_key))

    def _encode_identity(self, record: IdentityRecord) -> bytes:
        return (self._params.encode(record.chain_seed)
                + struct.pack(">I", len(record.personal_data)) + record.personal_data)

    def _decode_identity(self, public_key: int, raw: bytes) -> IdentityRecord:
        w = self._params.element_size
        seed = self._params.decode(raw[:w])
        (n,) = struct.unpack_from(">I", raw, w)
        return IdentityRecord(public_key, seed, raw[w + 4:w + 4 + n])

    def _encode_anchor(self, anchor: Anchor) -> bytes:
        return (self._params.encode(anchor.masked_prev_hop) + self._params.encode(anchor.hop)
                + struct.pack(">I", len(anchor.payload)) + anchor.payload)

    def _decode_anchor(self, owner_cipher: bytes, raw: bytes) -> Anchor:
        w = self._params.element_size
        masked = self._params.decode(raw[:w])
        hop = self._params.decode(raw[w:2 * w])
        (n,) = struct.unpack_from(">I", raw, 2 * w)
        return Anchor(owner_cipher, masked, hop, raw[2 * w + 4:2 * w + 4 + n])

    # -- identity side -----------------------------------------------------

    def register_patient(self, public_key: int, personal_data: bytes,
                         rng: random.Random | None = None) -> IdentityRecord:
        key = IDENTITY_PREFIX + self._params.encode(public_key)
        if self._store.get(key) is not None:
            raise DuplicatePatient(f"{public_key:#x} already registered")
        seed = groups.sample_invertible_exponent(self._params, rng)
        record = IdentityRecord(public_key, seed, personal_data)
        self._store.put(key, self._encode_identity(record))
        return record

    def get_identity(self, public_key: int) -> IdentityRecord:
        raw = self._store.get(IDENTITY_PREFIX + self._params.encode(public_key))
        if raw is None:
            raise UnknownPatient(f"{public_key:#x} not registered")
        return self._decode_identity(public_key, raw)

    # -- medical side ------------------------------------------------------

    def get_anchor(self, owner_cipher: bytes) -> Anchor:
        raw = self._store.get(MEDICAL_PREFIX + owner_cipher)
        if raw is None:
            raise UnknownAnchor("no record with that anchor")
        return self._decode_anchor(owner_cipher, raw)

    def _walk(self, anchor_key: int, identity: IdentityRecord):
        """Yield (prev_hop, anchor) along the patient's chain, in order."""
        hop = identity.chain_seed
        while True:
            cipher = self._seal_owner(anchor_key, hop, identity.public_key)
            raw = self._store.get(MEDICAL_PREFIX + cipher)
            if raw is None:
                return
            anchor = self._decode_anchor(cipher, raw)
            yield hop, anchor
            hop = anchor.hop

    def append_records(self, anchor_key: int, public_key: int, payloads: list[bytes],
                       rng: random.Random | None = None) -> list[Anchor]:
        """Append payloads to the patient's chain; one chain walk per call."""
        self._check_anchor_key(anchor_key)
        identity = self.get_identity(public_key)
        tail_hop = identity.chain_seed
        for _, anchor in self._walk(anchor_key, identity):
            tail_hop = anchor.hop
        p = self._params.p
        created: list[Anchor] = []
        for payload in payloads:
            hop = groups.sample_invertible_exponent(self._params, rng)
            cipher = self._seal_owner(anchor_key, tail_hop, public_key)
            masked = (tail_hop * groups.element_hash_field(self._params, pow(anchor_key, hop, p))) % p
            anchor = Anchor(cipher, masked, hop, payload)
            self._store.put(MEDICAL_PREFIX + cipher, self._encode_anchor(anchor))
            created.append(anchor)
            tail_hop = hop
        return created

    def append_record(self, anchor_key: int, public_key: int, payload: bytes,
                      rng: random.Random | None = None) -> Anchor:
        return self.append_records(anchor_key, public_key, [payload], rng)[0]

    def identify_record(self, anchor_key: int, anchor: Anchor) -> int:
        """Recover the owning patient's public key from an anchor."""
        self._check_anchor_key(anchor_key)
        p = self._params.p
        prev_hop = groups.field_div(
            anchor.masked_prev_hop,
            groups.element_hash_field(self._params, pow(anchor_key, anchor.hop, p)),
            self._params,
        )
        key = groups.hash_to_key(self._params.encode(pow(anchor_key, prev_hop, p)))
        owner = self._params.decode(sym_decrypt(key, anchor.owner_cipher))
        # The cipher is authenticated, so a successful decrypt under the true
        # anchor key always names the registered owner; verify regardless.
        self.get_identity(owner)
        return owner

    def fetch_records(self, anchor_key: int, public_key: int) -> list[Anchor]:
        """All of a patient's anchors, in insertion order."""
        self._check_anchor_key(anchor_key)
        identity = self.get_identity(public_key)
        return [anchor for _, anchor in self._walk(anchor_key, identity)]

    def delete_record(self, anchor_key: int, anchor: Anchor) -> None:
        """Remove an anchor and re-link its successor to the predecessor hop.

        The successor's owner_cipher is recomputed from the predecessor hop,
        which by determinism of the cipher equals the deleted anchor's own
        owner_cipher: the successor slides into the deleted slot.
        """
        self._check_anchor_key(anchor_key)
        owner = self.identify_record(anchor_key, anchor)
        identity = self.get_identity(owner)
        if self._store.get(MEDICAL_PREFIX + anchor.owner_cipher) is None:
            raise UnknownAnchor("anchor not present")
        prev_hop = identity.chain_seed
        for walked_prev, walked in self._walk(anchor_key, identity):
            if walked.owner_cipher == anchor.owner_cipher:
                prev_hop = walked_prev
                break
        else:
            raise UnknownAnchor("anchor not on its owner's chain")
        p = self._params.p
        succ_cipher = self._seal_owner(anchor_key, anchor.hop, owner)
        succ_raw = self._store.get(MEDICAL_PREFIX + succ_cipher)
        self._store.delete(MEDICAL_PREFIX + anchor.owner_cipher)
        if succ_raw is not None:
            succ = self._decode_anchor(succ_cipher, succ_raw)
            self._store.delete(MEDICAL_PREFIX + succ_cipher)
            masked = (prev_hop * groups.element_hash_field(self._params, pow(anchor_key, succ.hop, p))) % p
            repaired = Anchor(anchor.owner_cipher, masked, succ.hop, succ.payload)
            self._store.put(MEDICAL_PREFIX + repaired.owner_cipher, self._encode_anchor(repaired))
