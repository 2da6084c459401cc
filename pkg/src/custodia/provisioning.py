"""System provisioning: master secrets, user keys, genesis blocks.

The anchor exponent (and the viewing exponent) exist only inside
``provision``.  What survives:

* per-user access keys  g^(private * anchor_exponent * w),
* supervisor view keys  g^(private_s * view_exponent * w),
* the server material: w keypair, the link exponent derived by hashing
  g^anchor_exponent (with its inverse), the view base g^(view_exponent * w),
  and an exponent-domain hash of g^anchor_exponent used to recognise the
  reconstructed anchor key.

Neither the anchor exponent, g^anchor_exponent, nor the view exponent is
ever written to the store; tests scan persisted state for their encodings.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass

from . import groups
from .anchors import AnchorStore
from .blocks import make_genesis_block
from .chain import LedgerStore
from .errors import NotInvertible, StateCorrupted
from .groups import GroupParams, KeyPair
from .registry import (
    ROLE_MANAGER,
    ROLE_PATIENT,
    ROLE_SUPERVISOR,
    UserRecord,
    UserRegistry,
)
from .storage import KVStore

_SYSRAND = random.SystemRandom()

META_PARAMS = b"meta/params"
META_SECRETS = b"meta/secrets"
META_READY = b"meta/ready"


@dataclass(frozen=True)
class ServerSecrets:
    """Long-lived server material; holds w but never the anchor exponent."""

    server_keypair: KeyPair
    link_exponent: int
    link_exponent_inv: int
    view_base: int
    anchor_key_commitment: int


@dataclass(frozen=True)
class UserCredentials:
    label: str
    role: str
    keypair: KeyPair
    genesis_id: int
    access_key: int | None = None
    view_key: int | None = None


@dataclass(frozen=True)
class ProvisionedSystem:
    params: GroupParams
    secrets: ServerSecrets
    credentials: dict[str, UserCredentials]


def _encode_secrets(params: GroupParams, secrets: ServerSecrets) -> bytes:
    enc = params.encode
    kp = secrets.server_keypair
    return b"".join([
        enc(kp.private), enc(kp.public), enc(kp.private_inv),
        enc(secrets.link_exponent), enc(secrets.link_exponent_inv),
        enc(secrets.view_base), enc(secrets.anchor_key_commitment),
    ])


def _decode_secrets(params: GroupParams, raw: bytes) -> ServerSecrets:
    w = params.element_size
    if len(raw) != 7 * w:
        raise StateCorrupted("bad server secret record")
    values = [params.decode(raw[i * w:(i + 1) * w]) for i in range(7)]
    return ServerSecrets(
        server_keypair=KeyPair(private=values[0], public=values[1], private_inv=values[2]),
        link_exponent=values[3],
        link_exponent_inv=values[4],
        view_base=values[5],
        anchor_key_commitment=values[6],
    )


def save_server_state(store: KVStore, params: GroupParams, secrets: ServerSecrets) -> None:
    store.put(META_PARAMS, f"{params.p:x},{params.q:x},{params.g:x}".encode())
    store.put(META_SECRETS, _encode_secrets(params, secrets))


def load_server_state(store: KVStore) -> tuple[GroupParams, ServerSecrets]:
    raw_params = store.get(META_PARAMS)
    if raw_params is None:
        raise StateCorrupted("store holds no group parameters")
    p, q, g = (int(x, 16) for x in raw_params.decode().split(","))
    params = GroupParams(p=p, q=q, g=g)
    raw_secrets = store.get(META_SECRETS)
    if raw_secrets is None:
        raise StateCorrupted("store holds no server secrets")
    return params, _decode_secrets(params, raw_secrets)


def _sample_master_secrets(params: GroupParams, rng: random.Random):
    """Draw the transient master exponents.

    The anchor exponent must have no inverse mod p-1 (it is meant to be
    unrecoverable), while the hash of g^anchor_exponent, which wraps server
    links, must have one; redraw until both hold.
    """
    n = params.p - 1
    while True:
        anchor_exponent = groups.sample_noninvertible_exponent(params, rng)
        anchor_key = pow(params.g, anchor_exponent, params.p)
        link_exponent = groups.hash_to_exponent(params, params.encode(anchor_key))
        if math.gcd(link_exponent, n) == 1:
            break
    view_exponent = rng.randrange(2, params.p - 1)
    return anchor_exponent, anchor_key, link_exponent, view_exponent


def provision(store: KVStore, params: GroupParams, *, managers: int, supervisors: int,
              patients: int, rng: random.Random | None = None,
              clock=None, extra_patient_data: bytes = b"") -> ProvisionedSystem:
    """Initialise an empty store: secrets, users, genesis blocks, identities."""
    rng = rng or _SYSRAND
    if clock is None:
        import time
        clock = lambda: int(time.time())
    if store.get(META_READY) is not None:
        raise StateCorrupted("store is already provisioned")

    server_keypair = groups.generate_keypair(params, rng)
    anchor_exponent, anchor_key, link_exponent, view_exponent = _sample_master_secrets(params, rng)
    n = params.p - 1
    w = server_keypair.private
    secrets = ServerSecrets(
        server_keypair=server_keypair,
        link_exponent=link_exponent,
        link_exponent_inv=groups.exponent_inverse(link_exponent, params),
        view_base=pow(params.g, (view_exponent * w) % n, params.p),
        anchor_key_commitment=groups.hash_to_exponent(params, params.encode(anchor_key)),
    )
    save_server_state(store, params, secrets)

    registry = UserRegistry(store, params)
    ledger = LedgerStore(store, params)
    anchor_store = AnchorStore(store, params, secrets.anchor_key_commitment)

    credentials: dict[str, UserCredentials] = {}
    roster = ([(ROLE_MANAGER, i) for i in range(1, managers + 1)]
              + [(ROLE_SUPERVISOR, i) for i in range(1, supervisors + 1)]
              + [(ROLE_PATIENT, i) for i in range(1, patients + 1)])
    for role, index in roster:
        label = f"{role}-{index}"
        keypair = groups.generate_keypair(params, rng)
        seq, prev_checksum = ledger.next_position()
        genesis = make_genesis_block(params, keypair.public, server_keypair,
                                     link_exponent, seq, prev_checksum, clock(), rng)
        ledger.append_block(genesis)
        registry.add(UserRecord(keypair.public, role, genesis.block_id))
        access_key = None
        view_key = None
        if role in (ROLE_MANAGER, ROLE_SUPERVISOR):
            access_key = pow(keypair.public, (anchor_exponent * w) % n, params.p)
        if role == ROLE_SUPERVISOR:
            view_key = pow(keypair.public, (view_exponent * w) % n, params.p)
        if role == ROLE_PATIENT:
            anchor_store.register_patient(keypair.public, label.encode() + extra_patient_data, rng)
        credentials[label] = UserCredentials(label, role, keypair, genesis.block_id,
                                             access_key, view_key)

    store.put(META_READY, b"1")
    # anchor_exponent, anchor_key and view_exponent go out of scope here and
    # are never persisted.
    return ProvisionedSystem(params=params, secrets=secrets, credentials=credentials)


def enroll_patient(store: KVStore, params: GroupParams, secrets: ServerSecrets,
                   public_key: int, personal_data: bytes = b"",
                   rng: random.Random | None = None, clock=None) -> UserRecord:
    """Register a new patient after bootstrap; needs no anchor exponent."""
    rng = rng or _SYSRAND
    if clock is None:
        import time
        clock = lambda: int(time.time())
    if not 1 < public_key < params.p - 1:
        raise ValueError("public key out of group range")
    registry = UserRegistry(store, params)
    if registry.get(public_key) is not None:
        raise ValueError("public key already registered")
    ledger = LedgerStore(store, params)
    seq, prev_checksum = ledger.next_position()
    genesis = make_genesis_block(params, public_key, secrets.server_keypair,
                                 secrets.link_exponent, seq, prev_checksum, clock(), rng)
    ledger.append_block(genesis)
    record = UserRecord(public_key, ROLE_PATIENT, genesis.block_id)
    registry.add(record)
    AnchorStore(store, params, secrets.anchor_key_commitment).register_patient(
        public_key, personal_data, rng)
    return record
