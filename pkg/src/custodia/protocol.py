"""Client-side protocol math and the nonce sampling used by the server.

The access key a custodian holds is g^(private * anchor_exponent * w).  The
two-stage exchange lets the server reconstruct g^anchor_exponent exactly
once per session: the server blinds a random factor under the custodian's
public key, the custodian unblinds it with their private key, applies the
factor together with their private inverse to the access key, and the
server then strips the factor and its own key.  Neither side ever sees the
other's private exponent, and the returned value is useless without the
server's response in the same session.
"""

from __future__ import annotations

import math
import random

from . import groups
from .blocks import Block
from .errors import ParityConstraintViolated
from .groups import GroupParams, KeyPair
from .wire import Stage1Request, Stage1Response, Stage2Request

_SYSRAND = random.SystemRandom()

_MAX_SAMPLING_ROUNDS = 10_000


def make_claim(params: GroupParams, last_block: Block, private: int) -> int:
    """Claim token: the last active block's forward link raised to the caller's key."""
    return pow(last_block.active.forward, private, params.p)


def begin_request(params: GroupParams, keypair: KeyPair, last_block: Block) -> Stage1Request:
    return Stage1Request(
        active_public=keypair.public,
        last_block_id=last_block.block_id,
        claim=make_claim(params, last_block, keypair.private),
    )


def extract_blind_factor(params: GroupParams, response: Stage1Response,
                         keypair: KeyPair, server_public: int) -> int:
    """Unblind the server's factor using the shared value g^(w * private)."""
    shared = pow(server_public, keypair.private, params.p)
    return groups.field_div(response.blinded_factor, shared, params)


def blind_access_key(params: GroupParams, keypair: KeyPair, access_key: int,
                     blind_factor: int) -> int:
    """access_key^(factor * private^-1) = g^(anchor_exponent * w * factor)."""
    exponent = (blind_factor * keypair.private_inv) % (params.p - 1)
    return pow(access_key, exponent, params.p)


def build_stage2(params: GroupParams, keypair: KeyPair, access_key: int,
                 blind_factor: int, action: int, *, anchor_id: bytes = b"",
                 patient: int = 0, payloads: tuple[bytes, ...] = ()) -> Stage2Request:
    return Stage2Request(
        action=action,
        blinded_access=blind_access_key(params, keypair, access_key, blind_factor),
        anchor_id=anchor_id,
        patient=patient,
        payloads=payloads,
    )


def unblind_access(params: GroupParams, blinded_access: int, blind_factor_inv: int,
                   server_private_inv: int) -> tuple[int, int]:
    """Server side: recover (g^(anchor_exponent * w), g^anchor_exponent)."""
    p = params.p
    access_base = pow(blinded_access, blind_factor_inv, p)
    anchor_key = pow(access_base, server_private_inv, p)
    return access_base, anchor_key


def sample_block_nonces(params: GroupParams, passive_public: int, claim: int,
                        rng: random.Random | None = None) -> tuple[int, int]:
    """Draw the two block nonces: no inverses mod p-1, and the active nonce
    must flip the key-hash parity relative to the claim token."""
    rng = rng or _SYSRAND
    p = params.p
    claim_parity = groups.key_parity(params, groups.hash_to_key(params.encode(claim)))
    for _ in range(_MAX_SAMPLING_ROUNDS):
        active_nonce = groups.sample_noninvertible_exponent(params, rng)
        parity = groups.key_parity(
            params, groups.hash_to_key(params.encode(pow(passive_public, active_nonce, p))))
        if parity != claim_parity:
            passive_nonce = groups.sample_noninvertible_exponent(params, rng)
            return active_nonce, passive_nonce
    raise ParityConstraintViolated("could not satisfy the parity inequality")
