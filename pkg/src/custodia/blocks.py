"""Ledger blocks: construction, serialization, traversal and content crypto.

Every non-genesis block records one access event between an active user
(the custodian who initiated it) and a passive user (the patient whose
records were touched).  A block carries four parts:

* address   -- two index values; each is the previous block id of the same
               participant multiplied by a hash only that participant (or,
               for the passive side, the server) can recompute,
* active    -- forward link g^r_u, masked backward link, and a claim tag
               binding the active user's key to the block,
* passive   -- forward link g^r_v, masked backward link, and a server link
               that lets the server walk passive chains without the
               patient's key,
* content   -- participation info sealed so that exactly the two
               participants and the supervisors can open it offline.

Forward traversal recomputes the next block's address and resolves it in
the index; backward traversal peels the masked backward link to recover the
previous block id directly.  Content privacy rests on a straight line in
Z_p through two points only the participants can compute; a random point on
the line is published, the key point's y value stays implicit.

Blocks chain by hash (prev_checksum) in ledger order and are signed by the
server key.
"""

from __future__ import annotations

import hashlib
import math
import random
import struct
from dataclasses import dataclass, replace

from . import groups
from .errors import (
    AuthenticationFailure,
    DegenerateLine,
    InvalidClaim,
    ParityConstraintViolated,
)
from .groups import GroupParams, KeyPair
from .sealing import Signature, sign, sym_decrypt, sym_encrypt

_SYSRAND = random.SystemRandom()

BLOCK_VERSION = 1
_FLAG_GENESIS = 0x01
_FLAG_CONTENT = 0x02

_DOMAIN_CHECKSUM = b"custodia.block:"

CHECKSUM_SIZE = 64
TAG_SIZE = 64
ZERO_CHECKSUM = bytes(CHECKSUM_SIZE)


@dataclass(frozen=True)
class BlockAddress:
    active: int
    passive: int


@dataclass(frozen=True)
class ActivePart:
    forward: int
    backward: int | None  # absent on genesis
    tag: bytes


@dataclass(frozen=True)
class PassivePart:
    forward: int
    backward: int | None  # absent on genesis
    server_link: int


@dataclass(frozen=True)
class BlockContent:
    point_x: int       # published line point; x has no inverse mod p-1
    point_y: int
    key_x: int         # x of the hidden key point
    supervisor_y: int  # key field escrowed for supervisors
    ciphertext: bytes


@dataclass(frozen=True)
class ContentPlaintext:
    active_public: int
    passive_public: int
    action: int
    data_digest: bytes
    timestamp: int


@dataclass(frozen=True)
class Block:
    block_id: int
    seq: int
    timestamp: int
    prev_checksum: bytes
    address: BlockAddress | None
    active: ActivePart
    passive: PassivePart
    content: BlockContent | None
    checksum: bytes
    signature: Signature

    @property
    def is_genesis(self) -> bool:
        return self.address is None


# -- content plaintext codec ------------------------------------------------

def serialize_plaintext(params: GroupParams, pt: ContentPlaintext) -> bytes:
    return (params.encode(pt.active_public) + params.encode(pt.passive_public)
            + struct.pack(">B", pt.action) + pt.data_digest
            + struct.pack(">Q", pt.timestamp))


def parse_plaintext(params: GroupParams, raw: bytes) -> ContentPlaintext:
    w = params.element_size
    expected = 2 * w + 1 + CHECKSUM_SIZE + 8
    if len(raw) != expected:
        raise ValueError("bad plaintext length")
    active = params.decode(raw[:w])
    passive = params.decode(raw[w:2 * w])
    action = raw[2 * w]
    digest = raw[2 * w + 1:2 * w + 1 + CHECKSUM_SIZE]
    (ts,) = struct.unpack_from(">Q", raw, 2 * w + 1 + CHECKSUM_SIZE)
    return ContentPlaintext(active, passive, action, digest, ts)


def data_digest(data: bytes) -> bytes:
    return hashlib.sha512(b"custodia.data:" + data).digest()


# -- serialization ------------------------------------------------------------

def _body_bytes(params: GroupParams, block: Block, with_id: bool) -> bytes:
    """Canonical body; `with_id=False` yields the id preimage (header)."""
    enc = params.encode
    flags = 0
    if block.is_genesis:
        flags |= _FLAG_GENESIS
    if block.content is not None:
        flags |= _FLAG_CONTENT
    parts = [
        struct.pack(">BB", BLOCK_VERSION, flags),
        struct.pack(">QQ", block.seq, block.timestamp),
        block.prev_checksum,
    ]
    if with_id:
        parts.append(enc(block.block_id))
    if block.address is not None:
        parts.append(enc(block.address.active))
        parts.append(enc(block.address.passive))
    parts.append(enc(block.active.forward))
    if block.active.backward is not None:
        parts.append(enc(block.active.backward))
    parts.append(block.active.tag)
    parts.append(enc(block.passive.forward))
    if block.passive.backward is not None:
        parts.append(enc(block.passive.backward))
    parts.append(enc(block.passive.server_link))
    if block.content is not None:
        c = block.content
        parts.append(enc(c.point_x) + enc(c.point_y) + enc(c.key_x) + enc(c.supervisor_y))
        parts.append(struct.pack(">I", len(c.ciphertext)) + c.ciphertext)
    return b"".join(parts)


def block_checksum(params: GroupParams, block: Block) -> bytes:
    return hashlib.sha512(_DOMAIN_CHECKSUM + _body_bytes(params, block, with_id=True)).digest()


def _derive_id(params: GroupParams, block: Block) -> int:
    return groups.hash_to_field(params, _body_bytes(params, block, with_id=False))


def serialize_block(params: GroupParams, block: Block) -> bytes:
    enc = params.encode
    return (_body_bytes(params, block, with_id=True) + block.checksum
            + enc(block.signature.challenge) + enc(block.signature.response))


def deserialize_block(params: GroupParams, raw: bytes) -> Block:
    w = params.element_size
    version, flags = struct.unpack_from(">BB", raw, 0)
    if version != BLOCK_VERSION:
        raise ValueError(f"unsupported block version {version}")
    genesis = bool(flags & _FLAG_GENESIS)
    has_content = bool(flags & _FLAG_CONTENT)
    seq, timestamp = struct.unpack_from(">QQ", raw, 2)
    offset = 18
    prev_checksum = raw[offset:offset + CHECKSUM_SIZE]
    offset += CHECKSUM_SIZE

    def element() -> int:
        nonlocal offset
        value = params.decode(raw[offset:offset + w])
        offset += w
        return value

    block_id = element()
    address = None
    if not genesis:
        address = BlockAddress(active=element(), passive=element())
    a_forward = element()
    a_backward = None if genesis else element()
    tag = raw[offset:offset + TAG_SIZE]
    offset += TAG_SIZE
    p_forward = element()
    p_backward = None if genesis else element()
    server_link = element()
    content = None
    if has_content:
        point_x, point_y, key_x, supervisor_y = element(), element(), element(), element()
        (ct_len,) = struct.unpack_from(">I", raw, offset)
        offset += 4
        ciphertext = raw[offset:offset + ct_len]
        offset += ct_len
        content = BlockContent(point_x, point_y, key_x, supervisor_y, ciphertext)
    checksum = raw[offset:offset + CHECKSUM_SIZE]
    offset += CHECKSUM_SIZE
    signature = Signature(challenge=element(), response=element())
    if offset != len(raw):
        raise ValueError("trailing bytes after block")
    return Block(block_id, seq, timestamp, prev_checksum, address,
                 ActivePart(a_forward, a_backward, tag),
                 PassivePart(p_forward, p_backward, server_link),
                 content, checksum, signature)


# -- construction -------------------------------------------------------------

def _claim_tag(params: GroupParams, public: int, shared: int) -> bytes:
    """Tag binding `public` to a server-verifiable shared value."""
    return groups.hash_to_key(params.encode((shared * public) % params.p))


def verify_active_claim(params: GroupParams, block: Block, active_public: int,
                        claim: int, server_private: int) -> bool:
    """Check claim = forward^private for the given block and public key."""
    shared = pow(claim, server_private, params.p)
    return _claim_tag(params, active_public, shared) == block.active.tag


def make_genesis_block(params: GroupParams, public_key: int, server_keypair: KeyPair,
                       link_exponent: int, seq: int, prev_checksum: bytes,
                       timestamp: int, rng: random.Random | None = None) -> Block:
    """First block of a user's chains; the one nonce serves both halves."""
    rng = rng or _SYSRAND
    p, n = params.p, params.p - 1
    nonce = groups.sample_noninvertible_exponent(params, rng)
    forward = pow(params.g, nonce, p)
    shared = pow(public_key, (server_keypair.private * nonce) % n, p)
    tag = _claim_tag(params, public_key, shared)
    server_link = (groups.element_hash_field(params, pow(params.g, (server_keypair.private * nonce) % n, p))
                   * pow(public_key, (link_exponent * nonce) % n, p)) % p
    block = Block(
        block_id=groups.hash_to_field(params, params.encode(public_key)),
        seq=seq,
        timestamp=timestamp,
        prev_checksum=prev_checksum,
        address=None,
        active=ActivePart(forward=forward, backward=None, tag=tag),
        passive=PassivePart(forward=forward, backward=None, server_link=server_link),
        content=None,
        checksum=b"",
        signature=Signature(0, 0),
    )
    return _finalize(params, block, server_keypair, rng)


def _finalize(params: GroupParams, block: Block, server_keypair: KeyPair,
              rng: random.Random) -> Block:
    checksum = block_checksum(params, block)
    signature = sign(params, checksum, server_keypair, rng)
    return replace(block, checksum=checksum, signature=signature)


def construct_block(params: GroupParams, *, prev_active: Block, prev_passive: Block,
                    active_public: int, passive_public: int, claim: int,
                    active_nonce: int, passive_nonce: int,
                    server_keypair: KeyPair, link_exponent: int, link_exponent_inv: int,
                    access_base: int, view_base: int,
                    plaintext: ContentPlaintext, seq: int, prev_checksum: bytes,
                    rng: random.Random | None = None) -> Block:
    """Assemble, id, checksum and sign the block for one access event.

    `claim` is forward^private of `prev_active` as supplied by the active
    user; `access_base` is the reconstructed anchor key raised to the server
    private exponent, needed only for the supervisor escrow.
    """
    rng = rng or _SYSRAND
    p, n = params.p, params.p - 1
    if not verify_active_claim(params, prev_active, active_public, claim, server_keypair.private):
        raise InvalidClaim("claim does not match the previous active block")
    if math.gcd(active_nonce, n) == 1 or math.gcd(passive_nonce, n) == 1:
        raise ParityConstraintViolated("nonces must have no inverse mod p-1")
    active_x = groups.key_field(params, groups.hash_to_key(params.encode(claim)))
    passive_x = groups.key_field(
        params, groups.hash_to_key(params.encode(pow(passive_public, active_nonce, p))))
    if (active_x & 1) == (passive_x & 1):
        raise ParityConstraintViolated("nonce fails the hash-parity inequality")

    active = ActivePart(
        forward=pow(params.g, active_nonce, p),
        backward=(groups.element_hash_field(params, pow(active_public, passive_nonce, p))
                  * prev_active.active.forward) % p,
        tag=_claim_tag(params, active_public,
                       pow(active_public, (server_keypair.private * active_nonce) % n, p)),
    )
    passive = PassivePart(
        forward=pow(params.g, passive_nonce, p),
        backward=(groups.element_hash_field(params, pow(passive_public, active_nonce, p))
                  * prev_passive.passive.forward) % p,
        server_link=(groups.element_hash_field(
            params, pow(params.g, (server_keypair.private * passive_nonce) % n, p))
            * pow(passive_public, (link_exponent * passive_nonce) % n, p)) % p,
    )
    address = BlockAddress(
        active=(prev_active.block_id * groups.element_hash_field(params, claim)) % p,
        passive=(prev_passive.block_id * groups.element_hash_field(
            params, _server_unwrap(params, prev_passive, server_keypair.private,
                                   link_exponent_inv))) % p,
    )
    content = encrypt_content(params, active_x, passive_x, address, plaintext,
                              access_base, view_base, rng)
    block = Block(
        block_id=0,
        seq=seq,
        timestamp=plaintext.timestamp,
        prev_checksum=prev_checksum,
        address=address,
        active=active,
        passive=passive,
        content=content,
        checksum=b"",
        signature=Signature(0, 0),
    )
    block = replace(block, block_id=_derive_id(params, block))
    return _finalize(params, block, server_keypair, rng)


# -- traversal ----------------------------------------------------------------

def active_forward_address(params: GroupParams, block: Block, private: int) -> int:
    """Index address of the caller's next active block."""
    return (block.block_id
            * groups.element_hash_field(params, pow(block.active.forward, private, params.p))) % params.p


def active_backward(params: GroupParams, block: Block, private: int) -> int:
    """Previous active block id, computed without an index lookup."""
    if block.is_genesis:
        raise ValueError("genesis block has no predecessor")
    p = params.p
    masked = groups.field_div(
        block.active.backward,
        groups.element_hash_field(params, pow(block.passive.forward, private, p)), params)
    return groups.field_div(
        block.address.active,
        groups.element_hash_field(params, pow(masked, private, p)), params)


def passive_forward_address(params: GroupParams, block: Block, private: int) -> int:
    return (block.block_id
            * groups.element_hash_field(params, pow(block.passive.forward, private, params.p))) % params.p


def passive_backward(params: GroupParams, block: Block, private: int) -> int:
    if block.is_genesis:
        raise ValueError("genesis block has no predecessor")
    p = params.p
    masked = groups.field_div(
        block.passive.backward,
        groups.element_hash_field(params, pow(block.active.forward, private, p)), params)
    return groups.field_div(
        block.address.passive,
        groups.element_hash_field(params, pow(masked, private, p)), params)


def _server_unwrap(params: GroupParams, block: Block, server_private: int,
                   link_exponent_inv: int) -> int:
    """Recover g^(private_v * nonce_v) from the server link without the patient key."""
    p = params.p
    wrapped = groups.field_div(
        block.passive.server_link,
        groups.element_hash_field(params, pow(block.passive.forward, server_private, p)), params)
    return pow(wrapped, link_exponent_inv, p)


def server_passive_forward_address(params: GroupParams, block: Block,
                                   server_private: int, link_exponent_inv: int) -> int:
    """Same address as passive_forward_address, computed with server secrets."""
    unwrapped = _server_unwrap(params, block, server_private, link_exponent_inv)
    return (block.block_id * groups.element_hash_field(params, unwrapped)) % params.p


# -- content ------------------------------------------------------------------

def _line_through(params: GroupParams, x0: int, y0: int, x1: int, y1: int) -> tuple[int, int]:
    """Slope and intercept of the Z_p line through two points, x0 != x1."""
    p = params.p
    slope = groups.field_div(y1 - y0, x1 - x0, params)
    intercept = (y0 - slope * x0) % p
    return slope, intercept


def _content_key(params: GroupParams, key_field_value: int) -> bytes:
    return params.encode(key_field_value)


def encrypt_content(params: GroupParams, active_x: int, passive_x: int,
                    address: BlockAddress, plaintext: ContentPlaintext,
                    access_base: int, view_base: int,
                    rng: random.Random | None = None) -> BlockContent:
    """Seal plaintext on the line through the participants' secret points.

    active_x/passive_x are the Z_p interpretations of the participants' key
    hashes (guaranteed distinct by the nonce parity rule); their y values
    are the block's own two addresses.  The published point's x must have
    no inverse mod p-1 or the escrow suffix base could be stripped and
    reused across blocks.
    """
    rng = rng or _SYSRAND
    p, n = params.p, params.p - 1
    if active_x == passive_x:
        raise DegenerateLine("participant x coordinates coincide")
    slope, intercept = _line_through(params, active_x, address.passive,
                                     passive_x, address.active)
    while True:
        point_x = groups.sample_noninvertible_exponent(params, rng)
        if point_x not in (active_x, passive_x):
            break
    point_y = (slope * point_x + intercept) % p
    while True:
        key_x = rng.randrange(0, p)
        if key_x != point_x:  # otherwise the key point would be public
            break
    key_y = (slope * key_x + intercept) % p
    key_field_value = groups.key_field(params, groups.hash_to_key(params.encode(key_y)))
    ciphertext = sym_encrypt(_content_key(params, key_field_value),
                             serialize_plaintext(params, plaintext))
    supervisor_y = (key_field_value * pow((access_base * view_base) % p, point_x, p)) % p
    return BlockContent(point_x, point_y, key_x, supervisor_y, ciphertext)


def _decrypt_with_point(params: GroupParams, block: Block, x: int, y: int) -> ContentPlaintext:
    content = block.content
    if content is None:
        raise AuthenticationFailure("block has no content")
    if x == content.point_x:
        raise AuthenticationFailure("cannot interpolate the content line")
    slope, intercept = _line_through(params, x, y, content.point_x, content.point_y)
    key_y = (slope * content.key_x + intercept) % params.p
    key_field_value = groups.key_field(params, groups.hash_to_key(params.encode(key_y)))
    raw = sym_decrypt(_content_key(params, key_field_value), content.ciphertext)
    return parse_plaintext(params, raw)


def decrypt_content_active(params: GroupParams, block: Block,
                           prev_active_forward: int, private: int) -> ContentPlaintext:
    """Open content as the active participant, given their previous block's forward link."""
    x = groups.key_field(
        params, groups.hash_to_key(params.encode(pow(prev_active_forward, private, params.p))))
    return _decrypt_with_point(params, block, x, block.address.passive)


def decrypt_content_passive(params: GroupParams, block: Block, private: int) -> ContentPlaintext:
    """Open content as the passive participant; needs only the block itself."""
    x = groups.key_field(
        params, groups.hash_to_key(params.encode(pow(block.active.forward, private, params.p))))
    return _decrypt_with_point(params, block, x, block.address.active)


def decrypt_content_supervisor(params: GroupParams, block: Block, access_key: int,
                               view_key: int, private_inv: int) -> ContentPlaintext:
    """Open content via the supervisor escrow; works on every non-genesis block."""
    content = block.content
    if content is None:
        raise AuthenticationFailure("block has no content")
    p = params.p
    base = (pow(view_key, private_inv, p) * pow(access_key, private_inv, p)) % p
    key_field_value = groups.field_div(content.supervisor_y, pow(base, content.point_x, p), params)
    raw = sym_decrypt(_content_key(params, key_field_value), content.ciphertext)
    return parse_plaintext(params, raw)
