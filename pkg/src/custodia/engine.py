"""Transport-agnostic server engine.

Drives protocol sessions against the stores.  Stage 1 verifies the identity
claim and that the claimed block really is the caller's newest active
block; stage 2 reconstructs the anchor key, executes the action and appends
the matching ledger block.  Action effects and the block are committed as
one atomic batch: either both land or neither does, so a ledger block
exists exactly when an action committed.

Stage-2 commits are serialised through one lock, which gives the ledger its
total time order.  Sessions are single-use and the reconstructed anchor key
never outlives the call that used it.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass

from . import blocks as blk
from . import groups, protocol, wire
from .anchors import AnchorStore
from .chain import LedgerStore
from .timing import cpu_now_ns
from .errors import (
    AuthenticationFailure,
    CustodiaError,
    ProtocolReject,
    UnknownBlock,
)
from .groups import GroupParams
from .provisioning import ServerSecrets
from .registry import CUSTODIAN_ROLES, ROLE_PATIENT, UserRegistry
from .storage import KVStore, StagedStore
from .wire import (
    ACTION_DELETE,
    ACTION_FETCH,
    ACTION_IDENTIFY,
    ACTION_INSERT,
    REJECT_ACTION_FAILED,
    REJECT_BAD_CLAIM,
    REJECT_NOT_LAST_BLOCK,
    REJECT_ORDER,
    REJECT_UNKNOWN_BLOCK,
    Stage1Request,
    Stage1Response,
    Stage2Request,
    Stage2Response,
)

_SESSION_TTL_SECONDS = 600
_MAX_SESSIONS = 1024


@dataclass
class ServerSession:
    session_id: str
    active_public: int
    last_block_id: int
    claim: int
    blind_factor: int
    blind_factor_inv: int
    created: int
    stage1_cpu_ns: int = 0


class ServerEngine:
    def __init__(self, store: KVStore, params: GroupParams, secrets: ServerSecrets,
                 *, rng: random.Random | None = None, clock=None, cpu_clock=None,
                 cache_tails: bool = True) -> None:
        self._store = store
        self.params = params
        self._secrets = secrets
        self._rng = rng or random.SystemRandom()
        self._clock = clock or (lambda: int(time.time()))
        self._cpu = cpu_clock or cpu_now_ns
        self.ledger = LedgerStore(store, params)
        self.registry = UserRegistry(store, params)
        self.anchors = AnchorStore(store, params, secrets.anchor_key_commitment)
        self._sessions: dict[str, ServerSession] = {}
        self._sessions_lock = threading.Lock()
        self._commit_lock = threading.Lock()
        self._cache_tails = cache_tails
        self._tail_cache: dict[int, int] = {}

    # -- public read surface ------------------------------------------------

    def info(self) -> wire.Info:
        return wire.Info(wire.PROTOCOL_VERSION, self.params,
                         self._secrets.server_keypair.public)

    def read_block_raw(self, block_id: int) -> bytes | None:
        return self.ledger.read_block_raw(block_id)

    def read_seq_raw(self, seq: int) -> bytes | None:
        try:
            block = self.ledger.read_seq(seq)
        except UnknownBlock:
            return None
        return self.ledger.read_block_raw(block.block_id)

    def lookup_address(self, address: int) -> int | None:
        return self.ledger.lookup_address(address)

    def tail(self) -> wire.Tail | None:
        tail = self.ledger.tail()
        if tail is None:
            return None
        seq, checksum, block_id = tail
        return wire.Tail(seq, block_id, checksum)

    def verify_chain(self) -> list[str]:
        return self.ledger.verify_chain(self._secrets.server_keypair.public)

    # -- sessions -------------------------------------------------------------

    def _prune_sessions(self, now: int) -> None:
        dead = [sid for sid, s in self._sessions.items()
                if now - s.created > _SESSION_TTL_SECONDS]
        for sid in dead:
            del self._sessions[sid]
        while len(self._sessions) >= _MAX_SESSIONS:
            oldest = min(self._sessions.values(), key=lambda s: s.created)
            del self._sessions[oldest.session_id]

    def stage1(self, request: Stage1Request) -> tuple[str, Stage1Response]:
        cpu_start = self._cpu()
        params = self.params
        user = self.registry.get(request.active_public)
        if user is None or user.role not in CUSTODIAN_ROLES:
            raise ProtocolReject(REJECT_BAD_CLAIM, "unknown or unauthorized public key")
        try:
            last_block = self.ledger.read_block(request.last_block_id)
        except UnknownBlock:
            raise ProtocolReject(REJECT_UNKNOWN_BLOCK, "claimed block not in ledger") from None
        if not blk.verify_active_claim(params, last_block, request.active_public,
                                       request.claim, self._secrets.server_keypair.private):
            raise ProtocolReject(REJECT_BAD_CLAIM, "identity claim failed verification")
        candidate = (last_block.block_id
                     * groups.element_hash_field(params, request.claim)) % params.p
        if self.ledger.lookup_address(candidate) is not None:
            raise ProtocolReject(REJECT_NOT_LAST_BLOCK, "claimed block is not the newest")

        blind_factor = groups.sample_invertible_exponent(params, self._rng)
        blinded = (blind_factor
                   * pow(request.active_public, self._secrets.server_keypair.private, params.p)) % params.p
        now = self._clock()
        session = ServerSession(
            session_id=f"{self._rng.getrandbits(128):032x}",
            active_public=request.active_public,
            last_block_id=request.last_block_id,
            claim=request.claim,
            blind_factor=blind_factor,
            blind_factor_inv=groups.exponent_inverse(blind_factor, params),
            created=now,
            stage1_cpu_ns=0,
        )
        session.stage1_cpu_ns = self._cpu() - cpu_start
        with self._sessions_lock:
            self._prune_sessions(now)
            self._sessions[session.session_id] = session
        return session.session_id, Stage1Response(blinded_factor=blinded)

    def stage2(self, session_id: str, request: Stage2Request) -> Stage2Response:
        cpu_start = self._cpu()
        with self._sessions_lock:
            session = self._sessions.pop(session_id, None)
        if session is None:
            raise ProtocolReject(REJECT_ORDER, "no open session; run stage 1 first")
        try:
            with self._commit_lock:
                response = self._execute(session, request)
        finally:
            # Session material is single-use regardless of outcome.
            session.blind_factor = 0
            session.blind_factor_inv = 0
        cpu_ns = session.stage1_cpu_ns + (self._cpu() - cpu_start)
        return Stage2Response(
            action=response.action, cpu_ns=cpu_ns, block_id=response.block_id,
            patient=response.patient, records=response.records,
            anchor_ids=response.anchor_ids,
        )

    # -- stage-2 internals ------------------------------------------------------

    def _execute(self, session: ServerSession, request: Stage2Request) -> Stage2Response:
        params = self.params
        access_base, anchor_key = protocol.unblind_access(
            params, request.blinded_access, session.blind_factor_inv,
            self._secrets.server_keypair.private_inv)

        # The stage-1 freshness check can be stale by now: another session of
        # the same custodian may have committed while this one was in flight.
        candidate = (session.last_block_id
                     * groups.element_hash_field(params, session.claim)) % params.p
        if self.ledger.lookup_address(candidate) is not None:
            raise ProtocolReject(REJECT_NOT_LAST_BLOCK, "claimed block was superseded")

        staged = StagedStore(self._store)
        anchors = AnchorStore(staged, params, self._secrets.anchor_key_commitment)
        ledger = LedgerStore(staged, params)

        try:
            passive_public, patient, records, anchor_ids = self._apply_action(
                anchors, anchor_key, request)
        except ProtocolReject:
            raise
        except CustodiaError as exc:
            raise ProtocolReject(REJECT_ACTION_FAILED, str(exc)) from exc

        passive_user = self.registry.get(passive_public)
        if passive_user is None or passive_user.role != ROLE_PATIENT:
            raise ProtocolReject(REJECT_ACTION_FAILED, "passive user is not a registered patient")

        prev_active = ledger.read_block(session.last_block_id)
        prev_passive = self._passive_tail(ledger, passive_public, passive_user.genesis_id)
        active_nonce, passive_nonce = protocol.sample_block_nonces(
            params, passive_public, session.claim, self._rng)
        plaintext = blk.ContentPlaintext(
            active_public=session.active_public,
            passive_public=passive_public,
            action=request.action,
            data_digest=blk.data_digest(request.data_bytes(params)),
            timestamp=self._clock(),
        )
        seq, prev_checksum = ledger.next_position()
        block = blk.construct_block(
            params,
            prev_active=prev_active,
            prev_passive=prev_passive,
            active_public=session.active_public,
            passive_public=passive_public,
            claim=session.claim,
            active_nonce=active_nonce,
            passive_nonce=passive_nonce,
            server_keypair=self._secrets.server_keypair,
            link_exponent=self._secrets.link_exponent,
            link_exponent_inv=self._secrets.link_exponent_inv,
            access_base=access_base,
            view_base=self._secrets.view_base,
            plaintext=plaintext,
            seq=seq,
            prev_checksum=prev_checksum,
            rng=self._rng,
        )
        ledger.append_block(block)
        self._store.apply_batch(staged.ops())
        if self._cache_tails:
            self._tail_cache[passive_public] = block.block_id
        return Stage2Response(action=request.action, cpu_ns=0, block_id=block.block_id,
                              patient=patient, records=records, anchor_ids=anchor_ids)

    def _apply_action(self, anchors: AnchorStore, anchor_key: int, request: Stage2Request):
        """Run the action; returns (passive_public, patient, records, anchor_ids)."""
        if request.action == ACTION_IDENTIFY:
            anchor = anchors.get_anchor(request.anchor_id)
            owner = anchors.identify_record(anchor_key, anchor)
            return owner, owner, (), ()
        if request.action == ACTION_FETCH:
            fetched = anchors.fetch_records(anchor_key, request.patient)
            records = tuple((a.owner_cipher, a.payload) for a in fetched)
            return request.patient, 0, records, ()
        if request.action == ACTION_INSERT:
            created = anchors.append_records(anchor_key, request.patient,
                                             list(request.payloads), self._rng)
            return request.patient, 0, (), tuple(a.owner_cipher for a in created)
        if request.action == ACTION_DELETE:
            anchor = anchors.get_anchor(request.anchor_id)
            owner = anchors.identify_record(anchor_key, anchor)
            anchors.delete_record(anchor_key, anchor)
            return owner, 0, (), ()
        raise ProtocolReject(wire.REJECT_UNSUPPORTED, f"unknown action {request.action}")

    def _passive_tail(self, ledger: LedgerStore, passive_public: int,
                      genesis_id: int) -> blk.Block:
        """Newest block on the patient's passive chain, via the server link walk."""
        start = self._tail_cache.get(passive_public, genesis_id) if self._cache_tails else genesis_id
        try:
            block = ledger.read_block(start)
        except UnknownBlock:
            block = ledger.read_block(genesis_id)
        secrets = self._secrets
        while True:
            address = blk.server_passive_forward_address(
                self.params, block, secrets.server_keypair.private, secrets.link_exponent_inv)
            next_id = ledger.lookup_address(address)
            if next_id is None:
                return block
            block = ledger.read_block(next_id)
