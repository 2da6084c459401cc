"""Shared fixtures: toy group, frozen 256-bit group, and a world harness.

The ``World`` harness drives the engine through the full two-stage protocol
while keeping its own plain-Python ground truth (per-user chains, per-patient
record lists, block participants).  Tests compare what the system under test
reports against these independently maintained logs.
"""

from __future__ import annotations

import random

import pytest

from custodia import groups, protocol, wire
from custodia.engine import ServerEngine
from custodia.provisioning import provision
from custodia.storage import MemoryStore

TOY = groups.GroupParams(p=23, q=11, g=5)

# Frozen 256-bit safe-prime fixture (generated once with a seeded search) so
# the suite never pays for parameter generation.
P256 = int("e36d1f9d5a8126627cb89a587acd3ad144d3e80ef5bec1654ecfe079c5a6c343", 16)
Q256 = int("71b68fcead4093313e5c4d2c3d669d68a269f4077adf60b2a767f03ce2d361a1", 16)
G256 = int("35bf992dc9e9c616612e7696a6cecc1b78e510617311d8a3c2ce6f447ed4d57d", 16)
FIX256 = groups.GroupParams(p=P256, q=Q256, g=G256)


@pytest.fixture(scope="session")
def toy_params() -> groups.GroupParams:
    return TOY


@pytest.fixture(scope="session")
def params256() -> groups.GroupParams:
    return FIX256


class World:
    """A provisioned in-memory system plus independently tracked ground truth."""

    def __init__(self, params: groups.GroupParams = FIX256, *, managers: int = 2,
                 supervisors: int = 1, patients: int = 2, seed: int = 0,
                 clock_start: int = 1_700_000_000) -> None:
        self.params = params
        self.rng = random.Random(seed)
        self.now = clock_start
        self.store = MemoryStore()
        self.system = provision(self.store, params, managers=managers,
                                supervisors=supervisors, patients=patients,
                                rng=self.rng, clock=lambda: self.now)
        self.engine = ServerEngine(self.store, params, self.system.secrets,
                                   rng=self.rng, clock=lambda: self.now)
        self.creds = self.system.credentials
        self.custodians = sorted(label for label, c in self.creds.items()
                                 if c.role in ("manager", "supervisor"))
        self.patients = sorted(label for label, c in self.creds.items()
                               if c.role == "patient")
        # ground truth, maintained without consulting the stores
        self.active_log: dict[str, list[int]] = {
            label: [c.genesis_id] for label, c in self.creds.items()}
        self.passive_log: dict[str, list[int]] = {
            label: [c.genesis_id] for label, c in self.creds.items()}
        self.last_active: dict[str, int] = {
            label: c.genesis_id for label, c in self.creds.items()}
        self.records: dict[str, list[tuple[bytes, bytes]]] = {
            label: [] for label in self.patients}
        self.anchor_owner: dict[bytes, str] = {}
        self.participants: dict[int, tuple[str, str, int]] = {}  # block -> (active, passive, action)

    # -- helpers ----------------------------------------------------------

    def public(self, label: str) -> int:
        return self.creds[label].keypair.public

    def label_of_public(self, public: int) -> str:
        for label, cred in self.creds.items():
            if cred.keypair.public == public:
                return label
        raise KeyError(public)

    def tick(self) -> None:
        self.now += 1

    def stage1(self, who: str):
        cred = self.creds[who]
        last = self.engine.ledger.read_block(self.last_active[who])
        request = protocol.begin_request(self.params, cred.keypair, last)
        session_id, response = self.engine.stage1(request)
        factor = protocol.extract_blind_factor(
            self.params, response, cred.keypair,
            self.system.secrets.server_keypair.public)
        return session_id, factor

    def act(self, who: str, action: int, *, patient: str | None = None,
            payloads: tuple[bytes, ...] = (), anchor_id: bytes | None = None):
        cred = self.creds[who]
        session_id, factor = self.stage1(who)
        kwargs: dict = {}
        if action in (wire.ACTION_IDENTIFY, wire.ACTION_DELETE):
            assert anchor_id is not None
            kwargs["anchor_id"] = anchor_id
        if action in (wire.ACTION_FETCH, wire.ACTION_INSERT):
            assert patient is not None
            kwargs["patient"] = self.public(patient)
        if action == wire.ACTION_INSERT:
            kwargs["payloads"] = payloads
        request = protocol.build_stage2(self.params, cred.keypair, cred.access_key,
                                        factor, action, **kwargs)
        response = self.engine.stage2(session_id, request)
        self._bookkeep(who, action, response, patient, payloads, anchor_id)
        return response

    def _bookkeep(self, who, action, response, patient, payloads, anchor_id) -> None:
        self.tick()
        if action in (wire.ACTION_IDENTIFY, wire.ACTION_DELETE):
            passive_label = self.anchor_owner[anchor_id]
        else:
            passive_label = patient
        self.last_active[who] = response.block_id
        self.active_log[who].append(response.block_id)
        self.passive_log[passive_label].append(response.block_id)
        self.participants[response.block_id] = (who, passive_label, action)
        if action == wire.ACTION_INSERT:
            pairs = self.records[passive_label]
            for aid, payload in zip(response.anchor_ids, payloads):
                pairs.append((aid, payload))
                self.anchor_owner[aid] = passive_label
        elif action == wire.ACTION_DELETE:
            pairs = self.records[passive_label]
            idx = next(i for i, (aid, _) in enumerate(pairs) if aid == anchor_id)
            removed_id = pairs.pop(idx)[0]
            del self.anchor_owner[anchor_id]
            if idx < len(pairs):
                # chain repair slides the successor into the deleted slot
                old_successor_id = pairs[idx][0]
                del self.anchor_owner[old_successor_id]
                pairs[idx] = (removed_id, pairs[idx][1])
                self.anchor_owner[removed_id] = passive_label

    def random_event(self) -> None:
        """One randomly chosen valid access event."""
        who = self.rng.choice(self.custodians)
        anchored = [aid for aid, _ in self.anchor_owner.items()]
        roll = self.rng.random()
        if roll < 0.5 or not anchored:
            patient = self.rng.choice(self.patients)
            count = self.rng.randint(1, 3)
            payloads = tuple(f"{patient}-r{len(self.records[patient]) + i}-{self.now}".encode()
                             for i in range(count))
            self.act(who, wire.ACTION_INSERT, patient=patient, payloads=payloads)
        elif roll < 0.7:
            patient = self.rng.choice(self.patients)
            self.act(who, wire.ACTION_FETCH, patient=patient)
        elif roll < 0.9:
            self.act(who, wire.ACTION_IDENTIFY, anchor_id=self.rng.choice(anchored))
        else:
            self.act(who, wire.ACTION_DELETE, anchor_id=self.rng.choice(anchored))


@pytest.fixture
def world() -> World:
    return World()
