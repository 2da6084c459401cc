"""Daemon lifecycle: provisioning hygiene, TCP endpoint, restart recovery."""

import random
import socket
import struct
import threading

import pytest

from custodia import blocks as blk
from custodia import groups, protocol, provisioning, wire
from custodia.anchors import MEDICAL_PREFIX
from custodia.client import TcpClient
from custodia.engine import ServerEngine
from custodia.errors import ProtocolReject, StateCorrupted
from custodia.server import ServerConfig, TrustedServer
from custodia.storage import FileStore, MemoryStore

from conftest import FIX256, World


# -- provisioning ---------------------------------------------------------------

class SecretSpy:
    def __init__(self):
        self.anchor_exponent = None
        self.anchor_key = None
        self.view_exponent = None

    def install(self, monkeypatch):
        real = provisioning._sample_master_secrets

        def wrapped(params, rng):
            result = real(params, rng)
            self.anchor_exponent, self.anchor_key, _, self.view_exponent = result
            return result

        monkeypatch.setattr(provisioning, "_sample_master_secrets", wrapped)


class TestProvisioning:
    def test_population_counts(self):
        store = MemoryStore()
        system = provisioning.provision(store, FIX256, managers=5, supervisors=4,
                                        patients=7, rng=random.Random(0),
                                        clock=lambda: 0)
        assert len(system.credentials) == 16
        engine = ServerEngine(store, FIX256, system.secrets)
        assert engine.ledger.tail()[0] == 15  # 16 genesis blocks
        identities = [c for c in system.credentials.values() if c.role == "patient"]
        assert len(identities) == 7
        for cred in identities:
            assert engine.anchors.get_identity(cred.keypair.public)
        managers = [c for c in system.credentials.values() if c.role == "manager"]
        supervisors = [c for c in system.credentials.values() if c.role == "supervisor"]
        assert all(c.access_key and not c.view_key for c in managers)
        assert all(c.access_key and c.view_key for c in supervisors)
        assert all(not c.access_key for c in identities)

    def test_double_provision_rejected(self):
        store = MemoryStore()
        provisioning.provision(store, FIX256, managers=1, supervisors=1, patients=1,
                               rng=random.Random(0), clock=lambda: 0)
        with pytest.raises(StateCorrupted):
            provisioning.provision(store, FIX256, managers=1, supervisors=1,
                                   patients=1, rng=random.Random(1), clock=lambda: 0)

    def test_master_secrets_never_persisted(self, tmp_path, monkeypatch):
        """Byte-scan of everything on disk for the transient master material."""
        spy = SecretSpy()
        spy.install(monkeypatch)
        store = FileStore(tmp_path / "state.kv")
        system = provisioning.provision(store, FIX256, managers=2, supervisors=2,
                                        patients=3, rng=random.Random(3),
                                        clock=lambda: 0)
        store.close()
        assert spy.anchor_key == pow(FIX256.g, spy.anchor_exponent, FIX256.p)
        needles = {
            "anchor exponent": FIX256.encode(spy.anchor_exponent),
            "anchor key": FIX256.encode(spy.anchor_key),
            "view exponent": FIX256.encode(spy.view_exponent),
        }
        for path in tmp_path.rglob("*"):
            if not path.is_file():
                continue
            haystack = path.read_bytes()
            for name, needle in needles.items():
                assert needle not in haystack, f"{name} leaked into {path.name}"

    def test_access_keys_unlock_the_anchor_key(self, monkeypatch):
        spy = SecretSpy()
        spy.install(monkeypatch)
        store = MemoryStore()
        system = provisioning.provision(store, FIX256, managers=1, supervisors=1,
                                        patients=1, rng=random.Random(4),
                                        clock=lambda: 0)
        cred = system.credentials["manager-1"]
        factor = groups.sample_invertible_exponent(FIX256, random.Random(5))
        blinded = protocol.blind_access_key(FIX256, cred.keypair, cred.access_key, factor)
        _, anchor_key = protocol.unblind_access(
            FIX256, blinded, groups.exponent_inverse(factor, FIX256),
            system.secrets.server_keypair.private_inv)
        assert anchor_key == spy.anchor_key

    def test_enroll_patient_after_bootstrap(self):
        store = MemoryStore()
        rng = random.Random(6)
        system = provisioning.provision(store, FIX256, managers=1, supervisors=1,
                                        patients=1, rng=rng, clock=lambda: 0)
        newcomer = groups.generate_keypair(FIX256, rng)
        record = provisioning.enroll_patient(store, FIX256, system.secrets,
                                             newcomer.public, b"late arrival",
                                             rng=rng, clock=lambda: 1)
        engine = ServerEngine(store, FIX256, system.secrets, rng=rng, clock=lambda: 2)
        assert engine.registry.get(newcomer.public).role == "patient"
        assert engine.ledger.read_block(record.genesis_id).is_genesis
        assert engine.verify_chain() == []
        with pytest.raises(ValueError):
            provisioning.enroll_patient(store, FIX256, system.secrets,
                                        newcomer.public, b"", rng=rng)
        with pytest.raises(ValueError):
            provisioning.enroll_patient(store, FIX256, system.secrets, 0, b"", rng=rng)


# -- TCP endpoint -----------------------------------------------------------------

@pytest.fixture
def tcp_world(tmp_path):
    world = World(managers=5, supervisors=2, patients=3, seed=9)
    config = ServerConfig(state_dir=tmp_path, listen_host="127.0.0.1",
                          listen_port=0, http_port=0)
    server = TrustedServer(config, engine=world.engine)
    server.start_background()
    host, port = server.tcp_address
    yield world, host, port
    server.shutdown()


class TestTcpEndpoint:
    def test_end_to_end_identify_roundtrip(self, tcp_world):
        world, host, port = tcp_world
        inserted = world.act("manager-1", wire.ACTION_INSERT, patient="patient-1",
                             payloads=(b"tcp-record",))
        client = TcpClient(host, port)
        info = client.info()
        assert info.params.p == world.params.p

        cred = world.creds["manager-2"]
        keyfile_like = _keyfile(world, "manager-2")
        last = blk.deserialize_block(world.params,
                                     client.read_block_raw(cred.genesis_id))
        from custodia.client import run_action
        response = run_action(client, keyfile_like, last, wire.ACTION_IDENTIFY,
                              anchor_id=inserted.anchor_ids[0])
        assert response.patient == world.public("patient-1")
        assert client.read_block_raw(response.block_id) is not None
        client.close()

    def test_reads_and_misses(self, tcp_world):
        world, host, port = tcp_world
        client = TcpClient(host, port)
        tail = client.tail()
        assert tail is not None
        raw = client.read_seq_raw(0)
        assert raw is not None
        assert client.read_seq_raw(10_000) is None
        assert client.read_block_raw(123456) is None
        assert client.lookup_address(987654) is None
        client.close()

    def test_malformed_input_gets_typed_reject_and_survives(self, tcp_world):
        world, host, port = tcp_world
        # garbage that parses as a frame header with a bogus payload
        with socket.create_connection((host, port), timeout=5) as sock:
            sock.sendall(wire.encode_frame(wire.MSG_STAGE1_REQUEST, b"too short"))
            msg_type, payload = wire.read_frame(sock.recv)
            assert msg_type == wire.MSG_REJECT
            assert wire.decode_reject(payload).code == wire.REJECT_MALFORMED
            # connection is still usable afterwards
            sock.sendall(wire.encode_info_request())
            msg_type, _ = wire.read_frame(sock.recv)
            assert msg_type == wire.MSG_INFO_RESPONSE
        # an unknown message type
        with socket.create_connection((host, port), timeout=5) as sock:
            sock.sendall(wire.encode_frame(0x7F, b""))
            msg_type, payload = wire.read_frame(sock.recv)
            assert wire.decode_reject(payload).code == wire.REJECT_UNSUPPORTED
        # a broken frame header closes the connection but not the server
        with socket.create_connection((host, port), timeout=5) as sock:
            sock.sendall(struct.pack(">I", wire.MAX_FRAME + 5) + b"\x01")
            msg_type, payload = wire.read_frame(sock.recv)
            assert wire.decode_reject(payload).code == wire.REJECT_MALFORMED
            assert sock.recv(1) == b""  # server closed its end
        # server still answers fresh connections
        client = TcpClient(host, port)
        assert client.info().version == wire.PROTOCOL_VERSION
        client.close()

    def test_random_fuzz_never_kills_the_daemon(self, tcp_world):
        world, host, port = tcp_world
        rng = random.Random(13)
        for _ in range(60):
            try:
                with socket.create_connection((host, port), timeout=5) as sock:
                    sock.sendall(rng.randbytes(rng.randint(1, 200)))
                    sock.settimeout(0.2)
                    try:
                        sock.recv(4096)
                    except (TimeoutError, socket.timeout):
                        pass
            except OSError:
                pass
        client = TcpClient(host, port)
        assert client.info().version == wire.PROTOCOL_VERSION
        client.close()

    def test_stage2_before_stage1_on_fresh_connection(self, tcp_world):
        world, host, port = tcp_world
        client = TcpClient(host, port)
        with pytest.raises(ProtocolReject) as err:
            client.stage2(wire.Stage2Request(wire.ACTION_FETCH, 1,
                                             patient=world.public("patient-1")))
        assert err.value.code == wire.REJECT_ORDER
        client.close()

    def test_concurrent_sessions_from_five_custodians(self, tcp_world):
        world, host, port = tcp_world
        from custodia.client import run_action
        errors = []
        done = []

        def one(label, index):
            try:
                client = TcpClient(host, port)
                keyfile_like = _keyfile(world, label)
                last = blk.deserialize_block(
                    world.params, client.read_block_raw(world.creds[label].genesis_id))
                response = run_action(client, keyfile_like, last, wire.ACTION_INSERT,
                                      patient=world.public(f"patient-{index % 3 + 1}"),
                                      payloads=(f"{label}-r".encode(),))
                done.append(response.block_id)
                client.close()
            except Exception as exc:  # noqa: BLE001
                errors.append((label, exc))

        threads = [threading.Thread(target=one, args=(f"manager-{i}", i))
                   for i in range(1, 6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=60)
        assert not errors
        assert len(set(done)) == 5
        assert world.engine.verify_chain() == []


def _keyfile(world: World, label: str):
    from custodia.keyfiles import KeyFile
    cred = world.creds[label]
    return KeyFile(role=cred.role, params=world.params,
                   server_public=world.system.secrets.server_keypair.public,
                   keypair=cred.keypair, access_key=cred.access_key,
                   view_key=cred.view_key)


# -- restart safety ------------------------------------------------------------------

class TestRestartSafety:
    def _provision_file_backed(self, tmp_path, seed=21):
        rng = random.Random(seed)
        store = FileStore(tmp_path / "state.kv")
        system = provisioning.provision(store, FIX256, managers=1, supervisors=1,
                                        patients=1, rng=rng, clock=lambda: 0)
        return store, system, rng

    def test_truncation_at_every_point_of_final_commit(self, tmp_path):
        """Kill the process at any byte of the last commit: after recovery the
        ledger and the record store agree exactly (block <=> action)."""
        store, system, rng = self._provision_file_backed(tmp_path)
        engine = ServerEngine(store, FIX256, system.secrets, rng=rng, clock=lambda: 1)
        manager = system.credentials["manager-1"]
        patient = system.credentials["patient-1"]

        def run_insert(current_engine, label, last_id):
            last = current_engine.ledger.read_block(last_id)
            request = protocol.begin_request(FIX256, manager.keypair, last)
            session_id, response = current_engine.stage1(request)
            factor = protocol.extract_blind_factor(FIX256, response, manager.keypair,
                                                   system.secrets.server_keypair.public)
            stage2 = protocol.build_stage2(FIX256, manager.keypair, manager.access_key,
                                           factor, wire.ACTION_INSERT,
                                           patient=patient.keypair.public,
                                           payloads=(label,))
            return current_engine.stage2(session_id, stage2)

        first = run_insert(engine, b"committed", manager.genesis_id)
        size_before = (tmp_path / "state.kv").stat().st_size
        head_before = (tmp_path / "state.kv.head").read_bytes()
        run_insert(engine, b"to-be-torn", first.block_id)
        store.close()
        size_after = (tmp_path / "state.kv").stat().st_size

        for cut in range(size_before, size_after, max(1, (size_after - size_before) // 17)):
            work = tmp_path / f"cut-{cut}"
            work.mkdir()
            original = (tmp_path / "state.kv").read_bytes()
            (work / "state.kv").write_bytes(original[:cut])
            (work / "state.kv.head").write_bytes(head_before)  # head update never landed
            recovered_store = FileStore(work / "state.kv")
            recovered = ServerEngine(recovered_store, FIX256, system.secrets,
                                     rng=random.Random(99), clock=lambda: 2)
            assert recovered.verify_chain() == []
            # block <=> action: the torn insert is fully gone
            tail_seq = recovered.ledger.tail()[0]
            assert tail_seq == 3  # 3 genesis + 1 committed insert
            anchors = [value for _, value in
                       recovered_store.scan_prefix(MEDICAL_PREFIX)]
            assert len(anchors) == 1
            recovered_store.close()

    def test_fully_committed_state_reopens_clean(self, tmp_path):
        store, system, rng = self._provision_file_backed(tmp_path, seed=22)
        engine = ServerEngine(store, FIX256, system.secrets, rng=rng, clock=lambda: 1)
        manager = system.credentials["manager-1"]
        patient = system.credentials["patient-1"]
        last = engine.ledger.read_block(manager.genesis_id)
        request = protocol.begin_request(FIX256, manager.keypair, last)
        session_id, response = engine.stage1(request)
        factor = protocol.extract_blind_factor(FIX256, response, manager.keypair,
                                               system.secrets.server_keypair.public)
        engine.stage2(session_id, protocol.build_stage2(
            FIX256, manager.keypair, manager.access_key, factor, wire.ACTION_INSERT,
            patient=patient.keypair.public, payloads=(b"r0", b"r1")))
        store.close()

        reopened = FileStore(tmp_path / "state.kv")
        params, secrets = provisioning.load_server_state(reopened)
        engine2 = ServerEngine(reopened, params, secrets, rng=random.Random(1),
                               clock=lambda: 5)
        assert engine2.verify_chain() == []
        # chain continues cleanly after the restart
        tail = engine2.ledger.tail()
        last = engine2.ledger.read_block(tail[2])
        request = protocol.begin_request(params, manager.keypair, last)
        session_id, response = engine2.stage1(request)
        factor = protocol.extract_blind_factor(params, response, manager.keypair,
                                               secrets.server_keypair.public)
        result = engine2.stage2(session_id, protocol.build_stage2(
            params, manager.keypair, manager.access_key, factor, wire.ACTION_FETCH,
            patient=patient.keypair.public))
        assert [p for _, p in result.records] == [b"r0", b"r1"]
        assert engine2.verify_chain() == []
        reopened.close()


# -- public reads leak nothing -------------------------------------------------------

class TestReadPrivacy:
    def test_block_reads_never_contain_patient_keys(self, world):
        for i in range(12):
            world.random_event()
        patient_needles = [world.params.encode(world.public(p)) for p in world.patients]
        tail_seq = world.engine.ledger.tail()[0]
        for seq in range(tail_seq + 1):
            raw = world.engine.read_seq_raw(seq)
            block = blk.deserialize_block(world.params, raw)
            if block.is_genesis:
                continue  # genesis ids derive from (public) registration
            for needle in patient_needles:
                assert needle not in raw
