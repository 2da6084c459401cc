"""Deterministic server + client session used for the wire golden vectors.

Every random draw, clock read and CPU-counter read is seeded or fixed, so
the byte stream of a full identify session is reproducible from scratch.
The recorded frames live in tests/golden/identify_session.bin; regenerate
with GOLDEN_REGEN=1 after an intentional wire format change.
"""

from __future__ import annotations

import random
import struct
from pathlib import Path

from custodia import protocol, wire
from custodia.client import TcpClient
from custodia.engine import ServerEngine
from custodia.provisioning import provision
from custodia.server import ServerConfig, TrustedServer
from custodia.storage import MemoryStore

from conftest import FIX256

GOLDEN_PATH = Path(__file__).parent / "golden" / "identify_session.bin"

PROVISION_SEED = 2024
ENGINE_SEED = 2025
CLOCK_START = 1_700_000_100


class CountingCpu:
    """Deterministic stand-in for the CPU clock: +1000ns per reading."""

    def __init__(self) -> None:
        self.now = 0

    def __call__(self) -> int:
        self.now += 1000
        return self.now


def build_golden_system():
    """Provision and pre-populate the deterministic system under test."""
    store = MemoryStore()
    system = provision(store, FIX256, managers=1, supervisors=1, patients=1,
                       rng=random.Random(PROVISION_SEED), clock=lambda: CLOCK_START - 100)
    engine = ServerEngine(store, FIX256, system.secrets,
                          rng=random.Random(ENGINE_SEED),
                          clock=lambda: CLOCK_START, cpu_clock=CountingCpu())
    manager = system.credentials["manager-1"]
    patient = system.credentials["patient-1"]
    last = engine.ledger.read_block(manager.genesis_id)
    request = protocol.begin_request(FIX256, manager.keypair, last)
    session_id, response = engine.stage1(request)
    factor = protocol.extract_blind_factor(FIX256, response, manager.keypair,
                                           system.secrets.server_keypair.public)
    inserted = engine.stage2(session_id, protocol.build_stage2(
        FIX256, manager.keypair, manager.access_key, factor, wire.ACTION_INSERT,
        patient=patient.keypair.public, payloads=(b"golden-record",)))
    return system, engine, inserted


def run_golden_session() -> list[tuple[str, bytes]]:
    """Run the scripted identify session over real TCP, recording all frames."""
    system, engine, inserted = build_golden_system()
    config = ServerConfig(state_dir=Path("/nonexistent-golden"), listen_host="127.0.0.1",
                          listen_port=0, http_port=0)
    server = TrustedServer(config, engine=engine)
    server.start_background()
    try:
        host, port = server.tcp_address
        log: list[tuple[str, bytes]] = []
        client = TcpClient(host, port, params=FIX256, frame_log=log)
        client.info()
        manager = system.credentials["manager-1"]
        last = engine.ledger.read_block(inserted.block_id)
        request = protocol.begin_request(FIX256, manager.keypair, last)
        stage1 = client.stage1(request)
        factor = protocol.extract_blind_factor(FIX256, stage1, manager.keypair,
                                               system.secrets.server_keypair.public)
        client.stage2(protocol.build_stage2(
            FIX256, manager.keypair, manager.access_key, factor,
            wire.ACTION_IDENTIFY, anchor_id=inserted.anchor_ids[0]))
        client.close()
        return log
    finally:
        server.shutdown()


def replay_requests(frames: list[tuple[str, bytes]]) -> list[bytes]:
    """Feed the recorded request frames to a fresh deterministic server."""
    import socket

    _, engine, _ = build_golden_system()
    config = ServerConfig(state_dir=Path("/nonexistent-golden"), listen_host="127.0.0.1",
                          listen_port=0, http_port=0)
    server = TrustedServer(config, engine=engine)
    server.start_background()
    try:
        host, port = server.tcp_address
        responses = []
        with socket.create_connection((host, port), timeout=10) as sock:
            for direction, frame in frames:
                if direction != "send":
                    continue
                sock.sendall(frame)
                msg_type, payload = wire.read_frame(sock.recv)
                responses.append(wire.encode_frame(msg_type, payload))
        return responses
    finally:
        server.shutdown()


def save_frames(path: Path, frames: list[tuple[str, bytes]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = [struct.pack(">I", len(frames))]
    for direction, frame in frames:
        blob.append(struct.pack(">BI", 0 if direction == "send" else 1, len(frame)))
        blob.append(frame)
    path.write_bytes(b"".join(blob))


def load_frames(path: Path) -> list[tuple[str, bytes]]:
    raw = path.read_bytes()
    (count,) = struct.unpack_from(">I", raw, 0)
    offset = 4
    frames = []
    for _ in range(count):
        direction, length = struct.unpack_from(">BI", raw, offset)
        offset += 5
        frames.append(("send" if direction == 0 else "recv", raw[offset:offset + length]))
        offset += length
    return frames
