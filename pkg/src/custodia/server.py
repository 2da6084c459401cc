"""The long-running server daemon: config, TCP endpoint, lifecycle.

One accept loop with a thread per connection; all ledger writes are
serialised inside the engine.  A connection carries at most one open
protocol session (stage 1 binds it, stage 2 consumes it).  Malformed input
is answered with a typed reject frame; the daemon itself never dies on bad
bytes.  The optional HTTP face (see service.py) runs in a side thread off
the same engine.
"""

from __future__ import annotations

import fcntl
import os
import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .engine import ServerEngine
from .errors import ProtocolReject, StateCorrupted
from .groups import GroupParams
from .provisioning import META_READY, load_server_state
from .storage import FileStore, KVStore, MemoryStore
from .wire import FrameError

DEFAULT_TCP_PORT = 7420
DEFAULT_HTTP_PORT = 8420


@dataclass
class ServerConfig:
    state_dir: Path
    listen_host: str = "127.0.0.1"
    listen_port: int = DEFAULT_TCP_PORT
    http_port: int = DEFAULT_HTTP_PORT  # 0 disables the HTTP face
    backend: str = "file"
    params_file: Path | None = None
    params_bits: int = 2048
    cache: bool = True
    fsync: bool = True
    keys_dir: Path | None = None

    @classmethod
    def load(cls, path: str | Path) -> "ServerConfig":
        values: dict[str, str] = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        if "state_dir" not in values:
            raise ValueError("config must set state_dir")
        config = cls(
            state_dir=Path(values["state_dir"]),
            listen_host=values.get("listen_host", "127.0.0.1"),
            listen_port=int(values.get("listen_port", DEFAULT_TCP_PORT)),
            http_port=int(values.get("http_port", DEFAULT_HTTP_PORT)),
            backend=values.get("backend", "file"),
            params_file=Path(values["params_file"]) if "params_file" in values else None,
            params_bits=int(values.get("params_bits", 2048)),
            cache=values.get("cache", "on") not in ("off", "0", "false"),
            fsync=values.get("fsync", "on") not in ("off", "0", "false"),
            keys_dir=Path(values["keys_dir"]) if "keys_dir" in values else None,
        )
        # Environment overrides, mainly for test harnesses and containers.
        if os.environ.get("TS_PORT"):
            config.listen_port = int(os.environ["TS_PORT"])
        if os.environ.get("TS_HTTP_PORT"):
            config.http_port = int(os.environ["TS_HTTP_PORT"])
        return config

    @property
    def store_path(self) -> Path:
        return self.state_dir / "custodia.kv"

    def resolved_keys_dir(self) -> Path:
        return self.keys_dir or (self.state_dir / "keys")


class StateLock:
    """One process per state directory, enforced with flock."""

    def __init__(self, state_dir: Path) -> None:
        state_dir.mkdir(parents=True, exist_ok=True)
        self._fh = open(state_dir / "LOCK", "w")
        try:
            fcntl.flock(self._fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            self._fh.close()
            raise StateCorrupted(f"state directory {state_dir} is locked by another process")

    def release(self) -> None:
        fcntl.flock(self._fh, fcntl.LOCK_UN)
        self._fh.close()


def open_state(config: ServerConfig) -> tuple[KVStore, GroupParams, object]:
    """Open the store and load server state; raises StateCorrupted when unusable."""
    if config.backend == "memory":
        raise StateCorrupted("memory backend holds no persisted state to serve")
    store = FileStore(config.store_path, fsync=config.fsync)
    if store.get(META_READY) is None:
        store.close()
        raise StateCorrupted("state directory is not provisioned (bootstrap first)")
    params, secrets = load_server_state(store)
    return store, params, secrets


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:  # one thread per connection
        engine: ServerEngine = self.server.engine  # type: ignore[attr-defined]
        params = engine.params
        sock: socket.socket = self.request
        read = sock.recv
        session_id: str | None = None
        while True:
            try:
                msg_type, payload = wire.read_frame(read)
            except EOFError:
                return
            except FrameError as exc:
                self._send(wire.encode_reject(wire.Reject(wire.REJECT_MALFORMED, str(exc))))
                return  # framing is broken; the stream cannot be trusted further
            try:
                reply, session_id = self._dispatch(engine, params, msg_type, payload, session_id)
            except ProtocolReject as exc:
                reply = wire.encode_reject(wire.Reject(exc.code, exc.message))
            except FrameError as exc:
                reply = wire.encode_reject(wire.Reject(wire.REJECT_MALFORMED, str(exc)))
            except Exception:  # noqa: BLE001 - the daemon must survive anything
                reply = wire.encode_reject(wire.Reject(wire.REJECT_INTERNAL, "internal error"))
            if not self._send(reply):
                return

    def _send(self, raw: bytes) -> bool:
        try:
            self.request.sendall(raw)
            return True
        except OSError:
            return False

    @staticmethod
    def _dispatch(engine: ServerEngine, params, msg_type: int, payload: bytes,
                  session_id: str | None) -> tuple[bytes, str | None]:
        if msg_type == wire.MSG_STAGE1_REQUEST:
            request = wire.decode_stage1_request(params, payload)
            session_id, response = engine.stage1(request)
            return wire.encode_stage1_response(params, response), session_id
        if msg_type == wire.MSG_STAGE2_REQUEST:
            if session_id is None:
                raise ProtocolReject(wire.REJECT_ORDER, "stage 2 before stage 1")
            request = wire.decode_stage2_request(params, payload)
            response = engine.stage2(session_id, request)
            return wire.encode_stage2_response(params, response), None
        if msg_type == wire.MSG_INFO_REQUEST:
            return wire.encode_info_response(engine.info()), session_id
        if msg_type == wire.MSG_READ_BLOCK:
            block_id = wire.decode_read_block(params, payload)
            raw = engine.read_block_raw(block_id)
            if raw is None:
                raise ProtocolReject(wire.REJECT_UNKNOWN_BLOCK, "no such block")
            return wire.encode_block_response(raw), session_id
        if msg_type == wire.MSG_LOOKUP_ADDRESS:
            address = wire.decode_lookup_address(params, payload)
            return wire.encode_address_response(params, engine.lookup_address(address)), session_id
        if msg_type == wire.MSG_TAIL_REQUEST:
            return wire.encode_tail_response(params, engine.tail()), session_id
        if msg_type == wire.MSG_READ_SEQ:
            seq = wire.decode_read_seq(payload)
            raw = engine.read_seq_raw(seq)
            if raw is None:
                raise ProtocolReject(wire.REJECT_UNKNOWN_BLOCK, "no block at that sequence")
            return wire.encode_block_response(raw), session_id
        raise ProtocolReject(wire.REJECT_UNSUPPORTED, f"unsupported message type {msg_type}")


class _ThreadingTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class TrustedServer:
    """Owns the engine plus the TCP (and optional HTTP) listeners."""

    def __init__(self, config: ServerConfig, *, engine: ServerEngine | None = None) -> None:
        self.config = config
        self._lock: StateLock | None = None
        self._store: KVStore | None = None
        if engine is None:
            self._lock = StateLock(config.state_dir)
            store, params, secrets = open_state(config)
            self._store = store
            self._startup_check(store, params, secrets)
            engine = ServerEngine(store, params, secrets, cache_tails=config.cache)
        self.engine = engine
        self._tcp = _ThreadingTCPServer((config.listen_host, config.listen_port),
                                        _ConnectionHandler)
        self._tcp.engine = engine  # type: ignore[attr-defined]
        self._http_thread: threading.Thread | None = None
        self._http_server = None

    @staticmethod
    def _startup_check(store: KVStore, params: GroupParams, secrets) -> None:
        """Cheap recovery validation: the tail must be intact and verifiable."""
        from . import blocks as blk
        from .chain import LedgerStore
        from .sealing import verify_signature

        ledger = LedgerStore(store, params)
        tail = ledger.tail()
        if tail is None:
            return
        seq, checksum, block_id = tail
        try:
            block = ledger.read_block(block_id)
        except Exception as exc:
            raise StateCorrupted(f"tail block unreadable: {exc}") from exc
        if block.seq != seq or blk.block_checksum(params, block) != block.checksum:
            raise StateCorrupted("tail block does not match tail metadata")
        if not verify_signature(params, block.checksum, block.signature,
                                secrets.server_keypair.public):
            raise StateCorrupted("tail block signature invalid")

    @property
    def tcp_address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def start_http(self) -> None:
        if self.config.http_port == 0:
            return
        import uvicorn

        from .service import create_app

        app = create_app(self.engine)
        http_config = uvicorn.Config(app, host=self.config.listen_host,
                                     port=self.config.http_port, log_level="warning")
        self._http_server = uvicorn.Server(http_config)
        self._http_thread = threading.Thread(target=self._http_server.run, daemon=True)
        self._http_thread.start()

    def serve_forever(self) -> None:
        self.start_http()
        try:
            self._tcp.serve_forever()
        finally:
            self.shutdown()

    def start_background(self) -> threading.Thread:
        self.start_http()
        thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._http_server is not None:
            self._http_server.should_exit = True
        if self._http_thread is not None:
            self._http_thread.join(timeout=5)
        if self._store is not None:
            self._store.close()
        if self._lock is not None:
            self._lock.release()
            self._lock = None
