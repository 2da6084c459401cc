"""Client-side transports and ledger traversal.

Two interchangeable transports speak to the daemon: ``TcpClient`` uses the
binary frame protocol (a protocol session is bound to its connection),
``HttpClient`` uses the JSON face (the session id from stage 1 is echoed in
stage 2).  Private keys, access keys and view keys never leave the process;
only public values, block ids, claims and blinded values go on the wire.

``LedgerReader`` layers the four traversal walks and content decryption on
top of either transport.
"""

from __future__ import annotations

import base64
import socket

import httpx

from . import blocks as blk
from . import protocol, wire
from .errors import ProtocolReject, UnknownBlock
from .groups import GroupParams
from .keyfiles import KeyFile
from .wire import Stage1Request, Stage1Response, Stage2Request, Stage2Response


class TcpClient:
    """Binary-protocol client; one socket, sequential request/response."""

    def __init__(self, host: str, port: int, params: GroupParams | None = None,
                 frame_log: list[tuple[str, bytes]] | None = None) -> None:
        self._host = host
        self._port = port
        self._params = params
        self._sock: socket.socket | None = None
        self.frame_log = frame_log

    # -- plumbing ---------------------------------------------------------

    def _connection(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self._host, self._port), timeout=30)
        return self._sock

    def _roundtrip(self, frame: bytes) -> tuple[int, bytes]:
        sock = self._connection()
        if self.frame_log is not None:
            self.frame_log.append(("send", frame))
        sock.sendall(frame)
        msg_type, payload = wire.read_frame(sock.recv)
        if self.frame_log is not None:
            self.frame_log.append(("recv", wire.encode_frame(msg_type, payload)))
        return msg_type, payload

    def _expect(self, frame: bytes, expected_type: int) -> bytes:
        msg_type, payload = self._roundtrip(frame)
        if msg_type == wire.MSG_REJECT:
            reject = wire.decode_reject(payload)
            raise ProtocolReject(reject.code, reject.message)
        if msg_type != expected_type:
            raise ProtocolReject(wire.REJECT_MALFORMED,
                                 f"unexpected message type {msg_type}")
        return payload

    @property
    def params(self) -> GroupParams:
        if self._params is None:
            self._params = self.info().params
        return self._params

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    # -- surface ------------------------------------------------------------

    def info(self) -> wire.Info:
        payload = self._expect(wire.encode_info_request(), wire.MSG_INFO_RESPONSE)
        info = wire.decode_info_response(payload)
        if self._params is None:
            self._params = info.params
        return info

    def stage1(self, request: Stage1Request) -> Stage1Response:
        payload = self._expect(wire.encode_stage1_request(self.params, request),
                               wire.MSG_STAGE1_RESPONSE)
        return wire.decode_stage1_response(self.params, payload)

    def stage2(self, request: Stage2Request) -> Stage2Response:
        payload = self._expect(wire.encode_stage2_request(self.params, request),
                               wire.MSG_STAGE2_RESPONSE)
        return wire.decode_stage2_response(self.params, payload)

    def read_block_raw(self, block_id: int) -> bytes | None:
        try:
            payload = self._expect(wire.encode_read_block(self.params, block_id),
                                   wire.MSG_BLOCK_RESPONSE)
        except ProtocolReject as exc:
            if exc.code == wire.REJECT_UNKNOWN_BLOCK:
                return None
            raise
        return wire.decode_block_response(payload)

    def read_seq_raw(self, seq: int) -> bytes | None:
        try:
            payload = self._expect(wire.encode_read_seq(seq), wire.MSG_BLOCK_RESPONSE)
        except ProtocolReject as exc:
            if exc.code == wire.REJECT_UNKNOWN_BLOCK:
                return None
            raise
        return wire.decode_block_response(payload)

    def lookup_address(self, address: int) -> int | None:
        payload = self._expect(wire.encode_lookup_address(self.params, address),
                               wire.MSG_ADDRESS_RESPONSE)
        return wire.decode_address_response(self.params, payload)

    def tail(self) -> wire.Tail | None:
        payload = self._expect(wire.encode_tail_request(), wire.MSG_TAIL_RESPONSE)
        return wire.decode_tail_response(self.params, payload)


class HttpClient:
    """JSON-face client with the same surface as TcpClient."""

    def __init__(self, base_url: str, params: GroupParams | None = None) -> None:
        self._http = httpx.Client(base_url=base_url, timeout=30)
        self._params = params
        self._session_id: str | None = None

    @property
    def params(self) -> GroupParams:
        if self._params is None:
            self._params = self.info().params
        return self._params

    def close(self) -> None:
        self._http.close()

    @staticmethod
    def _raise_reject(response: httpx.Response) -> None:
        detail = None
        try:
            detail = response.json().get("detail")
        except Exception:  # noqa: BLE001
            pass
        if isinstance(detail, dict) and "code" in detail:
            raise ProtocolReject(int(detail["code"]), str(detail.get("message", "")))
        raise ProtocolReject(wire.REJECT_INTERNAL,
                             f"http {response.status_code}: {detail}")

    def info(self) -> wire.Info:
        response = self._http.get("/params")
        if response.status_code != 200:
            self._raise_reject(response)
        doc = response.json()
        params = GroupParams(p=int(doc["p"], 16), q=int(doc["q"], 16), g=int(doc["g"], 16))
        if self._params is None:
            self._params = params
        return wire.Info(doc["protocol_version"], params, int(doc["server_public"], 16))

    def stage1(self, request: Stage1Request) -> Stage1Response:
        response = self._http.post("/rsi/stage1", json={
            "active_public": f"{request.active_public:x}",
            "last_block_id": f"{request.last_block_id:x}",
            "claim": f"{request.claim:x}",
        })
        if response.status_code != 200:
            self._raise_reject(response)
        doc = response.json()
        self._session_id = doc["session_id"]
        return Stage1Response(blinded_factor=int(doc["blinded_factor"], 16))

    def stage2(self, request: Stage2Request) -> Stage2Response:
        if self._session_id is None:
            raise ProtocolReject(wire.REJECT_ORDER, "stage 2 before stage 1")
        body = {
            "session_id": self._session_id,
            "action": wire.ACTION_NAMES[request.action],
            "blinded_access": f"{request.blinded_access:x}",
        }
        if request.anchor_id:
            body["anchor_id"] = base64.b64encode(request.anchor_id).decode()
        if request.patient:
            body["patient"] = f"{request.patient:x}"
        if request.payloads:
            body["payloads"] = [base64.b64encode(p).decode() for p in request.payloads]
        self._session_id = None
        response = self._http.post("/rsi/stage2", json=body)
        if response.status_code != 200:
            self._raise_reject(response)
        doc = response.json()
        return Stage2Response(
            action=request.action,
            cpu_ns=doc["cpu_ns"],
            block_id=int(doc["block_id"], 16),
            patient=int(doc["patient"], 16) if doc.get("patient") else 0,
            records=tuple((base64.b64decode(r["anchor_id"]), base64.b64decode(r["payload"]))
                          for r in doc.get("records", [])),
            anchor_ids=tuple(base64.b64decode(a) for a in doc.get("anchor_ids", [])),
        )

    def read_block_raw(self, block_id: int) -> bytes | None:
        response = self._http.get(f"/blocks/{block_id:x}")
        if response.status_code == 404:
            return None
        if response.status_code != 200:
            self._raise_reject(response)
        return base64.b64decode(response.json()["raw"])

    def read_seq_raw(self, seq: int) -> bytes | None:
        response = self._http.get(f"/blocks/by-seq/{seq}")
        if response.status_code == 404:
            return None
        if response.status_code != 200:
            self._raise_reject(response)
        return base64.b64decode(response.json()["raw"])

    def lookup_address(self, address: int) -> int | None:
        response = self._http.get(f"/address/{address:x}")
        if response.status_code == 404:
            return None
        if response.status_code != 200:
            self._raise_reject(response)
        return int(response.json()["block_id"], 16)

    def tail(self) -> wire.Tail | None:
        response = self._http.get("/chain/tail")
        if response.status_code == 404:
            return None
        if response.status_code != 200:
            self._raise_reject(response)
        doc = response.json()
        return wire.Tail(doc["seq"], int(doc["block_id"], 16),
                         bytes.fromhex(doc["checksum"]))


ROLE_ACTIVE = "active"
ROLE_PASSIVE = "passive"


class LedgerReader:
    """Traversal walks and content decryption over a transport."""

    def __init__(self, transport, params: GroupParams | None = None) -> None:
        self.transport = transport
        self.params = params or transport.params

    def read_block(self, block_id: int) -> blk.Block:
        raw = self.transport.read_block_raw(block_id)
        if raw is None:
            raise UnknownBlock(f"no block {block_id:#x}")
        return blk.deserialize_block(self.params, raw)

    def _forward_address(self, block: blk.Block, private: int, role: str) -> int:
        if role == ROLE_ACTIVE:
            return blk.active_forward_address(self.params, block, private)
        return blk.passive_forward_address(self.params, block, private)

    def _backward_id(self, block: blk.Block, private: int, role: str) -> int:
        if role == ROLE_ACTIVE:
            return blk.active_backward(self.params, block, private)
        return blk.passive_backward(self.params, block, private)

    def next_block(self, block: blk.Block, private: int, role: str) -> blk.Block | None:
        address = self._forward_address(block, private, role)
        block_id = self.transport.lookup_address(address)
        if block_id is None:
            return None
        return self.read_block(block_id)

    def prev_block(self, block: blk.Block, private: int, role: str) -> blk.Block:
        return self.read_block(self._backward_id(block, private, role))

    def walk_forward(self, start: blk.Block, private: int, role: str,
                     limit: int | None = None) -> list[blk.Block]:
        """Blocks after `start` on the caller's chain, oldest first."""
        out: list[blk.Block] = []
        block = start
        while limit is None or len(out) < limit:
            nxt = self.next_block(block, private, role)
            if nxt is None:
                break
            out.append(nxt)
            block = nxt
        return out

    def walk_backward(self, start: blk.Block, private: int, role: str,
                      limit: int | None = None) -> list[blk.Block]:
        """`start` and its predecessors, newest first, ending at genesis."""
        out: list[blk.Block] = [start]
        block = start
        while not block.is_genesis and (limit is None or len(out) < limit):
            block = self.prev_block(block, private, role)
            out.append(block)
        return out

    def find_tail(self, genesis_id: int, private: int, role: str) -> blk.Block:
        block = self.read_block(genesis_id)
        while True:
            nxt = self.next_block(block, private, role)
            if nxt is None:
                return block
            block = nxt

    def decrypt_as_active(self, block: blk.Block, prev: blk.Block,
                          private: int) -> blk.ContentPlaintext:
        return blk.decrypt_content_active(self.params, block, prev.active.forward, private)

    def decrypt_as_passive(self, block: blk.Block, private: int) -> blk.ContentPlaintext:
        return blk.decrypt_content_passive(self.params, block, private)


def run_action(transport, keyfile: KeyFile, last_block: blk.Block, action: int, *,
               anchor_id: bytes = b"", patient: int = 0,
               payloads: tuple[bytes, ...] = ()) -> Stage2Response:
    """Execute the full two-stage protocol for one action."""
    if keyfile.access_key is None:
        raise ValueError("key file carries no access key; only custodians can act")
    params = transport.params
    request = protocol.begin_request(params, keyfile.keypair, last_block)
    response = transport.stage1(request)
    factor = protocol.extract_blind_factor(params, response, keyfile.keypair,
                                           keyfile.server_public)
    stage2 = protocol.build_stage2(params, keyfile.keypair, keyfile.access_key, factor,
                                   action, anchor_id=anchor_id, patient=patient,
                                   payloads=payloads)
    return transport.stage2(stage2)
