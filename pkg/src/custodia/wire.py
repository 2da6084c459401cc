"""Binary wire protocol: framing and message codecs.

Frame layout (all integers big-endian)::

    frame   = length u32 | msg_type u8 | payload
    length  = 1 + len(payload)

Group elements and exponents travel as fixed-width big-endian strings of
``params.element_size`` bytes; variable byte strings carry a u32 length
prefix.  The full catalog of message types and payload layouts is
documented in PROTOCOL.md, with golden test vectors under tests/golden/.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .groups import GroupParams

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 24

MSG_STAGE1_REQUEST = 0x01
MSG_STAGE1_RESPONSE = 0x02
MSG_STAGE2_REQUEST = 0x03
MSG_STAGE2_RESPONSE = 0x04
MSG_REJECT = 0x05
MSG_INFO_REQUEST = 0x06
MSG_INFO_RESPONSE = 0x07
MSG_READ_BLOCK = 0x10
MSG_BLOCK_RESPONSE = 0x11
MSG_LOOKUP_ADDRESS = 0x12
MSG_ADDRESS_RESPONSE = 0x13
MSG_TAIL_REQUEST = 0x14
MSG_TAIL_RESPONSE = 0x15
MSG_READ_SEQ = 0x16

REJECT_BAD_CLAIM = 1
REJECT_NOT_LAST_BLOCK = 2
REJECT_UNKNOWN_BLOCK = 3
REJECT_ACTION_FAILED = 4
REJECT_MALFORMED = 5
REJECT_INTERNAL = 6
REJECT_ORDER = 7
REJECT_UNSUPPORTED = 8

ACTION_IDENTIFY = 1
ACTION_FETCH = 2
ACTION_INSERT = 3
ACTION_DELETE = 4

ACTION_NAMES = {
    ACTION_IDENTIFY: "identify",
    ACTION_FETCH: "fetch",
    ACTION_INSERT: "insert",
    ACTION_DELETE: "delete",
}
ACTION_CODES = {name: code for code, name in ACTION_NAMES.items()}


class FrameError(Exception):
    """Malformed or oversized frame."""


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if 1 + len(payload) > MAX_FRAME:
        raise FrameError("frame too large")
    return struct.pack(">IB", 1 + len(payload), msg_type) + payload


def read_frame(read) -> tuple[int, bytes]:
    """Read one frame from a file-like `read(n)`; raises FrameError/EOFError."""
    header = _read_exact(read, 4)
    (length,) = struct.unpack(">I", header)
    if length < 1 or length > MAX_FRAME:
        raise FrameError(f"bad frame length {length}")
    body = _read_exact(read, length)
    return body[0], body[1:]


def _read_exact(read, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = read(remaining)
        if not chunk:
            raise EOFError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class _Reader:
    def __init__(self, raw: bytes) -> None:
        self.raw = raw
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise FrameError("payload truncated")
        out = self.raw[self.offset:self.offset + n]
        self.offset += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def element(self, params: GroupParams) -> int:
        return params.decode(self.take(params.element_size))

    def blob(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self.offset != len(self.raw):
            raise FrameError("trailing bytes in payload")


def _blob(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


# -- messages -----------------------------------------------------------------

@dataclass(frozen=True)
class Stage1Request:
    active_public: int
    last_block_id: int
    claim: int


@dataclass(frozen=True)
class Stage1Response:
    blinded_factor: int


@dataclass(frozen=True)
class Stage2Request:
    action: int
    blinded_access: int
    anchor_id: bytes = b""              # identify / delete
    patient: int = 0                    # fetch / insert
    payloads: tuple[bytes, ...] = ()    # insert

    def data_bytes(self, params: GroupParams) -> bytes:
        """Canonical encoding of the action payload (digested into content)."""
        if self.action in (ACTION_IDENTIFY, ACTION_DELETE):
            return _blob(self.anchor_id)
        if self.action == ACTION_FETCH:
            return params.encode(self.patient)
        if self.action == ACTION_INSERT:
            parts = [params.encode(self.patient), struct.pack(">I", len(self.payloads))]
            parts.extend(_blob(p) for p in self.payloads)
            return b"".join(parts)
        raise FrameError(f"unknown action {self.action}")


@dataclass(frozen=True)
class Stage2Response:
    action: int
    cpu_ns: int
    block_id: int
    patient: int = 0                                  # identify
    records: tuple[tuple[bytes, bytes], ...] = ()     # fetch: (anchor id, payload)
    anchor_ids: tuple[bytes, ...] = ()                # insert


@dataclass(frozen=True)
class Reject:
    code: int
    message: str


@dataclass(frozen=True)
class Info:
    version: int
    params: GroupParams
    server_public: int


@dataclass(frozen=True)
class Tail:
    seq: int
    block_id: int
    checksum: bytes


def encode_stage1_request(params: GroupParams, msg: Stage1Request) -> bytes:
    payload = (params.encode(msg.active_public) + params.encode(msg.last_block_id)
               + params.encode(msg.claim))
    return encode_frame(MSG_STAGE1_REQUEST, payload)


def decode_stage1_request(params: GroupParams, payload: bytes) -> Stage1Request:
    r = _Reader(payload)
    msg = Stage1Request(r.element(params), r.element(params), r.element(params))
    r.done()
    return msg


def encode_stage1_response(params: GroupParams, msg: Stage1Response) -> bytes:
    return encode_frame(MSG_STAGE1_RESPONSE, params.encode(msg.blinded_factor))


def decode_stage1_response(params: GroupParams, payload: bytes) -> Stage1Response:
    r = _Reader(payload)
    msg = Stage1Response(r.element(params))
    r.done()
    return msg


def encode_stage2_request(params: GroupParams, msg: Stage2Request) -> bytes:
    payload = struct.pack(">B", msg.action) + params.encode(msg.blinded_access)
    payload += msg.data_bytes(params)
    return encode_frame(MSG_STAGE2_REQUEST, payload)


def decode_stage2_request(params: GroupParams, payload: bytes) -> Stage2Request:
    r = _Reader(payload)
    action = r.u8()
    blinded_access = r.element(params)
    if action in (ACTION_IDENTIFY, ACTION_DELETE):
        msg = Stage2Request(action, blinded_access, anchor_id=r.blob())
    elif action == ACTION_FETCH:
        msg = Stage2Request(action, blinded_access, patient=r.element(params))
    elif action == ACTION_INSERT:
        patient = r.element(params)
        count = r.u32()
        payloads = tuple(r.blob() for _ in range(count))
        msg = Stage2Request(action, blinded_access, patient=patient, payloads=payloads)
    else:
        raise FrameError(f"unknown action {action}")
    r.done()
    return msg


def encode_stage2_response(params: GroupParams, msg: Stage2Response) -> bytes:
    parts = [struct.pack(">BQ", msg.action, msg.cpu_ns), params.encode(msg.block_id)]
    if msg.action == ACTION_IDENTIFY:
        parts.append(params.encode(msg.patient))
    elif msg.action == ACTION_FETCH:
        parts.append(struct.pack(">I", len(msg.records)))
        for anchor_id, payload in msg.records:
            parts.append(_blob(anchor_id))
            parts.append(_blob(payload))
    elif msg.action == ACTION_INSERT:
        parts.append(struct.pack(">I", len(msg.anchor_ids)))
        parts.extend(_blob(a) for a in msg.anchor_ids)
    return encode_frame(MSG_STAGE2_RESPONSE, b"".join(parts))


def decode_stage2_response(params: GroupParams, payload: bytes) -> Stage2Response:
    r = _Reader(payload)
    action = r.u8()
    cpu_ns = r.u64()
    block_id = r.element(params)
    patient = 0
    records: tuple[tuple[bytes, bytes], ...] = ()
    anchor_ids: tuple[bytes, ...] = ()
    if action == ACTION_IDENTIFY:
        patient = r.element(params)
    elif action == ACTION_FETCH:
        records = tuple((r.blob(), r.blob()) for _ in range(r.u32()))
    elif action == ACTION_INSERT:
        anchor_ids = tuple(r.blob() for _ in range(r.u32()))
    elif action != ACTION_DELETE:
        raise FrameError(f"unknown action {action}")
    r.done()
    return Stage2Response(action, cpu_ns, block_id, patient, records, anchor_ids)


def encode_reject(msg: Reject) -> bytes:
    raw = msg.message.encode()
    return encode_frame(MSG_REJECT, struct.pack(">B", msg.code) + _blob(raw))


def decode_reject(payload: bytes) -> Reject:
    r = _Reader(payload)
    code = r.u8()
    message = r.blob().decode(errors="replace")
    r.done()
    return Reject(code, message)


def encode_info_request() -> bytes:
    return encode_frame(MSG_INFO_REQUEST, b"")


def encode_info_response(msg: Info) -> bytes:
    params = msg.params
    payload = (struct.pack(">BH", msg.version, params.element_size)
               + params.encode(params.p) + params.encode(params.q) + params.encode(params.g)
               + params.encode(msg.server_public))
    return encode_frame(MSG_INFO_RESPONSE, payload)


def decode_info_response(payload: bytes) -> Info:
    r = _Reader(payload)
    version = r.u8()
    width = struct.unpack(">H", r.take(2))[0]
    p = int.from_bytes(r.take(width), "big")
    q = int.from_bytes(r.take(width), "big")
    g = int.from_bytes(r.take(width), "big")
    params = GroupParams(p=p, q=q, g=g)
    server_public = int.from_bytes(r.take(width), "big")
    r.done()
    return Info(version, params, server_public)


def encode_read_block(params: GroupParams, block_id: int) -> bytes:
    return encode_frame(MSG_READ_BLOCK, params.encode(block_id))


def decode_read_block(params: GroupParams, payload: bytes) -> int:
    r = _Reader(payload)
    block_id = r.element(params)
    r.done()
    return block_id


def encode_block_response(raw: bytes) -> bytes:
    return encode_frame(MSG_BLOCK_RESPONSE, _blob(raw))


def decode_block_response(payload: bytes) -> bytes:
    r = _Reader(payload)
    raw = r.blob()
    r.done()
    return raw


def encode_lookup_address(params: GroupParams, address: int) -> bytes:
    return encode_frame(MSG_LOOKUP_ADDRESS, params.encode(address))


def decode_lookup_address(params: GroupParams, payload: bytes) -> int:
    r = _Reader(payload)
    address = r.element(params)
    r.done()
    return address


def encode_address_response(params: GroupParams, block_id: int | None) -> bytes:
    if block_id is None:
        return encode_frame(MSG_ADDRESS_RESPONSE, b"\x00")
    return encode_frame(MSG_ADDRESS_RESPONSE, b"\x01" + params.encode(block_id))


def decode_address_response(params: GroupParams, payload: bytes) -> int | None:
    r = _Reader(payload)
    found = r.u8()
    block_id = r.element(params) if found else None
    r.done()
    return block_id


def encode_tail_request() -> bytes:
    return encode_frame(MSG_TAIL_REQUEST, b"")


def encode_tail_response(params: GroupParams, tail: Tail | None) -> bytes:
    if tail is None:
        return encode_frame(MSG_TAIL_RESPONSE, b"\x00")
    payload = (b"\x01" + struct.pack(">Q", tail.seq) + params.encode(tail.block_id)
               + tail.checksum)
    return encode_frame(MSG_TAIL_RESPONSE, payload)


def decode_tail_response(params: GroupParams, payload: bytes) -> Tail | None:
    r = _Reader(payload)
    if not r.u8():
        r.done()
        return None
    seq = r.u64()
    block_id = r.element(params)
    checksum = r.take(64)
    r.done()
    return Tail(seq, block_id, checksum)


def encode_read_seq(seq: int) -> bytes:
    return encode_frame(MSG_READ_SEQ, struct.pack(">Q", seq))


def decode_read_seq(payload: bytes) -> int:
    r = _Reader(payload)
    seq = r.u64()
    r.done()
    return seq
