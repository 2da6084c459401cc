"""HTTP face of the server: a FastAPI app wrapping the protocol engine.

JSON mirrors of the wire messages: group elements travel as lowercase hex
strings, opaque byte strings (anchor ids, payloads, raw blocks) as base64.
Unlike the TCP endpoint, HTTP is stateless, so stage 1 returns a session id
that stage 2 must echo.
"""

from __future__ import annotations

import base64

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import blocks as blk
from . import wire
from .engine import ServerEngine
from .errors import ProtocolReject

_REJECT_STATUS = {
    wire.REJECT_BAD_CLAIM: 403,
    wire.REJECT_NOT_LAST_BLOCK: 409,
    wire.REJECT_UNKNOWN_BLOCK: 404,
    wire.REJECT_ACTION_FAILED: 422,
    wire.REJECT_MALFORMED: 400,
    wire.REJECT_ORDER: 409,
    wire.REJECT_UNSUPPORTED: 400,
}


class ParamsOut(BaseModel):
    protocol_version: int
    p: str
    q: str
    g: str
    server_public: str


class Stage1In(BaseModel):
    active_public: str
    last_block_id: str
    claim: str


class Stage1Out(BaseModel):
    session_id: str
    blinded_factor: str


class Stage2In(BaseModel):
    session_id: str
    action: str = Field(description="identify | fetch | insert | delete")
    blinded_access: str
    anchor_id: str | None = None          # base64, identify/delete
    patient: str | None = None            # hex public key, fetch/insert
    payloads: list[str] | None = None     # base64, insert


class RecordOut(BaseModel):
    anchor_id: str
    payload: str


class Stage2Out(BaseModel):
    action: str
    block_id: str
    cpu_ns: int
    patient: str | None = None
    records: list[RecordOut] = []
    anchor_ids: list[str] = []


class BlockOut(BaseModel):
    block_id: str
    seq: int
    timestamp: int
    genesis: bool
    raw: str  # base64 of the canonical serialization


class TailOut(BaseModel):
    seq: int
    block_id: str
    checksum: str


class VerifyOut(BaseModel):
    ok: bool
    problems: list[str]


def _reject(exc: ProtocolReject) -> HTTPException:
    status = _REJECT_STATUS.get(exc.code, 400)
    return HTTPException(status_code=status,
                         detail={"code": exc.code, "message": exc.message})


def create_app(engine: ServerEngine) -> FastAPI:
    app = FastAPI(title="custodia", version="1")
    params = engine.params

    def parse_element(value: str, name: str) -> int:
        try:
            element = int(value, 16)
        except ValueError:
            raise HTTPException(status_code=400, detail=f"{name} is not hex") from None
        if not 0 <= element < params.p:
            raise HTTPException(status_code=400, detail=f"{name} out of range")
        return element

    def block_out(raw: bytes) -> BlockOut:
        block = blk.deserialize_block(params, raw)
        return BlockOut(block_id=f"{block.block_id:x}", seq=block.seq,
                        timestamp=block.timestamp, genesis=block.is_genesis,
                        raw=base64.b64encode(raw).decode())

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/params", response_model=ParamsOut)
    def get_params():
        info = engine.info()
        return ParamsOut(protocol_version=info.version, p=f"{params.p:x}",
                         q=f"{params.q:x}", g=f"{params.g:x}",
                         server_public=f"{info.server_public:x}")

    @app.post("/rsi/stage1", response_model=Stage1Out)
    def stage1(body: Stage1In):
        request = wire.Stage1Request(
            active_public=parse_element(body.active_public, "active_public"),
            last_block_id=parse_element(body.last_block_id, "last_block_id"),
            claim=parse_element(body.claim, "claim"),
        )
        try:
            session_id, response = engine.stage1(request)
        except ProtocolReject as exc:
            raise _reject(exc) from None
        return Stage1Out(session_id=session_id,
                         blinded_factor=f"{response.blinded_factor:x}")

    @app.post("/rsi/stage2", response_model=Stage2Out)
    def stage2(body: Stage2In):
        if body.action not in wire.ACTION_CODES:
            raise HTTPException(status_code=400, detail=f"unknown action {body.action!r}")
        action = wire.ACTION_CODES[body.action]
        request = wire.Stage2Request(
            action=action,
            blinded_access=parse_element(body.blinded_access, "blinded_access"),
            anchor_id=base64.b64decode(body.anchor_id) if body.anchor_id else b"",
            patient=parse_element(body.patient, "patient") if body.patient else 0,
            payloads=tuple(base64.b64decode(p) for p in (body.payloads or ())),
        )
        try:
            response = engine.stage2(body.session_id, request)
        except ProtocolReject as exc:
            raise _reject(exc) from None
        return Stage2Out(
            action=body.action,
            block_id=f"{response.block_id:x}",
            cpu_ns=response.cpu_ns,
            patient=f"{response.patient:x}" if response.patient else None,
            records=[RecordOut(anchor_id=base64.b64encode(a).decode(),
                               payload=base64.b64encode(p).decode())
                     for a, p in response.records],
            anchor_ids=[base64.b64encode(a).decode() for a in response.anchor_ids],
        )

    @app.get("/blocks/{block_id}", response_model=BlockOut)
    def read_block(block_id: str):
        raw = engine.read_block_raw(parse_element(block_id, "block_id"))
        if raw is None:
            raise HTTPException(status_code=404, detail="no such block")
        return block_out(raw)

    @app.get("/blocks/by-seq/{seq}", response_model=BlockOut)
    def read_by_seq(seq: int):
        raw = engine.read_seq_raw(seq)
        if raw is None:
            raise HTTPException(status_code=404, detail="no block at that sequence")
        return block_out(raw)

    @app.get("/address/{address}")
    def lookup_address(address: str):
        block_id = engine.lookup_address(parse_element(address, "address"))
        if block_id is None:
            raise HTTPException(status_code=404, detail="address not in index")
        return {"block_id": f"{block_id:x}"}

    @app.get("/chain/tail", response_model=TailOut)
    def tail():
        current = engine.tail()
        if current is None:
            raise HTTPException(status_code=404, detail="ledger is empty")
        return TailOut(seq=current.seq, block_id=f"{current.block_id:x}",
                       checksum=current.checksum.hex())

    @app.get("/chain/verify", response_model=VerifyOut)
    def verify():
        problems = engine.verify_chain()
        return VerifyOut(ok=not problems, problems=problems)

    return app
