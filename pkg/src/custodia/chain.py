"""Ledger persistence: hash-chained block storage with an address index.

Key layout inside the shared key-value backend::

    blk/<id>    -> serialized block (source of truth, byte-exact)
    addr/<c>    -> block id, for both index addresses of every block
    seq/<n>     -> block id, ledger order
    meta/tail   -> seq | checksum | block id of the newest block

Appends are validated against the tail (gapless sequence, hash link) and
against the index (no address reuse).  `verify_chain` re-checks everything
from scratch and reports every problem it finds.
"""

from __future__ import annotations

import struct

from . import blocks as blk
from .errors import ChainMismatch, DuplicateAddress, UnknownBlock
from .groups import GroupParams
from .sealing import verify_signature
from .storage import KVStore

BLOCK_PREFIX = b"blk/"
ADDRESS_PREFIX = b"addr/"
SEQ_PREFIX = b"seq/"
TAIL_KEY = b"meta/tail"


class LedgerStore:
    def __init__(self, store: KVStore, params: GroupParams) -> None:
        self._store = store
        self._params = params

    def _block_key(self, block_id: int) -> bytes:
        return BLOCK_PREFIX + self._params.encode(block_id)

    def tail(self) -> tuple[int, bytes, int] | None:
        """(seq, checksum, block_id) of the newest block, or None when empty."""
        raw = self._store.get(TAIL_KEY)
        if raw is None:
            return None
        (seq,) = struct.unpack_from(">Q", raw, 0)
        checksum = raw[8:8 + blk.CHECKSUM_SIZE]
        block_id = self._params.decode(raw[8 + blk.CHECKSUM_SIZE:])
        return seq, checksum, block_id

    def next_position(self) -> tuple[int, bytes]:
        """(seq, prev_checksum) for the block about to be appended."""
        tail = self.tail()
        if tail is None:
            return 0, blk.ZERO_CHECKSUM
        return tail[0] + 1, tail[1]

    def append_block(self, block: blk.Block) -> None:
        seq, prev_checksum = self.next_position()
        if block.seq != seq or block.prev_checksum != prev_checksum:
            raise ChainMismatch(f"block does not extend tail (want seq {seq})")
        if self._store.get(self._block_key(block.block_id)) is not None:
            raise DuplicateAddress("block id already present")
        if block.address is not None:
            for c in (block.address.active, block.address.passive):
                if self._store.get(ADDRESS_PREFIX + self._params.encode(c)) is not None:
                    raise DuplicateAddress("address already indexed")
        encoded_id = self._params.encode(block.block_id)
        self._store.put(self._block_key(block.block_id), blk.serialize_block(self._params, block))
        if block.address is not None:
            self._store.put(ADDRESS_PREFIX + self._params.encode(block.address.active), encoded_id)
            self._store.put(ADDRESS_PREFIX + self._params.encode(block.address.passive), encoded_id)
        self._store.put(SEQ_PREFIX + struct.pack(">Q", block.seq), encoded_id)
        self._store.put(TAIL_KEY, struct.pack(">Q", block.seq) + block.checksum + encoded_id)

    def read_block_raw(self, block_id: int) -> bytes | None:
        return self._store.get(self._block_key(block_id))

    def read_block(self, block_id: int) -> blk.Block:
        raw = self.read_block_raw(block_id)
        if raw is None:
            raise UnknownBlock(f"no block {block_id:#x}")
        return blk.deserialize_block(self._params, raw)

    def lookup_address(self, address: int) -> int | None:
        raw = self._store.get(ADDRESS_PREFIX + self._params.encode(address))
        return None if raw is None else self._params.decode(raw)

    def read_seq(self, seq: int) -> blk.Block:
        raw = self._store.get(SEQ_PREFIX + struct.pack(">Q", seq))
        if raw is None:
            raise UnknownBlock(f"no block at seq {seq}")
        return self.read_block(self._params.decode(raw))

    def resolve_address(self, address: int) -> blk.Block:
        block_id = self.lookup_address(address)
        if block_id is None:
            raise UnknownBlock("address not in index")
        return self.read_block(block_id)

    def verify_chain(self, server_public: int) -> list[str]:
        """Full re-verification; returns a list of problems (empty = clean)."""
        problems: list[str] = []
        tail = self.tail()
        seq_entries = sum(1 for _ in self._store.scan_prefix(SEQ_PREFIX))
        block_entries = sum(1 for _ in self._store.scan_prefix(BLOCK_PREFIX))
        if tail is None:
            if seq_entries or block_entries:
                problems.append("blocks present but tail metadata missing")
            return problems
        tail_seq, tail_checksum, tail_id = tail
        if seq_entries != tail_seq + 1:
            problems.append(f"sequence index holds {seq_entries} entries, "
                            f"tail pins {tail_seq + 1}")
        if block_entries != tail_seq + 1:
            problems.append(f"block store holds {block_entries} blocks, "
                            f"tail pins {tail_seq + 1}")
        prev_checksum = blk.ZERO_CHECKSUM
        for seq in range(tail_seq + 1):
            raw_id = self._store.get(SEQ_PREFIX + struct.pack(">Q", seq))
            if raw_id is None:
                problems.append(f"seq {seq}: missing from sequence index")
                prev_checksum = None
                continue
            raw = self._store.get(BLOCK_PREFIX + raw_id)
            if raw is None:
                problems.append(f"seq {seq}: block bytes missing")
                prev_checksum = None
                continue
            try:
                block = blk.deserialize_block(self._params, raw)
            except ValueError as exc:
                problems.append(f"seq {seq}: undecodable block ({exc})")
                prev_checksum = None
                continue
            if block.seq != seq:
                problems.append(f"seq {seq}: stored block claims seq {block.seq}")
            if blk.block_checksum(self._params, block) != block.checksum:
                problems.append(f"seq {seq}: checksum mismatch")
            if not verify_signature(self._params, block.checksum, block.signature, server_public):
                problems.append(f"seq {seq}: bad signature")
            if prev_checksum is not None and block.prev_checksum != prev_checksum:
                problems.append(f"seq {seq}: hash link broken")
            if not block.is_genesis:
                if blk._derive_id(self._params, block) != block.block_id:
                    problems.append(f"seq {seq}: block id does not match header")
                for c in (block.address.active, block.address.passive):
                    indexed = self.lookup_address(c)
                    if indexed != block.block_id:
                        problems.append(f"seq {seq}: address index entry wrong or missing")
            prev_checksum = block.checksum
            if seq == tail_seq:
                if block.checksum != tail_checksum or block.block_id != tail_id:
                    problems.append("tail metadata does not match last block")
        return problems
