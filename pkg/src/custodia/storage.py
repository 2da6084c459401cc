"""Key-value storage backends.

One ordered key-value abstraction hosts the ledger, its address index and
both partitioned record tables under disjoint key prefixes.  Two backends:

* ``MemoryStore`` -- plain dict, for tests and embedded use.
* ``FileStore``   -- append-only single file.  Every commit (single write
  or batch) is one length-prefixed, checksummed record, so a batch is
  atomic by construction: a torn tail fails its checksum and is truncated
  on the next open.

File layout::

    header  = magic "CKV1"[4] | version u8
    record  = body_len u32 | body | sha512(body)[:8]
    body    = op_count u32 | op*
    op      = kind u8 (1=put, 2=delete) | key_len u16 | key
              | (value_len u32 | value      when kind=put)

A sidecar head file (atomically replaced after every commit) pins the
committed record count and the last record checksum.  That separates the
two ways a file can end badly: a torn final record *beyond* what the head
pins is an interrupted append and is truncated away; anything that
contradicts the head (checksum failure, missing records, altered tail) is
corruption and refuses to load.
"""

from __future__ import annotations

import os
import struct
import threading
from hashlib import sha512
from pathlib import Path
from typing import Iterator, Protocol

from .errors import StateCorrupted

MAGIC = b"CKV1"
VERSION = 1

PUT = 1
DELETE = 2

# (kind, key, value); value is b"" for deletes
Op = tuple[int, bytes, bytes]


class KVStore(Protocol):
    def get(self, key: bytes) -> bytes | None: ...

    def put(self, key: bytes, value: bytes) -> None: ...

    def delete(self, key: bytes) -> None: ...

    def apply_batch(self, ops: list[Op]) -> None: ...

    def scan_prefix(self, prefix: bytes) -> Iterator[tuple[bytes, bytes]]: ...

    def close(self) -> None: ...


class MemoryStore:
    def __init__(self) -> None:
        self._data: dict[bytes, bytes] = {}
        self._lock = threading.RLock()

    def get(self, key: bytes) -> bytes | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: bytes, value: bytes) -> None:
        with self._lock:
            self._data[key] = value

    def delete(self, key: bytes) -> None:
        with self._lock:
            self._data.pop(key, None)

    def apply_batch(self, ops: list[Op]) -> None:
        with self._lock:
            for kind, key, value in ops:
                if kind == PUT:
                    self._data[key] = value
                else:
                    self._data.pop(key, None)

    def scan_prefix(self, prefix: bytes) -> Iterator[tuple[bytes, bytes]]:
        with self._lock:
            keys = sorted(k for k in self._data if k.startswith(prefix))
            snapshot = [(k, self._data[k]) for k in keys]
        yield from snapshot

    def close(self) -> None:
        pass


def _encode_ops(ops: list[Op]) -> bytes:
    parts = [struct.pack(">I", len(ops))]
    for kind, key, value in ops:
        parts.append(struct.pack(">BH", kind, len(key)))
        parts.append(key)
        if kind == PUT:
            parts.append(struct.pack(">I", len(value)))
            parts.append(value)
    return b"".join(parts)


def _decode_ops(body: bytes) -> list[Op]:
    (count,) = struct.unpack_from(">I", body, 0)
    offset = 4
    ops: list[Op] = []
    for _ in range(count):
        kind, key_len = struct.unpack_from(">BH", body, offset)
        offset += 3
        key = body[offset:offset + key_len]
        offset += key_len
        value = b""
        if kind == PUT:
            (value_len,) = struct.unpack_from(">I", body, offset)
            offset += 4
            value = body[offset:offset + value_len]
            offset += value_len
        elif kind != DELETE:
            raise StateCorrupted(f"unknown op kind {kind}")
        ops.append((kind, key, value))
    if offset != len(body):
        raise StateCorrupted("trailing bytes inside record body")
    return ops


HEAD_MAGIC = b"CKVH"


class FileStore:
    """Append-only file store with an in-memory index rebuilt on open."""

    def __init__(self, path: str | Path, fsync: bool = True) -> None:
        self._path = Path(path)
        self._head_path = Path(str(path) + ".head")
        self._fsync = fsync
        self._lock = threading.RLock()
        self._data: dict[bytes, bytes] = {}
        self._record_count = 0
        self._last_checksum = bytes(8)
        if self._path.exists():
            self._replay()
            self._fh = open(self._path, "ab")
        else:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self._path, "ab")
            self._fh.write(MAGIC + bytes([VERSION]))
            self._flush()
            self._write_head()

    # -- head sidecar -------------------------------------------------------

    def _encode_head(self) -> bytes:
        body = HEAD_MAGIC + struct.pack(">Q", self._record_count) + self._last_checksum
        return body + sha512(body).digest()[:8]

    def _write_head(self) -> None:
        tmp = Path(str(self._head_path) + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self._encode_head())
            fh.flush()
            if self._fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self._head_path)

    def _read_head(self) -> tuple[int, bytes]:
        try:
            raw = self._head_path.read_bytes()
        except OSError:
            raise StateCorrupted(f"{self._head_path}: commit head missing") from None
        if len(raw) != 4 + 8 + 8 + 8 or raw[:4] != HEAD_MAGIC:
            raise StateCorrupted(f"{self._head_path}: malformed commit head")
        if sha512(raw[:-8]).digest()[:8] != raw[-8:]:
            raise StateCorrupted(f"{self._head_path}: commit head checksum failure")
        (count,) = struct.unpack_from(">Q", raw, 4)
        return count, raw[12:20]

    # -- open / replay --------------------------------------------------------

    def _replay(self) -> None:
        raw = self._path.read_bytes()
        if len(raw) < 5 or raw[:4] != MAGIC:
            raise StateCorrupted(f"{self._path}: bad magic")
        if raw[4] != VERSION:
            raise StateCorrupted(f"{self._path}: unsupported version {raw[4]}")
        head_count, head_checksum = self._read_head()
        offset = 5
        records = []  # (end_offset, checksum)
        while offset < len(raw):
            if offset + 4 > len(raw):
                break  # torn length prefix
            (body_len,) = struct.unpack_from(">I", raw, offset)
            end = offset + 4 + body_len + 8
            if end > len(raw):
                break  # torn record
            body = raw[offset + 4:offset + 4 + body_len]
            checksum = raw[offset + 4 + body_len:end]
            if sha512(body).digest()[:8] != checksum:
                raise StateCorrupted(f"{self._path}: record {len(records)} checksum failure")
            records.append((end, checksum, body))
            offset = end

        # Everything the head pins must be present and must match; at most
        # one record may sit beyond the head (commit interrupted before the
        # head update), and bytes beyond the last complete record are a torn
        # append.  Anything else is corruption, not crash recovery.
        if len(records) < head_count:
            raise StateCorrupted(f"{self._path}: holds {len(records)} records, "
                                 f"head pins {head_count}")
        if len(records) > head_count + 1:
            raise StateCorrupted(f"{self._path}: {len(records) - head_count} records "
                                 "beyond the commit head")
        if head_count:
            if records[head_count - 1][1] != head_checksum:
                raise StateCorrupted(f"{self._path}: tail does not match commit head")

        for _, checksum, body in records:
            for kind, key, value in _decode_ops(body):
                if kind == PUT:
                    self._data[key] = value
                else:
                    self._data.pop(key, None)
        self._record_count = len(records)
        self._last_checksum = records[-1][1] if records else bytes(8)

        valid_end = records[-1][0] if records else 5
        if valid_end < len(raw):
            # Drop the torn tail so subsequent appends produce a clean file.
            with open(self._path, "r+b") as fh:
                fh.truncate(valid_end)
        if len(records) != head_count:
            self._write_head()

    def _flush(self) -> None:
        self._fh.flush()
        if self._fsync:
            os.fsync(self._fh.fileno())

    def _append(self, ops: list[Op]) -> None:
        body = _encode_ops(ops)
        checksum = sha512(body).digest()[:8]
        self._fh.write(struct.pack(">I", len(body)) + body + checksum)
        self._flush()
        self._record_count += 1
        self._last_checksum = checksum
        self._write_head()

    def get(self, key: bytes) -> bytes | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: bytes, value: bytes) -> None:
        self.apply_batch([(PUT, key, value)])

    def delete(self, key: bytes) -> None:
        self.apply_batch([(DELETE, key, b"")])

    def apply_batch(self, ops: list[Op]) -> None:
        with self._lock:
            self._append(ops)
            for kind, key, value in ops:
                if kind == PUT:
                    self._data[key] = value
                else:
                    self._data.pop(key, None)

    def scan_prefix(self, prefix: bytes) -> Iterator[tuple[bytes, bytes]]:
        with self._lock:
            keys = sorted(k for k in self._data if k.startswith(prefix))
            snapshot = [(k, self._data[k]) for k in keys]
        yield from snapshot

    def compact(self) -> None:
        """Rewrite the file with only live pairs, then atomically swap it in.

        Not crash-atomic across the data/head pair: a crash exactly between
        the two replaces leaves a mismatch that fails closed on next open.
        """
        with self._lock:
            tmp = self._path.with_suffix(self._path.suffix + ".compact")
            ops: list[Op] = [(PUT, k, v) for k, v in sorted(self._data.items())]
            with open(tmp, "wb") as fh:
                fh.write(MAGIC + bytes([VERSION]))
                if ops:
                    body = _encode_ops(ops)
                    checksum = sha512(body).digest()[:8]
                    fh.write(struct.pack(">I", len(body)) + body + checksum)
                else:
                    checksum = bytes(8)
                fh.flush()
                os.fsync(fh.fileno())
            self._fh.close()
            os.replace(tmp, self._path)
            self._record_count = 1 if ops else 0
            self._last_checksum = checksum
            self._write_head()
            self._fh = open(self._path, "ab")

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class StagedStore:
    """Read-through overlay that buffers writes for a single atomic commit.

    The protocol engine executes an action and appends the matching ledger
    block against one of these, then hands ``ops()`` to the base store in a
    single batch.  Nothing reaches persistent storage until that commit, so
    "block exists iff the action committed" holds even across a crash.
    """

    def __init__(self, base: KVStore) -> None:
        self._base = base
        self._overlay: dict[bytes, bytes | None] = {}  # None marks a delete
        self._ops: list[Op] = []

    def get(self, key: bytes) -> bytes | None:
        if key in self._overlay:
            return self._overlay[key]
        return self._base.get(key)

    def put(self, key: bytes, value: bytes) -> None:
        self._overlay[key] = value
        self._ops.append((PUT, key, value))

    def delete(self, key: bytes) -> None:
        self._overlay[key] = None
        self._ops.append((DELETE, key, b""))

    def apply_batch(self, ops: list[Op]) -> None:
        for kind, key, value in ops:
            if kind == PUT:
                self.put(key, value)
            else:
                self.delete(key)

    def scan_prefix(self, prefix: bytes) -> Iterator[tuple[bytes, bytes]]:
        merged: dict[bytes, bytes] = {k: v for k, v in self._base.scan_prefix(prefix)}
        for key, value in self._overlay.items():
            if not key.startswith(prefix):
                continue
            if value is None:
                merged.pop(key, None)
            else:
                merged[key] = value
        for key in sorted(merged):
            yield key, merged[key]

    def ops(self) -> list[Op]:
        return list(self._ops)

    def close(self) -> None:
        pass


def open_store(backend: str, path: str | Path | None = None, fsync: bool = True) -> KVStore:
    if backend == "memory":
        return MemoryStore()
    if backend == "file":
        if path is None:
            raise ValueError("file backend requires a path")
        return FileStore(path, fsync=fsync)
    raise ValueError(f"unknown backend {backend!r}")
