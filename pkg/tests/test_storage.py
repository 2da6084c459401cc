"""Key-value backends: semantics, atomic batches, crash and tamper behavior."""

import struct

import pytest

from custodia.errors import StateCorrupted
from custodia.storage import DELETE, PUT, FileStore, MemoryStore, StagedStore, open_store


@pytest.fixture(params=["memory", "file"])
def store(request, tmp_path):
    if request.param == "memory":
        yield MemoryStore()
    else:
        fs = FileStore(tmp_path / "data.kv")
        yield fs
        fs.close()


class TestBasics:
    def test_put_get_delete(self, store):
        assert store.get(b"a") is None
        store.put(b"a", b"1")
        assert store.get(b"a") == b"1"
        store.put(b"a", b"2")
        assert store.get(b"a") == b"2"
        store.delete(b"a")
        assert store.get(b"a") is None
        store.delete(b"a")  # idempotent

    def test_prefix_scan_is_sorted(self, store):
        store.put(b"blk/2", b"two")
        store.put(b"blk/1", b"one")
        store.put(b"idx/1", b"other")
        assert list(store.scan_prefix(b"blk/")) == [(b"blk/1", b"one"), (b"blk/2", b"two")]

    def test_batch(self, store):
        store.put(b"x", b"old")
        store.apply_batch([(PUT, b"a", b"1"), (PUT, b"b", b"2"), (DELETE, b"x", b"")])
        assert store.get(b"a") == b"1"
        assert store.get(b"b") == b"2"
        assert store.get(b"x") is None


class TestFileStore:
    def test_reopen_preserves_data(self, tmp_path):
        path = tmp_path / "data.kv"
        fs = FileStore(path)
        fs.put(b"k", b"v")
        fs.apply_batch([(PUT, b"a", b"1"), (DELETE, b"k", b"")])
        fs.close()
        again = FileStore(path)
        assert again.get(b"a") == b"1"
        assert again.get(b"k") is None
        again.close()

    def test_magic_and_version_checked(self, tmp_path):
        path = tmp_path / "data.kv"
        FileStore(path).close()
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(StateCorrupted):
            FileStore(path)

    def test_torn_tail_is_recovered(self, tmp_path):
        path = tmp_path / "data.kv"
        fs = FileStore(path)
        fs.put(b"a", b"1")
        fs.close()
        committed_size = path.stat().st_size
        # simulate a crash mid-append: extra bytes past the committed head
        with open(path, "ab") as fh:
            fh.write(struct.pack(">I", 1000) + b"partial")
        recovered = FileStore(path)
        assert recovered.get(b"a") == b"1"
        recovered.close()
        assert path.stat().st_size == committed_size

    def test_full_record_beyond_head_is_recovered(self, tmp_path):
        # crash after the record hit disk but before the head update
        path = tmp_path / "data.kv"
        fs = FileStore(path)
        fs.put(b"a", b"1")
        head = (tmp_path / "data.kv.head").read_bytes()
        fs.put(b"b", b"2")
        (tmp_path / "data.kv.head").write_bytes(head)  # roll the head back one commit
        fs.close()
        recovered = FileStore(path)
        assert recovered.get(b"b") == b"2"
        recovered.close()

    def test_bit_flip_in_record_detected(self, tmp_path):
        path = tmp_path / "data.kv"
        fs = FileStore(path)
        fs.put(b"a", b"payload-one")
        fs.put(b"b", b"payload-two")
        fs.close()
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(StateCorrupted):
            FileStore(path)

    def test_truncated_committed_tail_detected(self, tmp_path):
        # deleting a committed record (or hiding it behind a bad length) must
        # not be mistaken for crash recovery
        path = tmp_path / "data.kv"
        fs = FileStore(path)
        fs.put(b"a", b"1")
        size_after_first = path.stat().st_size
        fs.put(b"b", b"2")
        fs.close()
        with open(path, "r+b") as fh:
            fh.truncate(size_after_first)
        with pytest.raises(StateCorrupted):
            FileStore(path)

    def test_head_tampering_detected(self, tmp_path):
        path = tmp_path / "data.kv"
        fs = FileStore(path)
        fs.put(b"a", b"1")
        fs.close()
        head_path = tmp_path / "data.kv.head"
        raw = bytearray(head_path.read_bytes())
        raw[6] ^= 0x01
        head_path.write_bytes(bytes(raw))
        with pytest.raises(StateCorrupted):
            FileStore(path)
        head_path.unlink()
        with pytest.raises(StateCorrupted):
            FileStore(path)

    def test_compaction_keeps_live_data_only(self, tmp_path):
        path = tmp_path / "data.kv"
        fs = FileStore(path)
        for i in range(50):
            fs.put(b"k%d" % i, b"v%d" % i)
        for i in range(40):
            fs.delete(b"k%d" % i)
        size_before = path.stat().st_size
        fs.compact()
        assert path.stat().st_size < size_before
        fs.put(b"extra", b"1")
        fs.close()
        reopened = FileStore(path)
        assert reopened.get(b"k45") == b"v45"
        assert reopened.get(b"k5") is None
        assert reopened.get(b"extra") == b"1"
        reopened.close()

    def test_open_store_factory(self, tmp_path):
        assert isinstance(open_store("memory"), MemoryStore)
        fs = open_store("file", tmp_path / "x.kv")
        assert isinstance(fs, FileStore)
        fs.close()
        with pytest.raises(ValueError):
            open_store("sqlite")


class TestStagedStore:
    def test_nothing_reaches_base_before_commit(self):
        base = MemoryStore()
        base.put(b"seed", b"0")
        staged = StagedStore(base)
        staged.put(b"a", b"1")
        staged.delete(b"seed")
        assert base.get(b"a") is None
        assert base.get(b"seed") == b"0"
        # but the overlay sees its own effects
        assert staged.get(b"a") == b"1"
        assert staged.get(b"seed") is None
        base.apply_batch(staged.ops())
        assert base.get(b"a") == b"1"
        assert base.get(b"seed") is None

    def test_scan_merges_overlay(self):
        base = MemoryStore()
        base.put(b"p/1", b"base")
        base.put(b"p/2", b"base")
        staged = StagedStore(base)
        staged.put(b"p/3", b"new")
        staged.delete(b"p/1")
        staged.put(b"p/2", b"updated")
        assert list(staged.scan_prefix(b"p/")) == [(b"p/2", b"updated"), (b"p/3", b"new")]

    def test_discarded_overlay_leaves_no_trace(self):
        base = MemoryStore()
        staged = StagedStore(base)
        staged.put(b"a", b"1")
        del staged
        assert base.get(b"a") is None
