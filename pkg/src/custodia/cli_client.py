"""`custodia` -- operator command line for custodians, patients, supervisors.

Subcommands: act (identify/fetch/insert/delete), log, audit, keys show.
Exit codes: 0 ok, 1 protocol reject or connection failure, 2 usage error.

The client remembers the caller's newest active block in a small cache file
next to the key file; when the cache is missing or stale it recovers by
walking forward from the caller's genesis block, which needs no server
trust beyond ordinary reads.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import httpx

from . import blocks as blk
from . import wire
from .client import (
    ROLE_ACTIVE,
    ROLE_PASSIVE,
    HttpClient,
    LedgerReader,
    TcpClient,
    run_action,
)
from .errors import AuthenticationFailure, CustodiaError, ProtocolReject
from .keyfiles import KeyFile, load_keyfile
from .server import DEFAULT_HTTP_PORT, DEFAULT_TCP_PORT

EXIT_OK = 0
EXIT_REJECT = 1
EXIT_USAGE = 2


def _make_transport(args: argparse.Namespace, keyfile: KeyFile):
    if args.transport == "http":
        base = args.server or f"http://127.0.0.1:{DEFAULT_HTTP_PORT}"
        if not base.startswith("http"):
            base = "http://" + base
        return HttpClient(base, params=keyfile.params)
    target = args.server or f"127.0.0.1:{DEFAULT_TCP_PORT}"
    host, _, port = target.rpartition(":")
    return TcpClient(host or "127.0.0.1", int(port), params=keyfile.params)


def _cache_path(args: argparse.Namespace) -> Path:
    if args.cache:
        return Path(args.cache)
    return Path(args.keyfile + ".last")


def _read_cache(path: Path) -> int | None:
    try:
        return int(path.read_text().strip(), 16)
    except (OSError, ValueError):
        return None


def _write_cache(path: Path, block_id: int) -> None:
    try:
        path.write_text(f"{block_id:x}\n")
    except OSError:
        pass  # a broken cache only costs a future walk


def _last_active_block(reader: LedgerReader, keyfile: KeyFile, cache: Path) -> blk.Block:
    cached = _read_cache(cache)
    if cached is not None:
        try:
            block = reader.read_block(cached)
            tail = reader.walk_forward(block, keyfile.keypair.private, ROLE_ACTIVE)
            return tail[-1] if tail else block
        except CustodiaError:
            pass  # stale or foreign cache entry; fall back to the full walk
    return reader.find_tail(keyfile.genesis_id, keyfile.keypair.private, ROLE_ACTIVE)


def _format_time(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%SZ")


def _emit(args: argparse.Namespace, doc: dict, human_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def _cmd_act(args: argparse.Namespace) -> int:
    keyfile = load_keyfile(args.keyfile)
    if keyfile.access_key is None:
        print("key file carries no access key; only custodians can act", file=sys.stderr)
        return EXIT_USAGE
    action = wire.ACTION_CODES[args.action]
    kwargs: dict = {}
    if args.action in ("identify", "delete"):
        kwargs["anchor_id"] = bytes.fromhex(args.anchor)
    if args.action in ("fetch", "insert"):
        kwargs["patient"] = int(args.patient, 16)
    if args.action == "insert":
        payloads = [d.encode() for d in (args.data or [])]
        if args.data_file:
            payloads.extend(line.encode() for line in
                            Path(args.data_file).read_text().splitlines() if line)
        if not payloads:
            print("insert needs at least one --data or --data-file record", file=sys.stderr)
            return EXIT_USAGE
        kwargs["payloads"] = tuple(payloads)

    transport = _make_transport(args, keyfile)
    reader = LedgerReader(transport, keyfile.params)
    cache = _cache_path(args)
    try:
        last = _last_active_block(reader, keyfile, cache)
        try:
            response = run_action(transport, keyfile, last, action, **kwargs)
        except ProtocolReject as exc:
            if exc.code not in (wire.REJECT_NOT_LAST_BLOCK, wire.REJECT_UNKNOWN_BLOCK):
                raise
            # Cache was stale in a way the pre-walk could not see; recover once.
            last = reader.find_tail(keyfile.genesis_id, keyfile.keypair.private, ROLE_ACTIVE)
            response = run_action(transport, keyfile, last, action, **kwargs)
    finally:
        transport.close()

    _write_cache(cache, response.block_id)
    doc: dict = {"action": args.action, "block_id": f"{response.block_id:x}",
                 "cpu_ns": response.cpu_ns}
    lines = []
    if args.action == "identify":
        doc["patient"] = f"{response.patient:x}"
        lines.append(f"patient {response.patient:x}")
    elif args.action == "fetch":
        doc["records"] = [{"anchor_id": a.hex(), "payload": p.decode(errors="replace")}
                          for a, p in response.records]
        lines.append(f"{len(response.records)} records")
        for a, p in response.records:
            lines.append(f"  {a.hex()}  {p.decode(errors='replace')}")
    elif args.action == "insert":
        doc["anchor_ids"] = [a.hex() for a in response.anchor_ids]
        lines.append(f"inserted {len(response.anchor_ids)} records")
        for a in response.anchor_ids:
            lines.append(f"  {a.hex()}")
    else:
        lines.append("deleted")
    lines.append(f"block {response.block_id:x}")
    _emit(args, doc, lines)
    return EXIT_OK


def _cmd_log(args: argparse.Namespace) -> int:
    keyfile = load_keyfile(args.keyfile)
    role = args.role
    transport = _make_transport(args, keyfile)
    reader = LedgerReader(transport, keyfile.params)
    private = keyfile.keypair.private
    try:
        genesis = reader.read_block(keyfile.genesis_id)
        if args.direction == "forward":
            chain = reader.walk_forward(genesis, private, role, args.limit)
            prevs = [genesis] + chain[:-1]
        else:
            if role == ROLE_ACTIVE:
                start = _last_active_block(reader, keyfile, _cache_path(args))
            else:
                start = reader.find_tail(keyfile.genesis_id, private, role)
            walked = reader.walk_backward(start, private, role,
                                          None if args.limit is None else args.limit + 1)
            events = [b for b in walked if not b.is_genesis][:args.limit]
            prevs = []
            for event in events:
                idx = walked.index(event)
                if idx + 1 < len(walked):
                    prevs.append(walked[idx + 1])
                else:
                    prevs.append(reader.prev_block(event, private, role))
            chain = events
    except CustodiaError as exc:
        print(str(exc), file=sys.stderr)
        transport.close()
        return EXIT_REJECT

    rows = []
    alarms = []
    for block, prev in zip(chain, prevs):
        try:
            if role == ROLE_ACTIVE:
                content = reader.decrypt_as_active(block, prev, private)
                counterpart = content.passive_public
            else:
                content = reader.decrypt_as_passive(block, private)
                counterpart = content.active_public
            rows.append({
                "seq": block.seq,
                "time": content.timestamp,
                "counterpart": f"{counterpart:x}",
                "action": wire.ACTION_NAMES.get(content.action, str(content.action)),
                "block_id": f"{block.block_id:x}",
            })
        except AuthenticationFailure:
            # the genesis forward hop is shared between the two roles, so the
            # block next to genesis may belong to the caller's other role;
            # anywhere else an undecryptable own-chain block is an alarm
            if not prev.is_genesis:
                alarms.append(f"{block.block_id:x}")
    transport.close()

    lines = [f"{len(rows)} events ({role}, {args.direction})"]
    for row in rows:
        lines.append(f"  seq {row['seq']:>4}  {_format_time(row['time'])}  "
                     f"{row['action']:<8}  counterpart {row['counterpart']}  "
                     f"block {row['block_id']}")
    for alarm in alarms:
        lines.append(f"  ALARM: block {alarm} on own chain failed to decrypt")
    _emit(args, {"events": rows, "alarms": alarms}, lines)
    return EXIT_OK


def _cmd_audit(args: argparse.Namespace) -> int:
    keyfile = load_keyfile(args.keyfile)
    if keyfile.view_key is None or keyfile.access_key is None:
        print("audit requires a supervisor key file with a view key", file=sys.stderr)
        return EXIT_USAGE
    transport = _make_transport(args, keyfile)
    reader = LedgerReader(transport, keyfile.params)
    params = keyfile.params
    try:
        if args.block:
            blocks = [reader.read_block(int(args.block, 16))]
        else:
            tail = transport.tail()
            if tail is None:
                print("ledger is empty", file=sys.stderr)
                transport.close()
                return EXIT_REJECT
            last = tail.seq if args.to_seq is None else min(args.to_seq, tail.seq)
            blocks = []
            for seq in range(args.from_seq, last + 1):
                raw = transport.read_seq_raw(seq)
                if raw is not None:
                    blocks.append(blk.deserialize_block(params, raw))
    except CustodiaError as exc:
        print(str(exc), file=sys.stderr)
        transport.close()
        return EXIT_REJECT
    transport.close()

    rows = []
    lines = []
    for block in blocks:
        if block.is_genesis:
            rows.append({"seq": block.seq, "block_id": f"{block.block_id:x}",
                         "genesis": True})
            lines.append(f"  seq {block.seq:>4}  block {block.block_id:x}  no content (genesis)")
            continue
        content = blk.decrypt_content_supervisor(
            params, block, keyfile.access_key, keyfile.view_key,
            keyfile.keypair.private_inv)
        rows.append({
            "seq": block.seq,
            "block_id": f"{block.block_id:x}",
            "active": f"{content.active_public:x}",
            "passive": f"{content.passive_public:x}",
            "action": wire.ACTION_NAMES.get(content.action, str(content.action)),
            "time": content.timestamp,
        })
        lines.append(f"  seq {block.seq:>4}  {_format_time(content.timestamp)}  "
                     f"{wire.ACTION_NAMES.get(content.action, '?'):<8}  "
                     f"active {content.active_public:x}  passive {content.passive_public:x}")
    _emit(args, {"blocks": rows}, [f"{len(rows)} blocks"] + lines)
    return EXIT_OK


def _cmd_keys_show(args: argparse.Namespace) -> int:
    keyfile = load_keyfile(args.keyfile)
    doc = {
        "role": keyfile.role,
        "public": f"{keyfile.keypair.public:x}",
        "genesis_id": f"{keyfile.genesis_id:x}",
        "has_access_key": keyfile.access_key is not None,
        "has_view_key": keyfile.view_key is not None,
        "group_bits": keyfile.params.p.bit_length(),
    }
    lines = [
        f"role          {doc['role']}",
        f"public key    {doc['public']}",
        f"genesis block {doc['genesis_id']}",
        f"access key    {'yes' if doc['has_access_key'] else 'no'}",
        f"view key      {'yes' if doc['has_view_key'] else 'no'}",
        f"group size    {doc['group_bits']} bits",
    ]
    _emit(args, doc, lines)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="custodia",
                                     description="client for the custodial record service")
    parser.add_argument("--keyfile", required=True)
    parser.add_argument("--server", default=None,
                        help="http URL or host:port (default local daemon)")
    parser.add_argument("--transport", choices=("http", "tcp"), default="http")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--cache", default=None,
                        help="path of the last-active-block cache file")
    sub = parser.add_subparsers(dest="command", required=True)

    p_act = sub.add_parser("act", help="perform an access event")
    act_sub = p_act.add_subparsers(dest="action", required=True)
    p_identify = act_sub.add_parser("identify")
    p_identify.add_argument("--anchor", required=True, help="anchor id (hex)")
    p_fetch = act_sub.add_parser("fetch")
    p_fetch.add_argument("--patient", required=True, help="patient public key (hex)")
    p_insert = act_sub.add_parser("insert")
    p_insert.add_argument("--patient", required=True, help="patient public key (hex)")
    p_insert.add_argument("--data", action="append", help="record payload (repeatable)")
    p_insert.add_argument("--data-file", default=None, help="file with one record per line")
    p_delete = act_sub.add_parser("delete")
    p_delete.add_argument("--anchor", required=True, help="anchor id (hex)")
    for sp in (p_identify, p_fetch, p_insert, p_delete):
        sp.set_defaults(func=_cmd_act)

    p_log = sub.add_parser("log", help="browse own event history")
    p_log.add_argument("--direction", choices=("forward", "backward"), default="forward")
    p_log.add_argument("--role", choices=(ROLE_ACTIVE, ROLE_PASSIVE), default=ROLE_ACTIVE)
    p_log.add_argument("--limit", type=int, default=None)
    p_log.set_defaults(func=_cmd_log)

    p_audit = sub.add_parser("audit", help="supervisor: decrypt participation info")
    p_audit.add_argument("--block", default=None, help="single block id (hex)")
    p_audit.add_argument("--from-seq", type=int, default=0)
    p_audit.add_argument("--to-seq", type=int, default=None)
    p_audit.set_defaults(func=_cmd_audit)

    p_keys = sub.add_parser("keys", help="key file inspection")
    keys_sub = p_keys.add_subparsers(dest="keys_command", required=True)
    p_show = keys_sub.add_parser("show")
    p_show.set_defaults(func=_cmd_keys_show)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtocolReject as exc:
        print(f"rejected: {exc.message} (code {exc.code})", file=sys.stderr)
        return EXIT_REJECT
    except (CustodiaError, OSError, ValueError, httpx.HTTPError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_REJECT


if __name__ == "__main__":
    sys.exit(main())
