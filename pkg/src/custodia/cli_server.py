"""`ts` -- server operator command line.

Subcommands: bootstrap, serve, verify-chain, enroll-patient.
Exit codes: 0 ok, 2 configuration/usage error, 3 state corruption.
"""

from __future__ import annotations

import argparse
import signal
import sys

from . import groups
from .errors import StateCorrupted, StateExists
from .keyfiles import KeyFile, save_keyfile
from .provisioning import META_READY, enroll_patient, provision
from .server import ServerConfig, StateLock, TrustedServer, open_state
from .storage import FileStore

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STATE = 3


def _load_config(path: str) -> ServerConfig:
    try:
        return ServerConfig.load(path)
    except (OSError, ValueError) as exc:
        raise SystemExit(_fail(f"config error: {exc}", EXIT_CONFIG))


def _fail(message: str, code: int) -> int:
    print(message, file=sys.stderr)
    return code


def _cmd_bootstrap(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if config.store_path.exists():
        store_probe = FileStore(config.store_path)
        provisioned = store_probe.get(META_READY) is not None
        store_probe.close()
        if provisioned:
            return _fail(f"state already exists at {config.state_dir}", EXIT_CONFIG)
    try:
        lock = StateLock(config.state_dir)
    except StateCorrupted as exc:
        return _fail(str(exc), EXIT_STATE)
    try:
        if config.params_file and config.params_file.exists():
            params = groups.load_params(config.params_file)
        else:
            print(f"generating {config.params_bits}-bit group parameters ...")
            params = groups.generate_params(config.params_bits)
            target = config.params_file or (config.state_dir / "params.txt")
            groups.save_params(params, target)
            print(f"parameters written to {target}")
        store = FileStore(config.store_path)
        system = provision(store, params, managers=args.managers,
                           supervisors=args.supervisors, patients=args.patients)
        keys_dir = config.resolved_keys_dir()
        for label in sorted(system.credentials):
            cred = system.credentials[label]
            save_keyfile(keys_dir / f"{label}.key", KeyFile(
                role=cred.role, params=params,
                server_public=system.secrets.server_keypair.public,
                keypair=cred.keypair, access_key=cred.access_key,
                view_key=cred.view_key,
            ))
        store.compact()
        store.close()
        print(f"provisioned {len(system.credentials)} users "
              f"({args.managers} managers, {args.supervisors} supervisors, "
              f"{args.patients} patients)")
        print(f"key files in {keys_dir}")
        return EXIT_OK
    except StateExists as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except StateCorrupted as exc:
        return _fail(str(exc), EXIT_STATE)
    finally:
        lock.release()


def _cmd_serve(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    try:
        server = TrustedServer(config)
    except StateCorrupted as exc:
        return _fail(str(exc), EXIT_STATE)

    def _stop(signum, frame):  # noqa: ARG001
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _stop)
    host, port = server.tcp_address
    print(f"listening on tcp {host}:{port}"
          + (f", http {host}:{config.http_port}" if config.http_port else ""))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def _cmd_verify_chain(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    try:
        lock = StateLock(config.state_dir)
    except StateCorrupted as exc:
        return _fail(str(exc), EXIT_STATE)
    try:
        store, params, secrets = open_state(config)
    except StateCorrupted as exc:
        lock.release()
        return _fail(str(exc), EXIT_STATE)
    try:
        from .chain import LedgerStore

        ledger = LedgerStore(store, params)
        problems = ledger.verify_chain(secrets.server_keypair.public)
        tail = ledger.tail()
        count = 0 if tail is None else tail[0] + 1
        if problems:
            for problem in problems:
                print(problem, file=sys.stderr)
            return _fail(f"chain verification FAILED ({len(problems)} problems)", EXIT_STATE)
        print(f"chain verified: {count} blocks, no problems")
        return EXIT_OK
    finally:
        store.close()
        lock.release()


def _cmd_enroll_patient(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    try:
        public_key = int(args.pub, 16)
    except ValueError:
        return _fail("--pub must be the patient public key in hex", EXIT_CONFIG)
    try:
        lock = StateLock(config.state_dir)
    except StateCorrupted as exc:
        return _fail(str(exc), EXIT_STATE)
    try:
        store, params, secrets = open_state(config)
    except StateCorrupted as exc:
        lock.release()
        return _fail(str(exc), EXIT_STATE)
    try:
        record = enroll_patient(store, params, secrets, public_key,
                                personal_data=args.data.encode())
        print(f"enrolled patient; genesis block {record.genesis_id:x}")
        return EXIT_OK
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    finally:
        store.close()
        lock.release()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ts", description="trusted server operations")
    sub = parser.add_subparsers(dest="command", required=True)

    p_boot = sub.add_parser("bootstrap", help="initialise state, keys and genesis blocks")
    p_boot.add_argument("--config", required=True)
    p_boot.add_argument("--managers", type=int, default=5)
    p_boot.add_argument("--supervisors", type=int, default=4)
    p_boot.add_argument("--patients", type=int, default=7)
    p_boot.set_defaults(func=_cmd_bootstrap)

    p_serve = sub.add_parser("serve", help="run the daemon until signalled")
    p_serve.add_argument("--config", required=True)
    p_serve.set_defaults(func=_cmd_serve)

    p_verify = sub.add_parser("verify-chain", help="re-verify the whole ledger")
    p_verify.add_argument("--config", required=True)
    p_verify.set_defaults(func=_cmd_verify_chain)

    p_enroll = sub.add_parser("enroll-patient", help="register a patient after bootstrap")
    p_enroll.add_argument("--config", required=True)
    p_enroll.add_argument("--pub", required=True, help="patient public key (hex)")
    p_enroll.add_argument("--data", default="", help="opaque personal data")
    p_enroll.set_defaults(func=_cmd_enroll_patient)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
