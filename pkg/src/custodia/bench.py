"""Benchmark harness: three experiments against a real daemon over loopback.

1. Bulk insertion: 20 transactions per batch size 10..50, one patient per
   series.  Per-transaction server CPU time must grow with the patient's
   existing record count and must not depend on total database size.
2. Fetch-all: server CPU time versus patient chain length, expected linear.
3. Ledger traversal: client CPU time for all four walk modes versus entry
   count, expected linear.

Each experiment writes CSV files with columns ``N,Time`` (time in
milliseconds) so the result plots can be regenerated directly; `bench plot`
renders simple line charts from them.

Absolute numbers are hardware-bound; the checks assert shape and ordering
only.
"""

from __future__ import annotations

import argparse
import csv
import shutil
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from scipy import stats

from . import wire
from .timing import cpu_now_ns
from .client import ROLE_ACTIVE, ROLE_PASSIVE, LedgerReader, TcpClient, run_action
from .keyfiles import KeyFile, load_keyfile

DEFAULT_BITS = 256
TRAVERSAL_WALL_BUDGET_MS = 120_000


# -- server lifecycle --------------------------------------------------------

def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class BenchServer:
    """A freshly bootstrapped daemon in a scratch directory."""

    def __init__(self, work_dir: Path, *, bits: int = DEFAULT_BITS, managers: int = 5,
                 supervisors: int = 4, patients: int = 7) -> None:
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        work_dir = self.work_dir
        self.tcp_port = _free_port()
        state_dir = work_dir / "state"
        self.config_path = work_dir / "server.conf"
        self.config_path.write_text(
            f"state_dir = {state_dir}\n"
            f"listen_port = {self.tcp_port}\n"
            "http_port = 0\n"
            f"params_bits = {bits}\n"
            "fsync = off\n"  # the experiments measure computation, not disk flushes
        )
        boot = subprocess.run(
            [sys.executable, "-m", "custodia.cli_server", "bootstrap",
             "--config", str(self.config_path),
             "--managers", str(managers), "--supervisors", str(supervisors),
             "--patients", str(patients)],
            capture_output=True, text=True)
        if boot.returncode != 0:
            raise RuntimeError(f"bootstrap failed: {boot.stderr}")
        self.keys_dir = state_dir / "keys"
        self.process = subprocess.Popen(
            [sys.executable, "-m", "custodia.cli_server", "serve",
             "--config", str(self.config_path)],
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        self._wait_ready()

    def _wait_ready(self, timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.process.poll() is not None:
                raise RuntimeError("server exited during startup")
            try:
                with socket.create_connection(("127.0.0.1", self.tcp_port), timeout=1):
                    return
            except OSError:
                time.sleep(0.05)
        raise RuntimeError("server did not come up in time")

    def keyfile(self, label: str) -> KeyFile:
        return load_keyfile(self.keys_dir / f"{label}.key")

    def client(self) -> TcpClient:
        return TcpClient("127.0.0.1", self.tcp_port)

    def stop(self) -> None:
        self.process.terminate()
        try:
            self.process.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self.process.kill()


class _Actor:
    """Keeps one custodian's newest active block across actions."""

    def __init__(self, server: BenchServer, label: str) -> None:
        self.keyfile = server.keyfile(label)
        self.transport = server.client()
        self.reader = LedgerReader(self.transport, self.keyfile.params)
        self._last = self.reader.find_tail(self.keyfile.genesis_id,
                                           self.keyfile.keypair.private, ROLE_ACTIVE)

    def act(self, action: int, **kwargs) -> wire.Stage2Response:
        response = run_action(self.transport, self.keyfile, self._last, action, **kwargs)
        self._last = self.reader.read_block(response.block_id)
        return response

    def close(self) -> None:
        self.transport.close()


# -- csv + fits ---------------------------------------------------------------

def write_csv(path: Path, rows: list[tuple[float, float]], comment: str | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["N", "Time"])
        writer.writerows(rows)


def _fit(rows: list[tuple[float, float]]) -> tuple[float, float, float]:
    """(slope, intercept, R^2) of a least-squares line through the rows."""
    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    result = stats.linregress(xs, ys)
    return result.slope, result.intercept, result.rvalue ** 2


# -- experiment 1: bulk insertion ---------------------------------------------

def experiment_insertion(server: BenchServer, out_dir: Path,
                         batches: tuple[int, ...] = (10, 20, 30, 40, 50),
                         transactions: int = 20) -> dict:
    series: dict[int, list[tuple[float, float]]] = {}
    for index, batch in enumerate(batches, start=1):
        actor = _Actor(server, "manager-1")
        patient = server.keyfile(f"patient-{index}").keypair.public
        rows = []
        for txn in range(1, transactions + 1):
            payloads = tuple(f"b{batch}-t{txn}-r{i}".encode() for i in range(batch))
            response = actor.act(wire.ACTION_INSERT, patient=patient, payloads=payloads)
            rows.append((txn, response.cpu_ns / 1e6))
        actor.close()
        series[batch] = rows
        write_csv(out_dir / f"{batch}.csv", rows)

    checks: dict[str, bool] = {}
    details: dict[str, object] = {}
    rhos = {}
    for batch, rows in series.items():
        rho = stats.spearmanr([r[0] for r in rows], [r[1] for r in rows]).statistic
        rhos[batch] = rho
    checks["insertion_monotone_spearman"] = all(rho > 0.9 for rho in rhos.values())
    details["spearman_by_batch"] = rhos

    # Same per-patient record count, very different total database size: the
    # fitted per-series time at 150 existing records must agree across series.
    fitted_at_150 = {}
    for batch, rows in series.items():
        pts = [((txn - 1) * batch, ms) for txn, ms in rows]
        slope, intercept, _ = _fit(pts)
        fitted_at_150[batch] = slope * 150 + intercept
    spread = max(fitted_at_150.values()) / max(min(fitted_at_150.values()), 1e-9)
    checks["insertion_db_size_independent"] = spread < 2.5
    details["fitted_ms_at_150_records"] = fitted_at_150
    return {"series": series, "checks": checks, "details": details}


# -- experiment 2: fetch-all ----------------------------------------------------

def experiment_fetch(server: BenchServer, out_dir: Path, start: int = 200,
                     stop: int = 1000, step: int = 100) -> dict:
    actor = _Actor(server, "manager-2")
    patient = server.keyfile("patient-6").keypair.public
    rows = []
    have = 0
    for target in range(start, stop + 1, step):
        grow = tuple(f"fetch-fill-{have + i}".encode() for i in range(target - have))
        if grow:
            actor.act(wire.ACTION_INSERT, patient=patient, payloads=grow)
            have = target
        response = actor.act(wire.ACTION_FETCH, patient=patient)
        assert len(response.records) == target
        rows.append((target, response.cpu_ns / 1e6))
    actor.close()
    write_csv(out_dir / "fetch.csv", rows)
    slope, _, r2 = _fit(rows)
    return {"rows": rows,
            "checks": {"fetch_linear": r2 > 0.9 and slope > 0},
            "details": {"slope_ms_per_record": slope, "r_squared": r2}}


# -- experiment 3: traversal ----------------------------------------------------

def _timed_walk(reader: LedgerReader, start_block, private: int, role: str,
                direction: str, limit: int) -> float:
    begin = cpu_now_ns()
    if direction == "forward":
        walked = reader.walk_forward(start_block, private, role, limit)
    else:
        walked = reader.walk_backward(start_block, private, role, limit)
    elapsed = cpu_now_ns() - begin
    assert len(walked) >= limit
    return elapsed / 1e6


def experiment_traversal(server: BenchServer, out_dir: Path,
                         limits: tuple[int, ...] = (50, 100, 150, 200, 250),
                         events: int = 250, reps: int = 3) -> dict:
    manager = server.keyfile("manager-1")
    patient = server.keyfile("patient-1")
    actor = _Actor(server, "manager-1")
    for i in range(events):
        actor.act(wire.ACTION_INSERT, patient=patient.keypair.public,
                  payloads=(f"event-{i}".encode(),))
    actor.close()

    transport = server.client()
    reader = LedgerReader(transport, manager.params)
    genesis_active = reader.read_block(manager.genesis_id)
    genesis_passive = reader.read_block(patient.genesis_id)
    tail_active = reader.find_tail(manager.genesis_id, manager.keypair.private, ROLE_ACTIVE)
    tail_passive = reader.find_tail(patient.genesis_id, patient.keypair.private, ROLE_PASSIVE)

    modes = {
        "active-forward": (genesis_active, manager.keypair.private, ROLE_ACTIVE, "forward"),
        "active-backward": (tail_active, manager.keypair.private, ROLE_ACTIVE, "backward"),
        "passive-forward": (genesis_passive, patient.keypair.private, ROLE_PASSIVE, "forward"),
        "passive-backward": (tail_passive, patient.keypair.private, ROLE_PASSIVE, "backward"),
    }
    # interleave the modes across repetitions so load drift cannot bias one
    # series against another
    best: dict[tuple[str, int], float] = {}
    wall_start = time.monotonic()
    for _ in range(reps):
        for name, (start_block, private, role, direction) in modes.items():
            for limit in limits:
                sample = _timed_walk(reader, start_block, private, role, direction, limit)
                key = (name, limit)
                if key not in best or sample < best[key]:
                    best[key] = sample
    wall_ms = (time.monotonic() - wall_start) * 1e3
    transport.close()
    series: dict[str, list[tuple[float, float]]] = {}
    for name in modes:
        rows = [(limit, best[(name, limit)]) for limit in limits]
        series[name] = rows
        write_csv(out_dir / "traversal" / f"{name}.csv", rows,
                  comment=f"wall_budget_ms={TRAVERSAL_WALL_BUDGET_MS}")

    slopes = {}
    r2s = {}
    for name, rows in series.items():
        slope, _, r2 = _fit(rows)
        slopes[name] = slope
        r2s[name] = r2
    checks = {
        "traversal_linear": all(r2 > 0.9 for r2 in r2s.values()),
        "forward_slopes_comparable": 0.5 <= slopes["active-forward"] / slopes["passive-forward"] <= 2.0,
        "active_backward_slowest": slopes["active-backward"] == max(slopes.values()),
        "wall_budget": wall_ms < TRAVERSAL_WALL_BUDGET_MS,
    }
    return {"series": series, "checks": checks,
            "details": {"slopes_ms_per_entry": slopes, "r_squared": r2s,
                        "wall_ms": wall_ms}}


# -- cli ------------------------------------------------------------------------

def run_experiment(number: int, out_dir: Path, *, bits: int = DEFAULT_BITS,
                   reps: int = 3, keep_state: bool = False) -> dict:
    work_dir = Path(tempfile.mkdtemp(prefix="custodia-bench-"))
    server = BenchServer(work_dir, bits=bits)
    try:
        if number == 1:
            result = experiment_insertion(server, out_dir)
        elif number == 2:
            result = experiment_fetch(server, out_dir)
        elif number == 3:
            result = experiment_traversal(server, out_dir, reps=reps)
        else:
            raise ValueError(f"no experiment {number}")
    finally:
        server.stop()
        if not keep_state:
            shutil.rmtree(work_dir, ignore_errors=True)
    return result


def _cmd_run(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    ok = True
    for number in args.experiments:
        print(f"== experiment {number}")
        result = run_experiment(number, out_dir, bits=args.bits, reps=args.reps,
                                keep_state=args.keep_state)
        for name, passed in result["checks"].items():
            print(f"  {name}: {'PASS' if passed else 'FAIL'}")
            ok = ok and passed
        for key, value in result["details"].items():
            print(f"  {key}: {value}")
    print(f"CSV output in {out_dir}")
    return 0 if ok else 1


def _cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results = Path(args.dir)

    def read_rows(path: Path) -> list[tuple[float, float]]:
        rows = []
        with open(path) as fh:
            for record in csv.reader(line for line in fh if not line.startswith("#")):
                if record and record[0] != "N":
                    rows.append((float(record[0]), float(record[1])))
        return rows

    made = []
    insertion = [p for p in sorted(results.glob("*.csv")) if p.stem.isdigit()]
    if insertion:
        plt.figure()
        for path in insertion:
            rows = read_rows(path)
            plt.plot([r[0] for r in rows], [r[1] for r in rows], label=f"batch {path.stem}")
        plt.xlabel("transaction")
        plt.ylabel("CPU time (ms)")
        plt.legend()
        plt.savefig(results / "insertion.png", dpi=120)
        made.append("insertion.png")
    if (results / "fetch.csv").exists():
        rows = read_rows(results / "fetch.csv")
        plt.figure()
        plt.plot([r[0] for r in rows], [r[1] for r in rows])
        plt.xlabel("records")
        plt.ylabel("CPU time (ms)")
        plt.savefig(results / "fetch.png", dpi=120)
        made.append("fetch.png")
    traversal = sorted((results / "traversal").glob("*.csv")) if (results / "traversal").exists() else []
    if traversal:
        plt.figure()
        for path in traversal:
            rows = read_rows(path)
            plt.plot([r[0] for r in rows], [r[1] for r in rows], label=path.stem)
        plt.xlabel("entries")
        plt.ylabel("CPU time (ms)")
        plt.legend()
        plt.savefig(results / "traversal.png", dpi=120)
        made.append("traversal.png")
    print(f"wrote {', '.join(made) if made else 'nothing (no CSVs found)'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="performance experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run")
    p_run.add_argument("--experiment", dest="experiments", action="append", type=int,
                       choices=(1, 2, 3), required=True,
                       help="experiment number (repeatable)")
    p_run.add_argument("--out", required=True, help="directory for CSV output")
    p_run.add_argument("--bits", type=int, default=DEFAULT_BITS)
    p_run.add_argument("--reps", type=int, default=3)
    p_run.add_argument("--keep-state", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_plot = sub.add_parser("plot")
    p_plot.add_argument("--dir", required=True, help="directory holding the CSVs")
    p_plot.set_defaults(func=_cmd_plot)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
