"""``fedsim`` command line: simulate, server, client, partition and bench-stream.

Exit codes: 0 success, 1 job or runtime failure, 2 invalid configuration or
input, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from .bench import BenchConfig, GuardExceeded, VerificationFailed, run_bench
from .client import DuplicateName
from .data import DataError
from .server import ConfigError
from .sfm import ConnectionRefused, DriverUnavailable, FrameError
from .sim import (
    build_experiment,
    load_config,
    open_communicator,
    partition_summary,
    run_client,
    run_server_job,
    simulate,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_INTERRUPTED = 0, 1, 2, 130

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mib": 1 << 20, "g": 1 << 30, "gib": 1 << 30}


def parse_size(text: str) -> int:
    """``"4096"``, ``"1MiB"``, ``"256M"`` or ``"3GiB"`` to a byte count (binary units)."""
    m = re.fullmatch(r"\s*(\d+)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2).lower()]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
    p.add_argument("--rounds", type=int, help="override job.num_rounds")
    p.add_argument("--clients", type=int, help="override n_clients")
    p.add_argument("--alpha", type=float, help="override data.alpha")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--driver", help="override transport.driver (inproc or tcp)")
    p.add_argument("--chunk-size", type=parse_size, help="override transport.chunk_size")
    p.add_argument("--workflow", choices=["fedavg", "cyclic"], help="override job.workflow")
    p.add_argument("--output-dir", type=Path, help="override output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated learning simulator.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the server and all clients in this process")
    _add_overrides(p)

    p = sub.add_parser("server", help="run the server side of a job")
    _add_overrides(p)
    p.add_argument("--address", help="listen address (tcp host:port; port 0 picks one)")
    p.add_argument("--address-file", type=Path, help="write the bound address here once listening")

    p = sub.add_parser("client", help="run one client of a job")
    _add_overrides(p)
    p.add_argument("--site-index", type=int, required=True, help="which data shard this client owns (0-based)")
    p.add_argument("--address", required=True, help="server address")

    p = sub.add_parser("partition", help="Dirichlet label partition of a labels file")
    p.add_argument("labels", type=Path, help="file with one integer class id per line")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench-stream", help="large-model streaming benchmark")
    p.add_argument("--size", type=parse_size, default=256 << 20, help="payload bytes (default 256MiB)")
    p.add_argument("--chunk-size", type=parse_size, default=1 << 20)
    p.add_argument("--driver", default="inproc")
    p.add_argument("--mode", choices=["blob", "file"], default="blob")
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--keys", type=int, default=64)
    p.add_argument("--guard-bytes", type=parse_size, help="refuse runs needing more than this")
    p.add_argument("--workdir", help="scratch directory for file mode")
    return parser


def _overrides(args) -> dict:
    return {
        "rounds": args.rounds,
        "clients": args.clients,
        "alpha": args.alpha,
        "seed": args.seed,
        "driver": args.driver,
        "chunk_size": args.chunk_size,
        "workflow": args.workflow,
        "output_dir": args.output_dir,
    }


def _error(message: str) -> None:
    print(f"fedsim: {message}", file=sys.stderr)


def _summarize(report: dict) -> None:
    run = report["run"]
    print(f"status: {report['status']}" + (f" ({report['error']})" if report["error"] else ""))
    for r in run["rounds"]:
        metrics = ", ".join(f"{k}={v:.4f}" for k, v in sorted(r["global_metrics"].items()))
        print(f"round {r['round']}: {metrics}  sent={r['bytes_sent']}B received={r['bytes_received']}B")
    if run["best_round"] is not None:
        print(f"best round: {run['best_round']} ({run['selection_metric']}={run['best_metric']:.4f})")
    for name, metrics in sorted(run["local_only"].items()):
        print(f"local-only {name}: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, **_overrides(args))
    report = simulate(cfg)
    _summarize(report)
    print(f"report: {cfg.output_dir / 'report.json'}")
    return EXIT_OK if report["status"] == "completed" else EXIT_FAILED


def cmd_server(args) -> int:
    cfg = load_config(args.config, **_overrides(args))
    experiment = build_experiment(cfg)
    communicator = open_communicator(cfg, args.address)
    print(f"listening on {communicator.address}", flush=True)
    if args.address_file:
        args.address_file.write_text(communicator.address + "\n")
    report = run_server_job(cfg, communicator, experiment)
    _summarize(report)
    return {"completed": EXIT_OK, "interrupted": EXIT_INTERRUPTED}.get(report["status"], EXIT_FAILED)


def cmd_client(args) -> int:
    cfg = load_config(args.config, **_overrides(args))
    try:
        ctx = run_client(cfg, args.site_index, args.address)
    except DuplicateName as exc:
        _error(f"server rejected the client name: {exc}")
        return EXIT_FAILED
    except ConnectionRefused as exc:
        _error(str(exc))
        return EXIT_FAILED
    print(f"{ctx.client_name} stopped: {ctx.stop_reason}")
    return EXIT_OK if ctx.stop_reason == "job-end" else EXIT_FAILED


def read_labels(path: Path) -> list[int]:
    try:
        text_lines = path.read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read labels: {exc}") from None
    labels = []
    for lineno, line in enumerate(text_lines, 1):
        text = line.strip()
        if not text:
            continue
        try:
            labels.append(int(text))
        except ValueError:
            raise DataError(f"{path}:{lineno}: not an integer: {text!r}") from None
    if not labels:
        raise DataError(f"{path}: no labels")
    if min(labels) < 0:
        raise DataError(f"{path}: class ids must be >= 0")
    return labels


def cmd_partition(args) -> int:
    if not args.alpha > 0:
        raise DataError("--alpha must be > 0")
    if args.clients < 1:
        raise DataError("--clients must be >= 1")
    labels = read_labels(args.labels)
    json.dump(partition_summary(labels, args.clients, args.alpha, args.seed), sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        cfg = BenchConfig(
            size=args.size,
            chunk_size=args.chunk_size,
            driver=args.driver,
            mode=args.mode,
            rounds=args.rounds,
            clients=args.clients,
            keys=args.keys,
            guard_bytes=args.guard_bytes,
            workdir=args.workdir,
        )
    except (ValueError, FrameError) as exc:
        raise DataError(str(exc)) from None
    try:
        report = run_bench(cfg)
    except VerificationFailed as exc:
        _error(str(exc))
        return EXIT_FAILED
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "server": cmd_server,
    "client": cmd_client,
    "partition": cmd_partition,
    "bench-stream": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, GuardExceeded, DriverUnavailable) as exc:
        _error(str(exc))
        return EXIT_USAGE
    except KeyboardInterrupt:
        _error("interrupted")
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
