"""Streaming benchmark: round trips of a large model between a server and two clients.

Each round the server sends the payload to every client, each client adds a
constant to every float32 element and sends it back, and the server checks
every returned payload against an independently computed expected array.

``blob`` mode ships an FLM1 model of ``keys`` tensors through the normal
server communicator and client runtime. ``file`` mode streams a raw float32
file as a ``file`` message, so neither side ever holds the payload in memory.
"""

from __future__ import annotations

import hashlib
import logging
import os
import resource
import shutil
import tempfile
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import protocol
from .client import ClientConfig, ClientContext, run_client_loop
from .model import FLModel, model_encoded_size, model_linear_update
from .server.communicator import Communicator
from .server.controller import aggregate_weighted
from .sfm import DEFAULT_CHUNK_SIZE, Listener, Message, SfmConnection, check_chunk_size, connect, frame_count

log = logging.getLogger(__name__)

_GOLDEN = np.uint64(2654435761)
_BLOCK_ELEMS = 1 << 18  # 1 MiB of float32 per oracle block


class GuardExceeded(ValueError):
    pass


class VerificationFailed(AssertionError):
    pass


@dataclass
class BenchConfig:
    size: int = 256 << 20
    chunk_size: int = DEFAULT_CHUNK_SIZE
    driver: str = "inproc"
    mode: str = "blob"
    rounds: int = 3
    clients: int = 2
    keys: int = 64
    constant: float = 0.5
    guard_bytes: int | None = None
    workdir: str | None = None

    def __post_init__(self):
        if self.mode not in ("blob", "file"):
            raise ValueError("mode must be 'blob' or 'file'")
        if self.size < 0:
            raise ValueError("size must be >= 0")
        if self.rounds < 1 or self.clients < 1 or self.keys < 1:
            raise ValueError("rounds, clients and keys must be >= 1")
        check_chunk_size(self.chunk_size)


@dataclass
class BenchReport:
    payload_size: int
    chunk_size: int
    driver: str
    mode: str
    rounds: int
    clients: int
    keys: int
    throughput_mb_s: float
    sender_peak_buffer: int
    receiver_peak_buffer: int
    assembly_peak: int
    round_seconds: list[float] = field(default_factory=list)
    verified_rounds: list[bool] = field(default_factory=list)
    frames_per_message: int = 0
    max_rss_bytes: int = 0  # informational only

    def to_dict(self) -> dict:
        return asdict(self)


# -- payload oracle --------------------------------------------------------------


def pattern(start: int, count: int) -> np.ndarray:
    """Initial float32 value of elements ``start .. start+count`` of the payload."""
    idx = np.arange(start, start + count, dtype=np.uint64)
    mixed = (idx * _GOLDEN) & np.uint64(0xFFFFFFFF)
    return (mixed.astype(np.float64) / 2.0**32).astype(np.float32)


def expected_block(start: int, count: int, rounds_applied: int, constant: float) -> np.ndarray:
    """The block after ``rounds_applied`` client passes, each one float32 add."""
    block = pattern(start, count)
    c = np.float32(constant)
    for _ in range(rounds_applied):
        block += c
    return block


def expected_digest(n_elems: int, rounds_applied: int, constant: float) -> str:
    h = hashlib.sha256()
    for block in pattern_stream(n_elems, rounds_applied, constant):
        h.update(block)
    return h.hexdigest()


def pattern_stream(n_elems: int, rounds_applied: int = 0, constant: float = 0.5):
    """The expected array as an iterable of 1 MiB byte blocks, never materialized whole."""
    for start in range(0, n_elems, _BLOCK_ELEMS):
        yield expected_block(start, min(_BLOCK_ELEMS, n_elems - start), rounds_applied, constant).tobytes()


def buffer_digest(buffer) -> str:
    view = memoryview(buffer).cast("B")
    h = hashlib.sha256()
    for off in range(0, len(view), 4 * _BLOCK_ELEMS):
        h.update(view[off : off + 4 * _BLOCK_ELEMS])
    return h.hexdigest()


def params_digest(params, keys: list[str]) -> str:
    h = hashlib.sha256()
    for k in keys:
        h.update(np.ascontiguousarray(params[k], dtype="<f4").tobytes())
    return h.hexdigest()


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def key_names(keys: int) -> list[str]:
    width = len(str(keys - 1))
    return [f"layer_{i:0{width}d}" for i in range(keys)]


# -- guard ---------------------------------------------------------------------


def physical_memory() -> int:
    return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")


def estimated_need(cfg: BenchConfig) -> tuple[str, int, int]:
    """(resource, bytes needed, bytes available) for the run."""
    if cfg.mode == "blob":
        # server model, its encoding, oracle copy, then per client a receive
        # buffer, the updated params and their encoding, plus the returned copy
        need = cfg.size * (3 + 4 * cfg.clients)
        return "memory", need, physical_memory()
    workdir = cfg.workdir or tempfile.gettempdir()
    return "disk", cfg.size * (2 + 2 * cfg.clients), shutil.disk_usage(workdir).free


def check_guard(cfg: BenchConfig) -> None:
    what, need, have = estimated_need(cfg)
    limit = cfg.guard_bytes if cfg.guard_bytes is not None else have
    if need > limit:
        raise GuardExceeded(
            f"{cfg.mode} mode with {cfg.size} bytes needs about {need} bytes of {what}; guard is {limit}"
        )


# -- blob mode -------------------------------------------------------------------


class AddConstantTrainer:
    """Adds a constant to every element, in the tensor's own dtype."""

    validation_size = 0

    def __init__(self, constant: float):
        self.constant = constant

    def train(self, params, round: int = 0):
        out = {k: v + v.dtype.type(self.constant) for k, v in params.items()}
        return out, 1, {}

    def validate(self, params):
        return {}


def initial_model(cfg: BenchConfig) -> FLModel:
    per_key = cfg.size // (4 * cfg.keys)
    params = {name: pattern(i * per_key, per_key) for i, name in enumerate(key_names(cfg.keys))}
    return FLModel(params=params, total_rounds=cfg.rounds)


def _peaks(connections: list[SfmConnection]) -> tuple[int, int, int]:
    return (
        max((c.send_meter.peak for c in connections), default=0),
        max((c.recv_meter.peak for c in connections), default=0),
        max((c.assembly_peak for c in connections), default=0),
    )


def _bench_blob(cfg: BenchConfig) -> BenchReport:
    keys = key_names(cfg.keys)
    model = initial_model(cfg)
    n_elems = cfg.keys * (cfg.size // (4 * cfg.keys))
    address = "127.0.0.1:0" if cfg.driver == "tcp" else f"bench-{uuid.uuid4().hex[:8]}"
    comm = Communicator(cfg.driver, address, job_id="bench-stream", total_rounds=cfg.rounds, chunk_size=cfg.chunk_size)
    contexts: list[ClientContext] = []
    threads = []
    names = [f"site-{i + 1}" for i in range(cfg.clients)]
    for name in names:
        ctx = ClientContext(
            ClientConfig(name, comm.address, cfg.driver, chunk_size=cfg.chunk_size, reconnect_backoff=())
        ).start()
        contexts.append(ctx)
        t = threading.Thread(target=run_client_loop, args=(ctx, AddConstantTrainer(cfg.constant)), daemon=True)
        t.start()
        threads.append(t)
    round_seconds, verified = [], []
    moved = 0
    frames = frame_count(model_encoded_size(model), cfg.chunk_size)
    try:
        comm.wait_for_clients(cfg.clients, 30)
        for r in range(cfg.rounds):
            started = time.monotonic()
            outcome = comm.broadcast_and_wait(names, protocol.TRAIN, model, cfg.clients, None, r)
            round_seconds.append(time.monotonic() - started)
            want = expected_digest(n_elems, r + 1, cfg.constant)
            ok = all(params_digest(res.payload.params, keys) == want for res in outcome.results)
            verified.append(ok)
            if not ok:
                raise VerificationFailed(f"round {r}: returned payload differs from the expected array")
            moved += outcome.bytes_sent + outcome.bytes_received
            model = model_linear_update(model, aggregate_weighted(outcome.results))
        peaks = _peaks(comm.connections() + [c.connection for c in contexts])
    finally:
        comm.end_job("bench finished")
        for t in threads:
            t.join(timeout=10)
    return _report(cfg, n_elems * 4, moved, round_seconds, verified, peaks, frames)


# -- file mode -------------------------------------------------------------------


def write_pattern_file(path: Path, n_elems: int, rounds_applied: int, constant: float) -> None:
    with open(path, "wb") as fh:
        for block in pattern_stream(n_elems, rounds_applied, constant):
            fh.write(block)


def add_constant_file(src: Path, dst: Path, constant: float) -> None:
    c = np.float32(constant)
    with open(src, "rb") as fin, open(dst, "wb") as fout:
        for block in iter(lambda: fin.read(4 * _BLOCK_ELEMS), b""):
            arr = np.frombuffer(block, dtype="<f4").copy()
            arr += c
            fout.write(arr.tobytes())


def _file_client(conn: SfmConnection, workdir: Path, constant: float, rounds: int) -> None:
    for _ in range(rounds):
        msg = conn.recv_message()
        received = Path(msg.body)
        out = workdir / f"{conn.name}-{msg.headers['round']}.f32"
        add_constant_file(received, out, constant)
        received.unlink()
        conn.send_message(Message("bench-result", out, {"round": msg.headers["round"]}, kind="file"))
        out.unlink()


def _bench_file(cfg: BenchConfig) -> BenchReport:
    n_elems = cfg.size // 4
    workdir = Path(tempfile.mkdtemp(prefix="fedsim-bench-", dir=cfg.workdir))
    address = "127.0.0.1:0" if cfg.driver == "tcp" else f"bench-{uuid.uuid4().hex[:8]}"
    listener = Listener(cfg.driver, address, chunk_size=cfg.chunk_size, spill_dir=workdir)
    clients = [
        connect(cfg.driver, listener.address, chunk_size=cfg.chunk_size, spill_dir=workdir, name=f"site-{i + 1}")
        for i in range(cfg.clients)
    ]
    servers = [listener.accept(timeout=10) for _ in clients]
    workers = [
        threading.Thread(target=_file_client, args=(c, workdir, cfg.constant, cfg.rounds), daemon=True)
        for c in clients
    ]
    for w in workers:
        w.start()
    current = workdir / "global-0.f32"
    write_pattern_file(current, n_elems, 0, cfg.constant)
    round_seconds, verified = [], []
    moved = 0
    frames = 0
    errors: list[BaseException] = []
    try:
        for r in range(cfg.rounds):
            started = time.monotonic()
            results: list[Path | None] = [None] * len(servers)

            def exchange(i: int, conn: SfmConnection) -> None:
                nonlocal moved, frames
                try:
                    receipt = conn.send_message(Message("bench-data", current, {"round": str(r)}, kind="file"))
                    reply = conn.recv_message(timeout=600)
                    results[i] = Path(reply.body)
                    moved += receipt.wire_bytes + reply.wire_size
                    frames = max(frames, receipt.frames)
                except BaseException as exc:
                    errors.append(exc)

            senders = [threading.Thread(target=exchange, args=(i, c)) for i, c in enumerate(servers)]
            for t in senders:
                t.start()
            for t in senders:
                t.join()
            round_seconds.append(time.monotonic() - started)
            if errors:
                raise errors[0]
            want = expected_digest(n_elems, r + 1, cfg.constant)
            ok = all(file_digest(p) == want for p in results)
            verified.append(ok)
            if not ok:
                raise VerificationFailed(f"round {r}: returned file differs from the expected array")
            current.unlink()
            current = workdir / f"global-{r + 1}.f32"
            os.replace(results[0], current)
            for p in results[1:]:
                p.unlink()
        peaks = _peaks(servers + clients)
    finally:
        for c in servers + clients:
            c.close()
        listener.close()
        shutil.rmtree(workdir, ignore_errors=True)
    return _report(cfg, n_elems * 4, moved, round_seconds, verified, peaks, frames)


def _report(cfg, payload_size, moved, round_seconds, verified, peaks, frames) -> BenchReport:
    seconds = sum(round_seconds)
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return BenchReport(
        payload_size=payload_size,
        chunk_size=cfg.chunk_size,
        driver=cfg.driver,
        mode=cfg.mode,
        rounds=cfg.rounds,
        clients=cfg.clients,
        keys=cfg.keys if cfg.mode == "blob" else 0,
        throughput_mb_s=(moved / 2**20) / seconds if seconds > 0 else 0.0,
        sender_peak_buffer=peaks[0],
        receiver_peak_buffer=peaks[1],
        assembly_peak=peaks[2],
        round_seconds=round_seconds,
        verified_rounds=verified,
        frames_per_message=frames,
        max_rss_bytes=rss,
    )


def run_bench(cfg: BenchConfig) -> BenchReport:
    check_guard(cfg)
    return _bench_blob(cfg) if cfg.mode == "blob" else _bench_file(cfg)
