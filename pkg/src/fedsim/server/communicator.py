"""Server-side connection handling, client registry and task brokering."""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field

from .. import protocol
from ..filters import Direction, FilterSpec, apply_chain
from ..model import FLModel, ModelError, decode_model, encode_model_parts
from ..protocol import Task, TaskResult, TaskStatus
from ..sfm import (
    ConnectionClosed,
    FrameError,
    Listener,
    Message,
    SfmConnection,
    StreamAborted,
    Timeout,
    TransportStats,
)

log = logging.getLogger(__name__)


class CommunicatorError(Exception):
    pass


class NotEnoughClients(CommunicatorError):
    pass


class InsufficientResponses(CommunicatorError):
    def __init__(self, message: str, results: list[TaskResult]):
        super().__init__(message)
        self.results = results


class ClientState(str, enum.Enum):
    IDLE = "IDLE"
    BUSY = "BUSY"
    LOST = "LOST"


@dataclass
class ClientRecord:
    client_name: str
    connection: SfmConnection
    heartbeat_secs: float = 5.0
    state: ClientState = ClientState.IDLE
    registered_at: float = field(default_factory=time.monotonic)
    # set once the welcome reply has gone out, so its bytes never land in a round
    ready: bool = False

    @property
    def last_heartbeat(self) -> float:
        return self.connection.last_received

    def alive(self, now: float | None = None) -> bool:
        if self.state is ClientState.LOST or self.connection.closed:
            return False
        now = time.monotonic() if now is None else now
        return now - self.last_heartbeat <= 3 * self.heartbeat_secs + 1.0


class ClientRegistry:
    def __init__(self):
        self._records: dict[str, ClientRecord] = {}
        self._cond = threading.Condition()

    def register(self, record: ClientRecord) -> bool:
        """Add ``record``; False if an alive client already holds the name."""
        with self._cond:
            existing = self._records.get(record.client_name)
            if existing is not None and existing.alive():
                return False
            self._records[record.client_name] = record
            self._cond.notify_all()
            return True

    def get(self, name: str) -> ClientRecord | None:
        with self._cond:
            return self._records.get(name)

    def mark(self, name: str, state: ClientState, connection: SfmConnection | None = None) -> None:
        with self._cond:
            rec = self._records.get(name)
            if rec is not None and (connection is None or rec.connection is connection):
                if rec.state is not ClientState.LOST:
                    rec.state = state
            self._cond.notify_all()

    def active(self) -> list[str]:
        now = time.monotonic()
        with self._cond:
            for rec in self._records.values():
                if rec.state is not ClientState.LOST and not rec.alive(now):
                    rec.state = ClientState.LOST
            return sorted(n for n, r in self._records.items() if r.ready and r.state is not ClientState.LOST)

    def records(self) -> list[ClientRecord]:
        with self._cond:
            return list(self._records.values())

    def wait_for(self, count: int, timeout: float) -> list[str]:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                names = self.active()
                if len(names) >= count:
                    return names
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise NotEnoughClients(f"{len(names)} active clients after {timeout}s, need {count}")
                self._cond.wait(min(remaining, 0.25))


@dataclass
class BroadcastOutcome:
    results: list[TaskResult]
    bytes_sent: int
    bytes_received: int


class Communicator:
    """Accepts client connections and delivers tasks and results for a controller."""

    def __init__(
        self,
        driver: str,
        address: str,
        *,
        job_id: str = "job",
        total_rounds: int = 0,
        chunk_size: int | None = None,
        spill_dir=None,
        filters: list[FilterSpec] | None = None,
        register_timeout: float = 10.0,
    ):
        options = {"spill_dir": spill_dir}
        if chunk_size is not None:
            options["chunk_size"] = chunk_size
        self.listener = Listener(driver, address, **options)
        self.address = self.listener.address
        self.job_id = job_id
        self.total_rounds = total_rounds
        self.filters = list(filters or [])
        self.register_timeout = register_timeout
        self.registry = ClientRegistry()
        self._connections: list[SfmConnection] = []
        self._conn_lock = threading.Lock()
        self._results: queue.Queue[TaskResult] = queue.Queue()
        self._task_ids = itertools.count(1)
        self._stopping = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, name="fedsim-accept", daemon=True)
        self._accept_thread.start()

    # -- connection handling -------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn = self.listener.accept(timeout=0.2)
            except ConnectionClosed:
                return
            if conn is None:
                continue
            with self._conn_lock:
                self._connections.append(conn)
            threading.Thread(target=self._serve, args=(conn,), name="fedsim-client", daemon=True).start()

    def _serve(self, conn: SfmConnection) -> None:
        try:
            hello = conn.recv_message(timeout=self.register_timeout)
        except (Timeout, ConnectionClosed, FrameError):
            conn.close()
            return
        name = hello.headers.get("client-name", "")
        if hello.topic != protocol.REGISTER or not name:
            self._reply(conn, Message(protocol.REJECT, b"", {"reason": "expected registration"}))
            conn.close()
            return
        heartbeat = float(hello.headers.get("heartbeat-secs", "5") or 5)
        record = ClientRecord(name, conn, heartbeat)
        if not self.registry.register(record):
            log.warning("rejecting duplicate client name %r", name)
            self._reply(
                conn,
                Message(
                    protocol.REJECT,
                    b"",
                    {"reason": f"client name {name!r} already registered", "code": protocol.REJECT_DUPLICATE},
                ),
            )
            conn.close()
            return
        conn.name = name
        self._reply(
            conn, Message(protocol.WELCOME, b"", {"job-id": self.job_id, "total-rounds": str(self.total_rounds)})
        )
        record.ready = True
        self.registry.mark(name, ClientState.IDLE, conn)
        log.info("client %s registered", name)
        while True:
            try:
                msg = conn.recv_message()
            except StreamAborted as exc:
                task_id = exc.headers.get("task-id", "")
                if exc.headers.get("topic") == protocol.RESULT and task_id.isdigit():
                    self._results.put(
                        TaskResult(int(task_id), name, TaskStatus.FAILED, error=f"result stream failed: {exc.cause}")
                    )
                continue
            except (ConnectionClosed, FrameError):
                break
            if msg.topic == protocol.RESULT:
                self._results.put(self._parse_result(name, msg))
        self.registry.mark(name, ClientState.LOST, conn)
        log.info("client %s disconnected", name)

    def _reply(self, conn: SfmConnection, msg: Message) -> None:
        try:
            conn.send_message(msg, timeout=self.register_timeout)
        except (ConnectionClosed, FrameError) as exc:
            log.warning("reply %s failed: %s", msg.topic, exc)

    def _parse_result(self, name: str, msg: Message) -> TaskResult:
        h = msg.headers
        task_id = int(h["task-id"]) if h.get("task-id", "").isdigit() else -1
        if h.get("status") != TaskStatus.OK.value:
            return TaskResult(task_id, name, TaskStatus.FAILED, error=h.get("error", ""), wire_bytes=msg.wire_size)
        try:
            model = decode_model(msg.body)
        except ModelError as exc:
            return TaskResult(task_id, name, TaskStatus.FAILED, error=f"undecodable result: {exc}")
        model = apply_chain(model, self.filters, Direction.TASK_RESULT, salt=model.current_round)
        return TaskResult(task_id, name, TaskStatus.OK, model, wire_bytes=msg.wire_size)

    # -- controller API ------------------------------------------------------

    def get_clients(self) -> list[str]:
        return self.registry.active()

    def wait_for_clients(self, count: int, timeout: float) -> list[str]:
        return self.registry.wait_for(count, timeout)

    def broadcast_and_wait(
        self,
        targets: list[str],
        task_name: str,
        model: FLModel,
        min_responses: int,
        timeout: float | None,
        round: int = 0,
        wait_all: bool = False,
    ) -> BroadcastOutcome:
        """Send one task per target; return once ``min_responses`` OK results are
        in, every target has answered or been lost, or ``timeout`` elapses.

        With ``wait_all`` the quorum only decides success and the call waits for
        every target to settle. Results arriving after the return are discarded.
        """
        if not targets:
            raise ValueError("targets must be non-empty")
        model = apply_chain(model, self.filters, Direction.TASK_DATA, salt=round)
        body = encode_model_parts(model)
        tasks = {next(self._task_ids): name for name in targets}
        deadline = None if timeout is None else time.monotonic() + timeout
        sent_bytes = [0]
        send_lock = threading.Lock()

        def send(task_id: int, name: str) -> None:
            record = self.registry.get(name)
            task = Task(task_id, task_name, round, model, timeout)
            try:
                if record is None or not record.alive():
                    raise ConnectionClosed(f"client {name} is not connected")
                self.registry.mark(name, ClientState.BUSY, record.connection)
                receipt = record.connection.send_message(
                    protocol.task_message(task, self.total_rounds, self.job_id, body), timeout=timeout
                )
                with send_lock:
                    sent_bytes[0] += receipt.wire_bytes
            except (ConnectionClosed, FrameError) as exc:
                self._results.put(TaskResult(task_id, name, TaskStatus.FAILED, error=f"send failed: {exc}"))

        senders = [
            threading.Thread(target=send, args=(tid, name), name=f"fedsim-send-{name}", daemon=True)
            for tid, name in tasks.items()
        ]
        for t in senders:
            t.start()

        results: dict[int, TaskResult] = {}
        ok = 0
        while (wait_all or ok < min_responses) and len(results) < len(tasks):
            wait = 0.25 if deadline is None else min(0.25, deadline - time.monotonic())
            if wait <= 0:
                break
            try:
                res = self._results.get(timeout=wait)
            except queue.Empty:
                res = None
            if res is not None:
                if res.task_id not in tasks or res.task_id in results:
                    log.info("discarding late result of task %s from %s", res.task_id, res.client_name)
                    continue
                results[res.task_id] = res
                self.registry.mark(res.client_name, ClientState.IDLE)
                ok += res.ok
            for tid, name in tasks.items():
                rec = self.registry.get(name)
                if tid not in results and (rec is None or not rec.alive()):
                    results[tid] = TaskResult(tid, name, TaskStatus.FAILED, error="client lost")
        for t in senders:
            remaining = 5.0 if deadline is None else max(0.0, min(5.0, deadline - time.monotonic()))
            t.join(remaining)
        ordered = []
        for tid, name in tasks.items():
            ordered.append(results.get(tid) or TaskResult(tid, name, TaskStatus.TIMEOUT, error="no result in time"))
        ok = sum(r.ok for r in ordered)
        outcome = BroadcastOutcome(ordered, sent_bytes[0], sum(r.wire_bytes for r in ordered))
        if ok < min_responses:
            raise InsufficientResponses(
                f"{task_name}: {ok} OK results from {len(targets)} targets, need {min_responses}", ordered
            )
        return outcome

    # -- shutdown and accounting ---------------------------------------------

    def connections(self) -> list[SfmConnection]:
        with self._conn_lock:
            return list(self._connections)

    def transport_totals(self) -> dict[str, int]:
        total = TransportStats()
        for conn in self.connections():
            for key, value in conn.stats.snapshot().items():
                setattr(total, key, getattr(total, key) + value)
        return total.snapshot()

    def end_job(self, reason: str = "finished") -> None:
        """Tell every connected client the job is over, then close."""
        self._stopping.set()
        for rec in self.registry.records():
            if rec.state is not ClientState.LOST and not rec.connection.closed:
                try:
                    rec.connection.send_message(Message(protocol.JOB_END, b"", {"reason": reason}), timeout=5)
                except (ConnectionClosed, FrameError):
                    pass
        self.close()

    def close(self) -> None:
        self._stopping.set()
        self.listener.close()
        for conn in self.connections():
            conn.close()
        self._accept_thread.join(timeout=2)

    def kill(self) -> None:
        """Drop every connection without a goodbye, as if the process died."""
        self._stopping.set()
        self.listener.close()
        for conn in self.connections():
            conn.close(graceful=False)
