"""Client runtime: the init / receive / send API and the executor loop.

Typical use mirrors centralized training code with a few added calls::

    ctx = init(config)
    while ctx.is_running():
        received = ctx.receive()
        if received is None:
            break
        model, task_name = received
        new_params = local_train(model.params)
        ctx.send(FLModel(params=new_params, num_samples=n))

The same calls exist as module-level functions operating on the context
created by the last :func:`init`.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from . import protocol
from .data import Trainer
from .filters import Direction, FilterSpec, apply_chain, load_chain
from .model import FLModel, ModelError, decode_model
from .sfm import (
    DEFAULT_CHUNK_SIZE,
    ConnectionClosed,
    ConnectionRefused,
    FrameError,
    Message,
    SfmConnection,
    StreamAborted,
    connect,
)

log = logging.getLogger(__name__)


class ClientError(Exception):
    pass


class ClientStateError(ClientError):
    """An API call made out of order."""


class NotInitialized(ClientStateError):
    pass


class NoPendingTask(ClientStateError):
    pass


class TaskPending(ClientStateError):
    pass


class DuplicateName(ClientError):
    pass


class DecodeError(ClientError):
    pass


class JobState(str, enum.Enum):
    RUNNING = "RUNNING"
    STOPPED = "STOPPED"


@dataclass
class ClientConfig:
    name: str
    server_address: str
    driver: str = "inproc"
    heartbeat_secs: float = 5.0
    filters: list[FilterSpec] = field(default_factory=list)
    chunk_size: int = DEFAULT_CHUNK_SIZE
    reconnect_backoff: Sequence[float] = (1.0, 2.0, 4.0)
    connect_timeout: float = 10.0
    spill_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> ClientConfig:
        known = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        known["filters"] = load_chain(raw.get("filters"))
        for key in ("name", "server_address"):
            if not known.get(key):
                raise ValueError(f"client config needs {key!r}")
        return cls(**known)


@dataclass
class PendingTask:
    task_id: int
    task_name: str
    round: int


class ClientContext:
    def __init__(self, config: ClientConfig):
        self.config = config
        self.client_name = config.name
        self.state: JobState | None = None
        self.job_id = ""
        self.total_rounds = 0
        self.round = 0
        self.task_name = ""
        self.pending: PendingTask | None = None
        self.stop_reason = ""
        self.connection: SfmConnection | None = None
        self._lock = threading.RLock()

    # -- connection management ----------------------------------------------

    def _register(self) -> SfmConnection:
        cfg = self.config
        conn = connect(cfg.driver, cfg.server_address, chunk_size=cfg.chunk_size, spill_dir=cfg.spill_dir, name=cfg.name)
        try:
            conn.send_message(
                Message(
                    protocol.REGISTER,
                    b"",
                    {"client-name": cfg.name, "heartbeat-secs": str(cfg.heartbeat_secs)},
                ),
                timeout=cfg.connect_timeout,
            )
            reply = conn.recv_message(timeout=cfg.connect_timeout)
        except (FrameError, ConnectionClosed) as exc:
            conn.close()
            raise ConnectionRefused(f"registration failed: {exc}") from exc
        if reply.topic == protocol.REJECT:
            conn.close()
            if reply.headers.get("code") == protocol.REJECT_DUPLICATE:
                raise DuplicateName(reply.headers.get("reason", cfg.name))
            raise ConnectionRefused(reply.headers.get("reason", "registration rejected"))
        self.job_id = reply.headers.get("job-id", "")
        self.total_rounds = int(reply.headers.get("total-rounds", "0") or 0)
        conn.start_heartbeat(cfg.heartbeat_secs)
        return conn

    def start(self) -> ClientContext:
        """Connect and register, retrying refused connections per the backoff schedule."""
        delays = [0.0, *self.config.reconnect_backoff]
        last: Exception | None = None
        for delay in delays:
            time.sleep(delay)
            try:
                self.connection = self._register()
                self.state = JobState.RUNNING
                return self
            except ConnectionRefused as exc:
                last = exc
                log.info("%s: connect failed (%s)", self.client_name, exc)
        raise ConnectionRefused(f"{self.client_name}: server unreachable: {last}") from last

    def _reconnect(self) -> bool:
        for delay in self.config.reconnect_backoff:
            time.sleep(delay)
            try:
                self.connection = self._register()
                log.info("%s: reconnected", self.client_name)
                return True
            except (ConnectionRefused, DuplicateName) as exc:
                log.info("%s: reconnect failed (%s)", self.client_name, exc)
        return False

    def _stop(self, reason: str = "closed") -> None:
        if self.state is not JobState.STOPPED:
            self.stop_reason = reason
        self.state = JobState.STOPPED
        self.pending = None
        if self.connection is not None:
            self.connection.close()

    # -- API -------------------------------------------------------------------

    def _require_started(self) -> None:
        if self.state is None:
            raise NotInitialized("call init() first")

    def is_running(self) -> bool:
        self._require_started()
        return self.state is JobState.RUNNING

    def receive(self, timeout: float | None = None) -> tuple[FLModel, str] | None:
        """Block for the next task. Returns ``None`` once the job has ended."""
        self._require_started()
        with self._lock:
            if self.pending is not None:
                raise TaskPending(f"task {self.pending.task_id} has not been answered")
            while self.state is JobState.RUNNING:
                try:
                    msg = self.connection.recv_message(timeout)
                except StreamAborted as exc:
                    if exc.headers.get("topic") == protocol.TASK:
                        self._fail_task(exc.headers, f"task data stream failed: {exc.cause}")
                        raise DecodeError(str(exc)) from exc
                    continue
                except ConnectionClosed:
                    if not self._reconnect():
                        self._stop("connection-lost")
                    continue
                if msg.topic == protocol.JOB_END:
                    self._stop("job-end")
                    break
                if msg.topic != protocol.TASK:
                    continue
                h = msg.headers
                try:
                    model = decode_model(msg.body)
                except ModelError as exc:
                    self._fail_task(h, f"undecodable task data: {exc}")
                    raise DecodeError(str(exc)) from exc
                self.round = int(h.get("round", "0"))
                self.total_rounds = int(h.get("total-rounds", self.total_rounds))
                self.job_id = h.get("job-id", self.job_id)
                self.task_name = h.get("task-name", protocol.TRAIN)
                self.pending = PendingTask(int(h["task-id"]), self.task_name, self.round)
                model = apply_chain(model, self.config.filters, Direction.TASK_DATA, salt=self.round)
                return model, self.task_name
            return None

    def _fail_task(self, headers: Mapping[str, str], error: str) -> None:
        task_id = headers.get("task-id", "")
        if not task_id.isdigit():
            return
        try:
            self.connection.send_message(
                protocol.result_message(int(task_id), self.client_name, None, error),
                timeout=self.config.connect_timeout,
            )
        except (ConnectionClosed, FrameError) as exc:
            log.warning("%s: could not report failed task %s: %s", self.client_name, task_id, exc)

    def send(self, model: FLModel) -> None:
        """Answer the pending task with ``model`` after the outbound filter chain."""
        self._require_started()
        with self._lock:
            task = self.pending
            if task is None:
                raise NoPendingTask("send() needs a task from receive()")
            self.pending = None
            out = apply_chain(model, self.config.filters, Direction.TASK_RESULT, salt=task.round)
            out = out.replace(current_round=task.round, total_rounds=self.total_rounds)
            self.connection.send_message(
                protocol.result_message(task.task_id, self.client_name, out),
                timeout=self.config.connect_timeout + 60,
            )

    def send_failure(self, error: str) -> None:
        self._require_started()
        with self._lock:
            task = self.pending
            if task is None:
                raise NoPendingTask("no task to fail")
            self.pending = None
            self._fail_task({"task-id": str(task.task_id)}, error)

    def system_info(self) -> dict[str, str]:
        self._require_started()
        return {
            "job_id": self.job_id,
            "client_name": self.client_name,
            "round": str(self.round),
            "total_rounds": str(self.total_rounds),
            "task_name": self.task_name,
        }

    def close(self) -> None:
        if self.state is not None:
            self._stop()


def run_client_loop(ctx: ClientContext, trainer: Trainer) -> None:
    """Receive tasks, run the trainer, send results, until the job ends."""
    while ctx.is_running():
        try:
            received = ctx.receive()
        except DecodeError as exc:
            log.warning("%s: %s", ctx.client_name, exc)
            continue
        if received is None:
            break
        model, task_name = received
        try:
            if task_name == protocol.VALIDATE:
                metrics = trainer.validate(model.params)
                out = FLModel(metrics=metrics, num_samples=getattr(trainer, "validation_size", 0))
            else:
                params, n, metrics = trainer.train(model.params, ctx.round)
                out = FLModel(params=params, metrics=metrics, num_samples=n)
            # drop the received buffers before streaming the reply
            del model, received
        except Exception as exc:
            log.warning("%s: %s task failed: %s", ctx.client_name, task_name, exc)
            try:
                ctx.send_failure(f"{type(exc).__name__}: {exc}")
            except ConnectionClosed:
                pass
            continue
        try:
            ctx.send(out)
        except (ConnectionClosed, FrameError) as exc:
            log.warning("%s: sending result failed: %s", ctx.client_name, exc)


# -- module-level API ----------------------------------------------------------

_context: ClientContext | None = None


def init(config: ClientConfig | Mapping[str, Any]) -> ClientContext:
    global _context
    if not isinstance(config, ClientConfig):
        config = ClientConfig.from_dict(config)
    _context = ClientContext(config).start()
    return _context


def _current() -> ClientContext:
    if _context is None:
        raise NotInitialized("call init() first")
    return _context


def is_running() -> bool:
    return _current().is_running()


def receive(timeout: float | None = None) -> tuple[FLModel, str] | None:
    return _current().receive(timeout)


def send(model: FLModel) -> None:
    _current().send(model)


def system_info() -> dict[str, str]:
    return _current().system_info()


def shutdown() -> None:
    global _context
    if _context is not None:
        _context.close()
        _context = None
