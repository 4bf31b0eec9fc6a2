"""Workflow controllers: FedAvg and cyclic weight transfer.

A controller owns the global model and drives rounds through a
:class:`~fedsim.server.communicator.Communicator`. Its run loop is a single
thread; all concurrency lives in the communicator.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .. import protocol
from ..model import DType, FLModel, model_linear_update
from ..protocol import TaskResult
from .checkpoint import EventLog, checkpoint_name, save_model, write_marker
from .communicator import Communicator, InsufficientResponses, NotEnoughClients

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class WorkflowError(Exception):
    pass


class EmptyResults(WorkflowError):
    pass


class AggregationShapeMismatch(WorkflowError):
    pass


class ZeroTotalWeight(WorkflowError):
    pass


class MetricMissing(WorkflowError):
    pass


class ClientLost(WorkflowError):
    pass


class TaskFailed(WorkflowError):
    pass


class JobFailed(WorkflowError):
    pass


class Workflow(str, enum.Enum):
    FEDAVG = "fedavg"
    CYCLIC = "cyclic"


@dataclass
class JobConfig:
    min_clients: int = 1
    num_rounds: int = 1
    workflow: Workflow = Workflow.FEDAVG
    task_timeout: float = 60.0
    checkpoint_dir: str | Path = "checkpoints"
    selection_metric: str | None = None
    selection_mode: str = "max"
    weighting: str = "samples"
    seed: int = 0
    cyclic_order: list[str] | None = None
    client_wait_timeout: float = 30.0
    job_id: str = "job"
    min_responses: int | None = None  # OK results needed per round; defaults to min_clients

    def __post_init__(self):
        if not isinstance(self.min_clients, int) or self.min_clients < 1:
            raise ConfigError("min_clients", "must be an integer >= 1")
        if not isinstance(self.num_rounds, int) or self.num_rounds < 1:
            raise ConfigError("num_rounds", "must be an integer >= 1")
        try:
            self.workflow = Workflow(self.workflow)
        except ValueError:
            raise ConfigError("workflow", f"unknown workflow {self.workflow!r}") from None
        if self.min_responses is None:
            self.min_responses = self.min_clients
        elif not isinstance(self.min_responses, int) or not 1 <= self.min_responses <= self.min_clients:
            raise ConfigError("min_responses", "must be an integer in [1, min_clients]")
        if not self.task_timeout > 0:
            raise ConfigError("task_timeout", "must be > 0")
        if self.weighting not in ("samples", "uniform"):
            raise ConfigError("weighting", "must be 'samples' or 'uniform'")
        if self.selection_mode not in ("max", "min"):
            raise ConfigError("selection_mode", "must be 'max' or 'min'")


def sample_clients(names: Sequence[str], count: int, seed) -> list[str]:
    """Uniform sample without replacement, returned in name order."""
    names = sorted(names)
    if len(names) < count:
        raise NotEnoughClients(f"{len(names)} clients available, need {count}")
    if len(names) == count:
        return names
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(names), size=count, replace=False)
    return sorted(names[i] for i in picked)


def aggregate_weighted(results: Sequence[TaskResult], weighting: str = "samples") -> dict[str, np.ndarray]:
    """Weighted elementwise mean of OK result parameters, accumulated in float64.

    Results are ordered by client name first, so the output does not depend on
    arrival order. The mean is formed as ``ref + sum(w_i * (x_i - ref))`` with
    ``ref`` the first positively weighted update, which makes identical inputs
    reproduce exactly and zero-weight entries contribute exact zeros.
    """
    ok = sorted((r for r in results if r.ok), key=lambda r: (r.client_name, r.task_id))
    if not ok:
        raise EmptyResults("no OK results to aggregate")
    first = ok[0].payload.params
    layout = {k: (v.shape, DType.of(v)) for k, v in first.items()}
    for r in ok[1:]:
        other = {k: (v.shape, DType.of(v)) for k, v in r.payload.params.items()}
        if other != layout:
            raise AggregationShapeMismatch(f"{r.client_name} params differ from {ok[0].client_name}")
    weights = [1.0 if weighting == "uniform" else float(r.payload.num_samples) for r in ok]
    total = math.fsum(weights)
    if total <= 0:
        raise ZeroTotalWeight("sum of num_samples is zero")
    ref_index = next(i for i, w in enumerate(weights) if w > 0)
    ref = ok[ref_index].payload.params
    out = {}
    for name, (shape, dtype) in layout.items():
        base = np.asarray(ref[name], dtype=np.float64)
        acc = np.zeros(shape, dtype=np.float64)
        for r, w in zip(ok, weights):
            if w == 0:
                continue
            acc += (w / total) * (np.asarray(r.payload.params[name], dtype=np.float64) - base)
        out[name] = (base + acc).astype(dtype.numpy)
    return out


def round_metric(results: Sequence[TaskResult], metric: str) -> float:
    """Sample-weighted mean of ``metric`` over OK results reporting it."""
    pairs = [
        (r.payload.metrics[metric], r.payload.num_samples)
        for r in results
        if r.ok and metric in r.payload.metrics
    ]
    if not pairs:
        raise MetricMissing(f"no client reported {metric!r}")
    total = sum(n for _, n in pairs)
    if total == 0:
        return math.fsum(v for v, _ in pairs) / len(pairs)
    # n / total depends only on the weight ratios, so scaling every weight
    # leaves the result (and ties between rounds) bit-identical
    return math.fsum(v * (n / total) for v, n in pairs)


def select_best(history: Sequence[float | None], mode: str = "max") -> int | None:
    """Index of the best value; ties go to the earliest; None entries are skipped."""
    best = None
    for i, value in enumerate(history):
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        if best is None:
            best = i
        elif (mode == "max" and value > history[best]) or (mode == "min" and value < history[best]):
            best = i
    return best


@dataclass
class RoundRecord:
    round: int
    clients: list[str]
    statuses: dict[str, str]
    client_metrics: dict[str, dict[str, float]]
    validation: dict[str, dict[str, float]] = field(default_factory=dict)
    selection_value: float | None = None
    global_metrics: dict[str, float] = field(default_factory=dict)
    checkpoint: str = ""
    bytes_sent: int = 0
    bytes_received: int = 0
    seconds: float = 0.0
    visit_order: list[str] = field(default_factory=list)


class Controller:
    """Shared machinery: client sampling, task brokering, checkpointing, selection."""

    def __init__(
        self,
        communicator: Communicator,
        config: JobConfig,
        initial: FLModel,
        events: EventLog | None = None,
        evaluator: Callable[[FLModel], Mapping[str, float]] | None = None,
    ):
        self.communicator = communicator
        self.config = config
        self.model = initial.replace(current_round=0, total_rounds=config.num_rounds)
        self.events = events or EventLog(None)
        self.evaluator = evaluator
        self.rounds: list[RoundRecord] = []
        self.selection_history: list[float | None] = []
        self.best_round: int | None = None
        self.checkpoints: list[str] = []
        self._round_bytes = (0, 0)

    def info(self, message: str, *args) -> None:
        log.info(message, *args)

    def sample_clients(self, count: int, round: int) -> list[str]:
        names = self.communicator.wait_for_clients(count, self.config.client_wait_timeout)
        return sample_clients(names, count, [self.config.seed, round])

    def scatter_and_gather(
        self, targets, task_name: str, model: FLModel, min_responses: int, round: int, wait_all: bool = False
    ):
        return self.communicator.broadcast_and_wait(
            targets, task_name, model, min_responses, self.config.task_timeout, round, wait_all
        )

    def save_model(self, round: int) -> Path:
        path = save_model(self.model, self.config.checkpoint_dir, round)
        self.checkpoints.append(path.name)
        self.events.emit("checkpoint", round=round, path=path.name, current_round=self.model.current_round)
        return path

    def validate(self, record: RoundRecord, clients: list[str]) -> None:
        metric = self.config.selection_metric
        if not metric:
            return
        try:
            outcome = self.scatter_and_gather(clients, protocol.VALIDATE, self.model, 1, record.round, wait_all=True)
        except InsufficientResponses as exc:
            log.warning("round %d: validation failed: %s", record.round, exc)
            self.selection_history.append(None)
            return
        record.validation = {r.client_name: dict(r.payload.metrics) for r in outcome.results if r.ok}
        try:
            value = round_metric(outcome.results, metric)
        except MetricMissing as exc:
            log.warning("round %d skipped for model selection: %s", record.round, exc)
            self.selection_history.append(None)
            return
        record.selection_value = value
        self.selection_history.append(value)
        best = select_best(self.selection_history, self.config.selection_mode)
        if best is not None and best != self.best_round:
            self.best_round = best
            write_marker(self.config.checkpoint_dir, "best", checkpoint_name(best))
        self.events.emit("validation", round=record.round, metric=metric, value=value, best_round=self.best_round)

    def begin_round(self, r: int) -> float:
        self._round_bytes = self._message_bytes()
        self.events.emit("round_start", round=r)
        return time.monotonic()

    def _message_bytes(self) -> tuple[int, int]:
        totals = self.communicator.transport_totals()
        return totals["message_bytes_sent"], totals["message_bytes_received"]

    def finish_round(self, record: RoundRecord, started: float) -> None:
        # round traffic is read off the transport counters, so the per-round
        # figures plus registration and job-end traffic sum to the totals
        sent, received = self._message_bytes()
        record.bytes_sent = sent - self._round_bytes[0]
        record.bytes_received = received - self._round_bytes[1]
        if self.evaluator is not None:
            record.global_metrics = dict(self.evaluator(self.model))
        record.seconds = time.monotonic() - started
        self.rounds.append(record)
        self.events.emit(
            "round_end",
            round=record.round,
            seconds=record.seconds,
            clients=record.clients,
            statuses=record.statuses,
            global_metrics=record.global_metrics,
            bytes_sent=record.bytes_sent,
            bytes_received=record.bytes_received,
        )

    def run(self) -> FLModel:
        self.events.emit(
            "job_start",
            workflow=self.config.workflow.value,
            num_rounds=self.config.num_rounds,
            min_clients=self.config.min_clients,
        )
        try:
            # registration traffic settles before round 0 starts counting bytes
            self.communicator.wait_for_clients(self.config.min_clients, self.config.client_wait_timeout)
            self._run()
        except Exception as exc:
            self.events.emit("job_failed", error=f"{type(exc).__name__}: {exc}")
            raise JobFailed(f"{type(exc).__name__}: {exc}") from exc
        self.events.emit("job_end", best_round=self.best_round, rounds=len(self.rounds))
        return self.model

    def _run(self) -> None:
        raise NotImplementedError


class FedAvg(Controller):
    def _run(self) -> None:
        self.info("Start FedAvg.")
        for r in range(self.config.num_rounds):
            started = self.begin_round(r)
            # 1. sample the available clients
            clients = self.sample_clients(self.config.min_clients, r)
            # 2. send the current global model and collect updates
            task_model = self.model.replace(current_round=r)
            outcome = self.scatter_and_gather(clients, protocol.TRAIN, task_model, self.config.min_responses, r)
            record = _record_from(r, clients, outcome)
            failed = [n for n, s in record.statuses.items() if s != "OK"]
            if failed:
                log.warning("round %d: aggregating without %s", r, failed)
            # 3. aggregate
            aggregate = aggregate_weighted(outcome.results, self.config.weighting)
            # 4. update the global model
            self.model = model_linear_update(self.model, aggregate)
            # 5. save it
            record.checkpoint = self.save_model(r).name
            self.validate(record, clients)
            self.finish_round(record, started)
        self.info("Finished FedAvg.")


class Cyclic(Controller):
    def visit_order(self) -> list[str]:
        if self.config.cyclic_order:
            self.communicator.wait_for_clients(len(self.config.cyclic_order), self.config.client_wait_timeout)
            return list(self.config.cyclic_order)
        return self.communicator.wait_for_clients(self.config.min_clients, self.config.client_wait_timeout)

    def _run(self) -> None:
        self.info("Start cyclic weight transfer.")
        for r in range(self.config.num_rounds):
            started = self.begin_round(r)
            order = self.visit_order()
            current = self.model.replace(current_round=r)
            record = RoundRecord(r, list(order), {}, {}, visit_order=list(order))
            for name in order:
                try:
                    outcome = self.scatter_and_gather([name], protocol.TRAIN, current, 1, r)
                except InsufficientResponses as exc:
                    res = exc.results[0] if exc.results else None
                    rec = self.communicator.registry.get(name)
                    if rec is None or not rec.alive():
                        raise ClientLost(f"round {r}: client {name} lost mid-cycle") from exc
                    raise TaskFailed(f"round {r}: client {name}: {res.error if res else exc}") from exc
                res = outcome.results[0]
                record.statuses[name] = res.status.value
                record.client_metrics[name] = dict(res.payload.metrics)
                params = dict(current.params)
                params.update(res.payload.params)
                current = current.replace(params=params)
                self.events.emit("visit", round=r, client=name)
            self.model = model_linear_update(self.model, {k: current.params[k] for k in self.model.params})
            record.checkpoint = self.save_model(r).name
            self.validate(record, list(order))
            self.finish_round(record, started)
        self.info("Finished cyclic weight transfer.")


def _record_from(r: int, clients: list[str], outcome) -> RoundRecord:
    record = RoundRecord(r, list(clients), {}, {})
    for res in outcome.results:
        record.statuses[res.client_name] = res.status.value
        if res.ok:
            record.client_metrics[res.client_name] = dict(res.payload.metrics)
    return record


def make_controller(communicator: Communicator, config: JobConfig, initial: FLModel, **kwargs) -> Controller:
    cls = FedAvg if config.workflow is Workflow.FEDAVG else Cyclic
    return cls(communicator, config, initial, **kwargs)


def run_fedavg(communicator: Communicator, config: JobConfig, initial: FLModel, **kwargs) -> FLModel:
    return FedAvg(communicator, config, initial, **kwargs).run()


def run_cyclic(communicator: Communicator, config: JobConfig, initial: FLModel, **kwargs) -> FLModel:
    return Cyclic(communicator, config, initial, **kwargs).run()
