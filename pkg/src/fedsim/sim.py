"""Experiment configuration and the server, client and in-process simulation runners."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .client import ClientConfig, ClientContext, run_client_loop
from .data import (
    DataError,
    GradientDescentTrainer,
    LabeledDataset,
    PartitionSpec,
    dirichlet_partition,
    evaluate,
    iid_partition,
    label_heterogeneity,
    linear_trainer,
    make_blobs,
    make_regression,
    mlp_trainer,
    per_class_counts,
)
from .filters import FilterConfigError, FilterSpec, load_chain
from .model import FLModel
from .server import Communicator, ConfigError, EventLog, JobConfig, JobFailed, make_controller
from .sfm import DEFAULT_CHUNK_SIZE, check_chunk_size, available_drivers

log = logging.getLogger(__name__)


# -- configuration -------------------------------------------------------------


@dataclass
class DataConfig:
    kind: str = "blobs"
    n: int = 1800
    d: int = 2
    n_classes: int = 3
    spread: float = 1.0
    noise_std: float = 0.1
    seed: int = 0
    test_fraction: float = 0.25
    validation_fraction: float = 0.2
    partition: str = "dirichlet"
    alpha: float = 1.0


@dataclass
class TrainerConfig:
    kind: str = "linear"
    lr: float = 0.1
    epochs: int = 1
    batch: str | int = "full"
    hidden_layers: list[int] = field(default_factory=lambda: [32])
    seed: int = 0


@dataclass
class TransportConfig:
    driver: str = "inproc"
    address: str | None = None
    chunk_size: int = DEFAULT_CHUNK_SIZE
    heartbeat_secs: float = 5.0
    reconnect_backoff: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0])


@dataclass
class SimConfig:
    job: JobConfig
    n_clients: int
    data: DataConfig
    trainer: TrainerConfig
    transport: TransportConfig
    client_filters: list[FilterSpec]
    server_filters: list[FilterSpec]
    output_dir: Path
    local_baselines: bool = True

    def client_names(self) -> list[str]:
        return [f"site-{i + 1}" for i in range(self.n_clients)]


def _section(raw: Mapping[str, Any], key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, Mapping):
        raise ConfigError(key, "must be an object")
    return dict(value)


def _build(cls, values: dict, prefix: str):
    unknown = set(values) - set(cls.__dataclass_fields__)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"{prefix}.{name}", "unknown field")
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"{prefix}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from None


TOP_LEVEL_KEYS = {
    "name", "seed", "n_clients", "job", "data", "trainer", "transport", "filters", "output_dir", "local_baselines"
}


def parse_config(raw: Mapping[str, Any], base_dir: str | os.PathLike = ".") -> SimConfig:
    """Validate a JSON experiment config. Every error names the offending field."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config", "must be a JSON object")
    unknown = sorted(set(raw) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    n_clients = raw.get("n_clients", 3)
    if not isinstance(n_clients, int) or n_clients < 1:
        raise ConfigError("n_clients", "must be an integer >= 1")

    job_raw = _section(raw, "job")
    job_raw.setdefault("seed", seed)
    job_raw.setdefault("min_clients", n_clients)
    job_raw.setdefault("job_id", raw.get("name", "fedsim"))
    job_raw.setdefault("checkpoint_dir", "checkpoints")
    job = _build(JobConfig, job_raw, "job")
    if job.min_clients > n_clients:
        raise ConfigError("job.min_clients", f"{job.min_clients} exceeds n_clients={n_clients}")
    if job.cyclic_order:
        names = {f"site-{i + 1}" for i in range(n_clients)}
        missing = [n for n in job.cyclic_order if n not in names]
        if missing:
            raise ConfigError("job.cyclic_order", f"unknown clients {missing}")

    data_raw = _section(raw, "data")
    data_raw.setdefault("seed", seed)
    data = _build(DataConfig, data_raw, "data")
    if data.kind not in ("blobs", "regression"):
        raise ConfigError("data.kind", "must be 'blobs' or 'regression'")
    if data.partition not in ("dirichlet", "iid"):
        raise ConfigError("data.partition", "must be 'dirichlet' or 'iid'")
    if not (isinstance(data.alpha, (int, float)) and data.alpha > 0 and np.isfinite(data.alpha)):
        raise ConfigError("data.alpha", "must be a finite number > 0")
    for name in ("test_fraction", "validation_fraction"):
        if not 0 <= getattr(data, name) < 1:
            raise ConfigError(f"data.{name}", "must lie in [0, 1)")
    if data.n < 2 * n_clients:
        raise ConfigError("data.n", f"too few samples for {n_clients} clients")
    if data.kind == "blobs" and data.n_classes < 2:
        raise ConfigError("data.n_classes", "must be >= 2")

    trainer_raw = _section(raw, "trainer")
    trainer_raw.setdefault("seed", seed)
    trainer = _build(TrainerConfig, trainer_raw, "trainer")
    if trainer.kind not in ("linear", "mlp"):
        raise ConfigError("trainer.kind", "must be 'linear' or 'mlp'")
    if trainer.kind == "mlp" and data.kind != "blobs":
        raise ConfigError("trainer.kind", "the MLP trainer needs a classification dataset")
    if not trainer.lr > 0:
        raise ConfigError("trainer.lr", "must be > 0")
    if not isinstance(trainer.epochs, int) or trainer.epochs < 0:
        raise ConfigError("trainer.epochs", "must be an integer >= 0")
    if not trainer.hidden_layers or min(trainer.hidden_layers) < 1:
        raise ConfigError("trainer.hidden_layers", "sizes must be >= 1")

    transport = _build(TransportConfig, _section(raw, "transport"), "transport")
    if transport.driver not in available_drivers():
        raise ConfigError("transport.driver", f"must be one of {available_drivers()}")
    try:
        check_chunk_size(transport.chunk_size)
    except Exception as exc:
        raise ConfigError("transport.chunk_size", str(exc)) from None
    if not transport.heartbeat_secs > 0:
        raise ConfigError("transport.heartbeat_secs", "must be > 0")

    filters_raw = _section(raw, "filters")
    chains = {}
    for side in ("client", "server"):
        try:
            chains[side] = load_chain(filters_raw.get(side))
        except (FilterConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"filters.{side}", str(exc)) from None

    output_dir = Path(base_dir) / raw.get("output_dir", "fedsim-run")
    if not Path(job.checkpoint_dir).is_absolute():
        job.checkpoint_dir = output_dir / job.checkpoint_dir
    return SimConfig(
        job=job,
        n_clients=n_clients,
        data=data,
        trainer=trainer,
        transport=transport,
        client_filters=chains["client"],
        server_filters=chains["server"],
        output_dir=output_dir,
        local_baselines=bool(raw.get("local_baselines", True)),
    )


def apply_overrides(raw: Mapping[str, Any], **overrides) -> dict:
    """Fold command-line overrides into a raw config dict. ``None`` means unset."""
    out = copy.deepcopy(dict(raw))
    placement = {
        "rounds": ("job", "num_rounds"),
        "workflow": ("job", "workflow"),
        "alpha": ("data", "alpha"),
        "driver": ("transport", "driver"),
        "address": ("transport", "address"),
        "chunk_size": ("transport", "chunk_size"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key in placement:
            section, name = placement[key]
            out.setdefault(section, {})[name] = value
        elif key == "clients":
            out["n_clients"] = value
            job = out.setdefault("job", {})
            for limit in ("min_clients", "min_responses"):
                if isinstance(job.get(limit), int) and job[limit] > value:
                    job[limit] = value
        elif key == "seed":
            out["seed"] = value
            for section in ("job", "data", "trainer"):
                out.get(section, {}).pop("seed", None)
        elif key == "output_dir":
            out["output_dir"] = str(value)
        else:
            raise KeyError(key)
    return out


def load_config(path: str | os.PathLike, **overrides) -> SimConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    return parse_config(apply_overrides(raw, **overrides))


# -- experiment construction ------------------------------------------------------


@dataclass
class Site:
    name: str
    train: LabeledDataset
    validation: LabeledDataset


@dataclass
class Experiment:
    test: LabeledDataset
    partition: PartitionSpec
    sites: list[Site]
    initial: FLModel
    heterogeneity: float | None


def _dataset(cfg: DataConfig) -> LabeledDataset:
    if cfg.kind == "blobs":
        return make_blobs(cfg.n, cfg.d, cfg.n_classes, cfg.spread, cfg.seed)
    ds, _ = make_regression(cfg.n, cfg.d, cfg.noise_std, cfg.seed)
    return ds


def make_trainer(cfg: TrainerConfig, train: LabeledDataset, validation=None, epochs=None) -> GradientDescentTrainer:
    epochs = cfg.epochs if epochs is None else epochs
    if cfg.kind == "mlp":
        return mlp_trainer(train, cfg.hidden_layers, cfg.lr, epochs, cfg.seed, validation)
    return linear_trainer(train, cfg.lr, epochs, cfg.batch, cfg.seed, validation)


def build_experiment(cfg: SimConfig) -> Experiment:
    """Deterministic data layout shared by the server and every client process."""
    d = cfg.data
    train, test = _dataset(d).split(d.test_fraction, d.seed + 1)
    if d.kind == "blobs" and d.partition == "dirichlet":
        partition = dirichlet_partition(train.labels, cfg.n_clients, d.alpha, d.seed)
        heterogeneity = label_heterogeneity(train.labels, partition)
    else:
        # regression targets have no classes to skew, so shards are iid
        partition = iid_partition(train.n, cfg.n_clients, d.seed)
        heterogeneity = label_heterogeneity(train.labels, partition) if train.is_classification else None
    sites = []
    for i, (name, idx) in enumerate(zip(cfg.client_names(), partition.assignments)):
        shard = train.subset(idx)
        if d.validation_fraction > 0 and shard.n >= 2:
            local_train, local_val = shard.split(d.validation_fraction, d.seed + 100 + i)
            if local_train.n == 0:
                local_train, local_val = shard, shard
        else:
            local_train, local_val = shard, shard
        sites.append(Site(name, local_train, local_val))
    params = make_trainer(cfg.trainer, sites[0].train).initial_params()
    initial = FLModel(params=params)
    return Experiment(test, partition, sites, initial, heterogeneity)


def site_trainer(cfg: SimConfig, site: Site) -> GradientDescentTrainer:
    return make_trainer(cfg.trainer, site.train, site.validation)


def local_only_baselines(cfg: SimConfig, experiment: Experiment) -> dict[str, dict[str, float]]:
    """Each site trains alone for the same number of local steps the federation used."""
    steps = cfg.job.num_rounds * cfg.trainer.epochs
    out = {}
    for site in experiment.sites:
        trainer = make_trainer(cfg.trainer, site.train, site.validation, epochs=steps)
        params, _, _ = trainer.train(experiment.initial.params, 0)
        out[site.name] = evaluate(params, experiment.test)
    return out


# -- server ------------------------------------------------------------------


def default_address(cfg: SimConfig) -> str:
    if cfg.transport.address:
        return cfg.transport.address
    if cfg.transport.driver == "tcp":
        return "127.0.0.1:0"
    return f"fedsim-{cfg.job.job_id}-{uuid.uuid4().hex[:8]}"


def open_communicator(cfg: SimConfig, address: str | None = None) -> Communicator:
    return Communicator(
        cfg.transport.driver,
        address or default_address(cfg),
        job_id=cfg.job.job_id,
        total_rounds=cfg.job.num_rounds,
        chunk_size=cfg.transport.chunk_size,
        spill_dir=None,
        filters=cfg.server_filters,
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def run_server_job(cfg: SimConfig, communicator: Communicator, experiment: Experiment | None = None) -> dict:
    """Drive the job to completion, end it, and write ``report.json`` and ``events.jsonl``.

    Returns the report. ``report["status"]`` is ``completed``, ``failed`` or
    ``interrupted``.
    """
    experiment = experiment or build_experiment(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    events = EventLog(out / "events.jsonl")
    controller = make_controller(
        communicator,
        cfg.job,
        experiment.initial,
        events=events,
        evaluator=lambda m: evaluate(m.params, experiment.test),
    )
    started = time.monotonic()
    status, error = "completed", None
    try:
        controller.run()
    except JobFailed as exc:
        status, error = "failed", str(exc)
    except KeyboardInterrupt:
        status, error = "interrupted", "interrupted by operator"
        events.emit("job_interrupted")
    finally:
        communicator.end_job("interrupted" if status == "interrupted" else status)
    baselines = local_only_baselines(cfg, experiment) if cfg.local_baselines and status == "completed" else {}
    report = build_report(cfg, controller, communicator, experiment, status, error, baselines)
    report["timing"] = {
        "total_seconds": time.monotonic() - started,
        "round_seconds": [r.seconds for r in controller.rounds],
    }
    report["environment"] = {"driver": cfg.transport.driver, "address": communicator.address}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def build_report(cfg, controller, communicator, experiment, status, error, baselines) -> dict:
    rounds = []
    for rec in controller.rounds:
        entry = asdict(rec)
        entry.pop("seconds")
        rounds.append(entry)
    totals = communicator.transport_totals()
    sent = sum(r["bytes_sent"] for r in rounds)
    received = sum(r["bytes_received"] for r in rounds)
    checkpoint_dir = Path(cfg.job.checkpoint_dir)
    final = controller.checkpoints[-1] if controller.checkpoints else None
    best = controller.best_round
    run = {
        "workflow": cfg.job.workflow.value,
        "num_rounds": cfg.job.num_rounds,
        "rounds_completed": len(rounds),
        "clients": cfg.client_names(),
        "site_sizes": {s.name: s.train.n for s in experiment.sites},
        "label_heterogeneity": experiment.heterogeneity,
        "rounds": rounds,
        "best_round": best,
        "best_metric": controller.selection_history[best] if best is not None else None,
        "selection_metric": cfg.job.selection_metric,
        "checkpoints": list(controller.checkpoints),
        "final_checkpoint": final,
        "final_checkpoint_sha256": _sha256(checkpoint_dir / final) if final else None,
        "final_global_metrics": rounds[-1]["global_metrics"] if rounds else {},
        "local_only": baselines,
        "bytes": {
            "rounds_sent": sent,
            "rounds_received": received,
            "outside_rounds_sent": totals["message_bytes_sent"] - sent,
            "outside_rounds_received": totals["message_bytes_received"] - received,
            "transport_message_bytes_sent": totals["message_bytes_sent"],
            "transport_message_bytes_received": totals["message_bytes_received"],
        },
    }
    return {"status": status, "error": error, "run": run}


# -- clients -------------------------------------------------------------------


def client_config(cfg: SimConfig, site_index: int, address: str, name: str | None = None) -> ClientConfig:
    return ClientConfig(
        name=name or cfg.client_names()[site_index],
        server_address=address,
        driver=cfg.transport.driver,
        heartbeat_secs=cfg.transport.heartbeat_secs,
        filters=list(cfg.client_filters),
        chunk_size=cfg.transport.chunk_size,
        reconnect_backoff=tuple(cfg.transport.reconnect_backoff),
    )


def run_client(cfg: SimConfig, site_index: int, address: str, experiment: Experiment | None = None) -> ClientContext:
    """Register site ``site_index`` and serve tasks until the job ends. Returns the stopped context."""
    if not 0 <= site_index < cfg.n_clients:
        raise ConfigError("site_index", f"must lie in [0, {cfg.n_clients})")
    experiment = experiment or build_experiment(cfg)
    site = experiment.sites[site_index]
    ctx = ClientContext(client_config(cfg, site_index, address)).start()
    try:
        run_client_loop(ctx, site_trainer(cfg, site))
    finally:
        ctx.close()
    return ctx


# -- in-process simulation ---------------------------------------------------------


def simulate(cfg: SimConfig) -> dict:
    """Run the server and every client as concurrent actors inside this process."""
    experiment = build_experiment(cfg)
    communicator = open_communicator(cfg)
    address = communicator.address
    failures: dict[str, BaseException] = {}

    def client_main(i: int) -> None:
        try:
            run_client(cfg, i, address, experiment)
        except BaseException as exc:  # surfaced in the report, never swallowed silently
            failures[cfg.client_names()[i]] = exc
            log.error("client %s failed: %s", cfg.client_names()[i], exc)

    threads = [
        threading.Thread(target=client_main, args=(i,), name=f"fedsim-{name}", daemon=True)
        for i, name in enumerate(cfg.client_names())
    ]
    for t in threads:
        t.start()
    report = run_server_job(cfg, communicator, experiment)
    for t in threads:
        t.join(timeout=10)
    if failures:
        report["client_errors"] = {k: f"{type(v).__name__}: {v}" for k, v in sorted(failures.items())}
        (cfg.output_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def partition_summary(labels, n_clients: int, alpha: float, seed: int) -> dict:
    labels = np.asarray(labels)
    spec = dirichlet_partition(labels, n_clients, alpha, seed)
    return {
        "alpha": spec.alpha,
        "seed": spec.seed,
        "n_clients": spec.n_clients,
        "assignments": [a.tolist() for a in spec.assignments],
        "per_class_counts": per_class_counts(labels, spec),
        "repairs": spec.repairs,
        "label_heterogeneity": label_heterogeneity(labels, spec),
    }


__all__ = [
    "ConfigError",
    "DataConfig",
    "DataError",
    "Experiment",
    "SimConfig",
    "TrainerConfig",
    "TransportConfig",
    "apply_overrides",
    "build_experiment",
    "client_config",
    "load_config",
    "local_only_baselines",
    "open_communicator",
    "parse_config",
    "partition_summary",
    "run_client",
    "run_server_job",
    "simulate",
]
