from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import run_with_watchdog
from harness import Federation, FnTrainer, add
from fedsim import protocol
from fedsim.model import FLModel
from fedsim.server import (
    Cyclic,
    EventLog,
    FedAvg,
    InsufficientResponses,
    JobFailed,
    load_model,
    read_marker,
    run_cyclic,
    run_fedavg,
)

X0 = FLModel(params={"x": np.array(1.0)})


def scalar(model: FLModel) -> float:
    return float(model.params["x"])


def test_identity_trainer_is_a_fixed_point(tmp_path):
    with Federation({"site-1": FnTrainer(lambda p: p)}) as fed:
        final = run_fedavg(fed.comm, fed.job(tmp_path, num_rounds=4), X0)
    assert scalar(final) == 1.0 and final.current_round == 4


def test_mean_drift_of_two_clients(tmp_path):
    with Federation({"site-1": FnTrainer(add(1.0)), "site-2": FnTrainer(add(3.0))}) as fed:
        final = run_fedavg(fed.comm, fed.job(tmp_path, num_rounds=3), X0)
    assert scalar(final) == 1.0 + 3 * 2


def test_checkpoints_and_round_monotonicity(tmp_path):
    with Federation({"site-1": FnTrainer(add(1.0))}) as fed:
        events = EventLog(tmp_path / "events.jsonl")
        ctl = FedAvg(fed.comm, fed.job(tmp_path, num_rounds=3), X0, events=events)
        ctl.run()
    ckpt = tmp_path / "ckpt"
    models = [load_model(ckpt / f"round_{r}.flm") for r in range(3)]
    assert [m.current_round for m in models] == [1, 2, 3]
    assert [scalar(m) for m in models] == [2.0, 3.0, 4.0]
    assert read_marker(ckpt, "latest") == "round_2.flm"
    assert [e["round"] for e in events.of("round_end")] == [0, 1, 2]


def test_validation_selects_best_round(tmp_path):
    trainer = FnTrainer(add(1.0), n=10, validation=lambda p: {"score": -abs(float(p["x"]) - 3.0)})
    with Federation({"site-1": trainer, "site-2": FnTrainer(add(1.0), n=30, validation=trainer.validation)}) as fed:
        ctl = FedAvg(fed.comm, fed.job(tmp_path, num_rounds=4, selection_metric="score"), X0)
        ctl.run()
    # x after rounds 0..3 is 2, 3, 4, 5, so round 1 scores best
    assert ctl.selection_history == [-1.0, 0.0, -1.0, -2.0]
    assert ctl.best_round == 1
    assert read_marker(tmp_path / "ckpt", "best") == "round_1.flm"
    assert ctl.rounds[1].validation == {"site-1": {"score": 0.0}, "site-2": {"score": 0.0}}


def test_trainer_failure_with_quorum_met(tmp_path):
    # the healthy clients are slower, so site-2's answer always arrives first
    # and the round returns on the first healthy reply after it
    trainers = {
        "site-1": FnTrainer(add(1.0), delay=0.3),
        "site-2": FnTrainer(add(5.0), fail_rounds={1}),
        "site-3": FnTrainer(add(1.0), delay=0.3),
    }
    with Federation(trainers) as fed:
        ctl = FedAvg(fed.comm, fed.job(tmp_path, num_rounds=3, min_responses=2), X0)
        final = ctl.run()
    assert [r.statuses["site-2"] for r in ctl.rounds] == ["OK", "FAILED", "OK"]
    assert all(sum(s == "OK" for s in r.statuses.values()) >= 2 for r in ctl.rounds)
    # rounds 0 and 2 average +5 with one +1; round 1 averages two +1 clients
    assert scalar(final) == 1.0 + 3.0 + 1.0 + 3.0


def test_both_clients_crash(tmp_path):
    crash = {"site-1": FnTrainer(add(1.0), fail_rounds={0}), "site-2": FnTrainer(add(1.0), fail_rounds={0})}
    with Federation(crash) as fed:
        with pytest.raises(InsufficientResponses) as info:
            fed.comm.broadcast_and_wait(["site-1", "site-2"], protocol.TRAIN, X0, 2, 10.0)
        assert [r.status.value for r in info.value.results] == ["FAILED", "FAILED"]
        with pytest.raises(JobFailed):
            run_fedavg(fed.comm, fed.job(tmp_path, num_rounds=1), X0)


def test_broadcast_both_reply(tmp_path):
    with Federation({"site-1": FnTrainer(add(1.0)), "site-2": FnTrainer(add(2.0))}) as fed:
        outcome = fed.comm.broadcast_and_wait(["site-1", "site-2"], protocol.TRAIN, X0, 2, 10.0)
    assert sorted((r.client_name, scalar(r.payload)) for r in outcome.results) == [("site-1", 2.0), ("site-2", 3.0)]
    assert outcome.bytes_sent > 0 and outcome.bytes_received > 0


def test_straggler_does_not_block(tmp_path):
    trainers = {
        "site-1": FnTrainer(add(1.0)),
        "site-2": FnTrainer(add(1.0)),
        "site-3": FnTrainer(add(1.0), delay=30.0),
    }
    fed = Federation(trainers)
    try:
        started = time.monotonic()
        outcome = run_with_watchdog(
            fed.comm.broadcast_and_wait, 60, list(trainers), protocol.TRAIN, X0, 2, 20.0
        )
        elapsed = time.monotonic() - started
        assert elapsed < 10
        statuses = {r.client_name: r.status.value for r in outcome.results}
        assert statuses == {"site-1": "OK", "site-2": "OK", "site-3": "TIMEOUT"}
    finally:
        fed.comm.kill()


def test_cyclic_composition_and_order(tmp_path):
    with Federation({"site-1": FnTrainer(add(1.0)), "site-2": FnTrainer(add(2.0))}) as fed:
        ctl = Cyclic(fed.comm, fed.job(tmp_path, num_rounds=1, workflow="cyclic"), X0)
        final = ctl.run()
    assert scalar(final) == 1.0 + 3.0
    assert ctl.rounds[0].visit_order == ["site-1", "site-2"]


@pytest.mark.parametrize("order, expected", [(["site-a", "site-b"], 3 * (2 * 1.0 + 1)), (["site-b", "site-a"], 2 * (3 * 1.0) + 1)])
def test_cyclic_order_sensitivity(tmp_path, order, expected):
    trainers = {"site-a": FnTrainer(lambda p: {"x": 2 * p["x"] + 1}), "site-b": FnTrainer(lambda p: {"x": 3 * p["x"]})}
    with Federation(trainers) as fed:
        final = run_cyclic(fed.comm, fed.job(tmp_path, num_rounds=1, workflow="cyclic", cyclic_order=order), X0)
    assert scalar(final) == expected


def test_cyclic_single_client_equals_local_training(tmp_path):
    fn = lambda p: {"x": p["x"] * 0.5 - 2}  # noqa: E731
    with Federation({"site-1": FnTrainer(fn)}) as fed:
        final = run_cyclic(fed.comm, fed.job(tmp_path, num_rounds=1, workflow="cyclic"), X0)
    assert scalar(final) == float(fn(dict(X0.params))["x"])


def test_cyclic_failure_is_typed(tmp_path):
    trainers = {"site-1": FnTrainer(add(1.0)), "site-2": FnTrainer(add(1.0), fail_rounds={0})}
    with Federation(trainers) as fed:
        with pytest.raises(JobFailed, match="TaskFailed"):
            run_cyclic(fed.comm, fed.job(tmp_path, num_rounds=1, workflow="cyclic"), X0)
