from __future__ import annotations

import json
import os

import numpy as np
import pytest

from fedsim.model import FLModel
from fedsim.protocol import TaskResult, TaskStatus
from fedsim.server import (
    ConfigError,
    EventLog,
    JobConfig,
    MetricMissing,
    NotEnoughClients,
    ZeroTotalWeight,
    aggregate_weighted,
    load_model,
    read_marker,
    round_metric,
    sample_clients,
    save_model,
    select_best,
)
from fedsim.server.controller import AggregationShapeMismatch, EmptyResults

NAMES = [f"site-{i}" for i in range(1, 6)]


def result(name, params=None, n=1, metrics=None, status=TaskStatus.OK, task_id=0):
    payload = FLModel(params=params or {}, metrics=metrics or {}, num_samples=n)
    return TaskResult(task_id, name, status, payload if status is TaskStatus.OK else None)


def test_sampling_all_and_determinism():
    assert sample_clients(NAMES[:3], 3, 0) == NAMES[:3]
    assert sample_clients(NAMES, 2, [7, 1]) == sample_clients(NAMES, 2, [7, 1])
    with pytest.raises(NotEnoughClients):
        sample_clients(NAMES, 6, 0)


def test_sampling_is_uniform():
    counts = dict.fromkeys(NAMES, 0)
    for r in range(10_000):
        for name in sample_clients(NAMES, 2, [123, r]):
            counts[name] += 1
    n, p = 10_000, 2 / 5
    sigma = np.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) <= 3 * sigma for c in counts.values()), counts
    chi2 = sum((c - n * p) ** 2 / (n * p) for c in counts.values())
    assert chi2 < 18.47  # 99.9th percentile of chi-square with 4 degrees of freedom


def test_weighted_mean_example():
    out = aggregate_weighted([result("a", {"w": np.array([1.0, 2.0])}, 1), result("b", {"w": np.array([3.0, 4.0])}, 3)])
    # (1*1 + 3*3) / 4 and (2*1 + 4*3) / 4
    assert out["w"].tolist() == [2.5, 3.5]


def test_uniform_weighting_and_dtype():
    out = aggregate_weighted(
        [result("a", {"w": np.array([1.0], np.float32)}, 1), result("b", {"w": np.array([3.0], np.float32)}, 99)],
        weighting="uniform",
    )
    assert out["w"].dtype == np.float32 and out["w"].tolist() == [2.0]


def test_failed_results_are_ignored():
    out = aggregate_weighted(
        [result("a", {"w": np.array([1.0])}, 1), result("b", status=TaskStatus.FAILED)]
    )
    assert out["w"].tolist() == [1.0]


def test_aggregation_errors():
    with pytest.raises(EmptyResults):
        aggregate_weighted([result("a", status=TaskStatus.FAILED)])
    with pytest.raises(ZeroTotalWeight):
        aggregate_weighted([result("a", {"w": np.zeros(1)}, 0)])
    with pytest.raises(AggregationShapeMismatch):
        aggregate_weighted([result("a", {"w": np.zeros(1)}), result("b", {"w": np.zeros(2)})])
    with pytest.raises(AggregationShapeMismatch):
        aggregate_weighted([result("a", {"w": np.zeros(1)}), result("b", {"v": np.zeros(1)})])


def test_round_metric():
    value = round_metric([result("a", n=100, metrics={"acc": 0.9}), result("b", n=300, metrics={"acc": 0.5})], "acc")
    assert value == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(MetricMissing):
        round_metric([result("a", metrics={"loss": 1.0})], "acc")


def test_round_metric_ties_survive_weight_scaling():
    # found by the aggregation property suite: rounds 0 and 2 tie exactly and
    # must keep tying when every sample count is multiplied by 51
    accs = [758.9697527327581, 517.9697527327581, 999.9697527327581, 0.0]

    def history(n):
        rs = [result(f"site-{i}", n=n, metrics={"acc": a}) for i, a in enumerate(accs)]
        return [round_metric(rs[: i + 1], "acc") for i in range(len(rs))]

    assert history(1) == history(51)
    assert select_best(history(51)) == select_best(history(1)) == 0


@pytest.mark.parametrize(
    "history, mode, best",
    [
        ([0.5, 0.7, 0.6], "max", 1),
        ([0.7, 0.7], "max", 0),
        ([0.5, 0.3, 0.3], "min", 1),
        ([None, 0.2, float("nan"), 0.1], "max", 1),
        ([None], "max", None),
        ([], "max", None),
    ],
)
def test_select_best(history, mode, best):
    assert select_best(history, mode) == best


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"min_clients": 0}, "min_clients"),
        ({"num_rounds": 0}, "num_rounds"),
        ({"workflow": "gossip"}, "workflow"),
        ({"task_timeout": 0}, "task_timeout"),
        ({"weighting": "loss"}, "weighting"),
        ({"selection_mode": "median"}, "selection_mode"),
    ],
)
def test_job_config_errors_name_the_field(kwargs, field):
    with pytest.raises(ConfigError) as info:
        JobConfig(**kwargs)
    assert field in str(info.value)


def test_checkpoint_round_trip_and_markers(tmp_path):
    m = FLModel(params={"w": np.array([1.0, 2.0])}, current_round=1, total_rounds=3)
    for r in range(3):
        save_model(m, tmp_path, r)
    assert sorted(p.name for p in tmp_path.glob("round_*.flm")) == ["round_0.flm", "round_1.flm", "round_2.flm"]
    assert read_marker(tmp_path, "latest") == "round_2.flm"
    assert load_model(tmp_path / "round_0.flm") == m
    assert read_marker(tmp_path, "best") is None


def test_crash_before_rename_leaves_no_partial_checkpoint(tmp_path, monkeypatch):
    m = FLModel(params={"w": np.arange(1000.0)})
    save_model(m, tmp_path, 0)

    def crash(src, dst):
        raise OSError("injected crash between write and rename")

    monkeypatch.setattr(os, "replace", crash)
    with pytest.raises(OSError):
        save_model(m, tmp_path, 1)
    monkeypatch.undo()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["latest.txt", "round_0.flm"]
    assert read_marker(tmp_path, "latest") == "round_0.flm"
    assert load_model(tmp_path / "round_0.flm") == m


def test_event_log_is_json_lines(tmp_path):
    log = EventLog(tmp_path / "events.jsonl")
    log.emit("round_start", round=0)
    log.emit("round_end", round=0, bytes_sent=10)
    lines = [json.loads(x) for x in (tmp_path / "events.jsonl").read_text().splitlines()]
    assert [e["event"] for e in lines] == ["round_start", "round_end"]
    assert all("ts" in e for e in lines)
    assert log.of("round_end")[0]["bytes_sent"] == 10
