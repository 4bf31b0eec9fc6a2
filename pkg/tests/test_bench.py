from __future__ import annotations

import hashlib

import numpy as np
import pytest

from fedsim import bench
from fedsim.bench import BenchConfig, GuardExceeded, VerificationFailed, run_bench


def test_pattern_is_stable_and_in_unit_interval():
    p = bench.pattern(0, 1000)
    assert p.dtype == np.float32 and p.min() >= 0 and p.max() < 1
    assert np.array_equal(bench.pattern(500, 10), p[500:510])
    assert bench.pattern(0, 3).tolist() == pytest.approx([0.0, 0.6180339, 0.2360680], abs=1e-6)


def test_expected_digest_matches_direct_computation():
    n = 3 * (1 << 18) + 5  # crosses oracle block boundaries
    arr = bench.pattern(0, n)
    for _ in range(2):
        arr = arr + np.float32(0.5)
    assert bench.expected_digest(n, 2, 0.5) == hashlib.sha256(arr.tobytes()).hexdigest()


@pytest.mark.parametrize("driver", ["inproc", "tcp"])
def test_blob_mode_verifies_every_round(driver):
    report = run_bench(BenchConfig(size=4 << 20, chunk_size=256 << 10, driver=driver, rounds=3, keys=8))
    assert report.verified_rounds == [True, True, True]
    assert report.payload_size == 4 << 20
    assert report.frames_per_message == 17  # 4 MiB of data plus the FLM1 tables spill into one more chunk
    assert report.throughput_mb_s > 0


def test_file_mode_keeps_receiver_bounded(tmp_path):
    chunk = 1 << 20
    report = run_bench(BenchConfig(size=24 << 20, chunk_size=chunk, mode="file", rounds=2, workdir=str(tmp_path)))
    assert report.verified_rounds == [True, True]
    assert report.frames_per_message == 24
    assert report.receiver_peak_buffer <= 16 * chunk + chunk
    assert report.sender_peak_buffer <= 16 * chunk
    assert list(tmp_path.iterdir()) == []


def test_size_zero_sends_one_frame():
    report = run_bench(BenchConfig(size=0, rounds=1, keys=1))
    assert report.verified_rounds == [True] and report.frames_per_message == 1
    report = run_bench(BenchConfig(size=0, rounds=1, mode="file"))
    assert report.verified_rounds == [True] and report.frames_per_message == 1


def test_wrong_update_is_caught(monkeypatch):
    monkeypatch.setattr(bench.AddConstantTrainer, "__init__", lambda self, c: setattr(self, "constant", c * 2))
    with pytest.raises(VerificationFailed, match="round 0"):
        run_bench(BenchConfig(size=1 << 20, rounds=2, keys=2))


def test_guard():
    with pytest.raises(GuardExceeded):
        run_bench(BenchConfig(size=1 << 30, guard_bytes=1 << 20))
    what, need, _ = bench.estimated_need(BenchConfig(size=1 << 20, clients=2))
    assert (what, need) == ("memory", 11 << 20)


@pytest.mark.parametrize("kwargs", [{"mode": "udp"}, {"size": -1}, {"rounds": 0}, {"chunk_size": 10}])
def test_bad_bench_config(kwargs):
    with pytest.raises(ValueError):
        BenchConfig(**kwargs)
