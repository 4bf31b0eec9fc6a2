from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsim.filters import (
    Direction,
    FilterConfigError,
    FilterError,
    FilterSpec,
    apply_chain,
    clip_filter,
    exclude_filter,
    gaussian_noise_filter,
    load_chain,
)
from fedsim.model import FLModel, global_l2_norm

CLIP1 = FilterSpec("clip", "task_result", {"max_norm": 1.0})


def noise(sigma, seed=7, direction="task_result"):
    return FilterSpec("gaussian", direction, {"sigma": sigma, "seed": seed})


def test_empty_chain_is_identity():
    m = FLModel(params={"w": np.array([1.0, 2.0])})
    assert apply_chain(m, [], Direction.TASK_RESULT) is m


def test_sigma_zero_noise_is_identity():
    m = FLModel(params={"w": np.array([3.0, 4.0])})
    assert apply_chain(m, [CLIP1, noise(0.0)], "task_result") == clip_filter(m, 1.0)
    assert gaussian_noise_filter(m, 0.0, seed=1) == m


def test_filter_order_matters():
    m = FLModel(params={"w": np.array([0.0, 2.0])})
    a = apply_chain(m, [CLIP1, noise(0.5)], "task_result")
    b = apply_chain(m, [noise(0.5), CLIP1], "task_result")
    expected_a = gaussian_noise_filter(clip_filter(m, 1.0), 0.5, 7)
    expected_b = clip_filter(gaussian_noise_filter(m, 0.5, 7), 1.0)
    assert a == expected_a and b == expected_b
    assert not np.allclose(a.params["w"], b.params["w"])
    assert global_l2_norm(b.params) <= 1.0 + 1e-9


def test_direction_selects_filters():
    m = FLModel(params={"w": np.array([3.0, 4.0])})
    assert apply_chain(m, [CLIP1], "task_data") is m


def test_clip_examples():
    small = FLModel(params={"w": np.array([0.3, 0.4])})
    assert clip_filter(small, 1.0) is small
    out = clip_filter(FLModel(params={"w": np.array([3.0, 4.0])}), 1.0)
    np.testing.assert_allclose(out.params["w"], [0.6, 0.8], rtol=1e-15)


def test_clip_leaves_integer_tensors_alone():
    m = FLModel(params={"w": np.array([3.0, 4.0]), "steps": np.array([10], dtype=np.int64)})
    out = clip_filter(m, 1.0)
    assert out.params["steps"].tolist() == [10]


@settings(max_examples=150, deadline=None)
@given(
    arrays(np.float32, st.integers(1, 50), elements=st.floats(-1e6, 1e6, width=32)),
    arrays(np.float64, st.integers(0, 20), elements=st.floats(-1e6, 1e6)),
    st.floats(1e-3, 1e3),
)
def test_clip_bound_holds(a, b, max_norm):
    out = clip_filter(FLModel(params={"a": a, "b": b}), max_norm)
    assert global_l2_norm(out.params) <= max_norm * (1 + 1e-9)
    assert out.params["a"].dtype == np.float32


def test_noise_is_deterministic_and_salted():
    m = FLModel(params={"w": np.zeros(100)})
    assert gaussian_noise_filter(m, 1.0, 3) == gaussian_noise_filter(m, 1.0, 3)
    assert gaussian_noise_filter(m, 1.0, 3, salt=1) != gaussian_noise_filter(m, 1.0, 3, salt=0)


def test_noise_per_param_streams_are_independent_of_other_shapes():
    a = gaussian_noise_filter(FLModel(params={"x": np.zeros(5), "y": np.zeros(3)}), 1.0, 9)
    b = gaussian_noise_filter(FLModel(params={"x": np.zeros(50), "y": np.zeros(3)}), 1.0, 9)
    assert np.array_equal(a.params["y"], b.params["y"])


def test_noise_moments_at_one_million_elements():
    out = gaussian_noise_filter(FLModel(params={"w": np.zeros(1_000_000)}), 1.0, seed=2024)
    w = out.params["w"]
    # CLT: std error of the mean is 0.001, of the std about 0.0007
    assert abs(w.mean()) <= 0.005
    assert 0.995 <= w.std() <= 1.005


@pytest.mark.parametrize(
    "patterns, kept",
    [(["*"], []), (["head.*"], ["body.w"]), (["nomatch"], ["head.w", "body.w"])],
)
def test_exclude(patterns, kept):
    m = FLModel(params={"head.w": np.zeros(1), "body.w": np.ones(1)})
    assert list(exclude_filter(m, patterns).params) == kept


@pytest.mark.parametrize(
    "entry",
    [
        {"kind": "clip", "direction": "task_result", "max_norm": 0},
        {"kind": "gaussian", "direction": "task_result", "sigma": -1},
        {"kind": "exclude", "direction": "task_data", "patterns": "head.*"},
        {"kind": "sparsify", "direction": "task_data"},
        {"kind": "clip", "direction": "sideways", "max_norm": 1},
        {"direction": "task_data"},
    ],
)
def test_bad_filter_config(entry):
    with pytest.raises(FilterConfigError):
        load_chain([entry])


def test_chain_from_config_and_failure_index():
    chain = load_chain(
        [
            {"kind": "exclude", "direction": "task_result", "patterns": ["tmp*"]},
            {"kind": "clip", "direction": "task_result", "params": {"max_norm": 1.0}},
        ]
    )
    assert [s.to_dict()["kind"] for s in chain] == ["exclude", "clip"]
    bad = FLModel(params={"w": np.array([np.inf])})
    with pytest.raises(FilterError) as info:
        apply_chain(bad, chain, "task_result")
    assert info.value.index == 1
