import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expertplace import trace
from expertplace.trace import (
    HotOverride,
    InvalidSpecError,
    RoutingStats,
    TraceError,
    TraceGenSpec,
    generate,
    total_variation,
    validate,
)

from conftest import FIXTURES
from oracles import random_paths_stats


def _stats(load, transitions, k=1, n=None):
    load = np.array(load)
    n = int(load[0].sum()) // k if n is None else n
    return RoutingStats(load.shape[0], load.shape[1], k, n, load, np.array(transitions))


# ---------------------------------------------------------------- validate


def test_validate_consistent_stats_is_empty(rng):
    stats = random_paths_stats(rng, 3, 4, 2, 50)
    assert validate(stats) == []


def test_validate_reports_single_increment_on_layer_0():
    s = trace.ingest(FIXTURES / "two_layer_trace.json")
    load = s.load.copy()
    load[0, 1] += 1
    bad = RoutingStats(2, 3, 1, 6, load, s.transitions)
    problems = validate(bad)
    sums = [p for p in problems if "load sums" in p]
    assert len(sums) == 1 and "layer 0" in sums[0]


def test_validate_names_negative_entries():
    bad = _stats([[2, -1], [1, 0]], [[[1, 0], [0, 0]]])
    assert any("load[0][1] is negative" in p for p in validate(bad))


def test_validate_detects_row_and_column_mismatch():
    # totals right, but rows disagree with layer-0 loads
    bad = _stats([[1, 1], [1, 1]], [[[2, 0], [0, 0]]])
    problems = validate(bad)
    assert any("row 0" in p for p in problems)
    assert any("column 1" in p for p in problems)


@settings(max_examples=100, deadline=None)
@given(
    L=st.integers(1, 5), E=st.integers(1, 9), k=st.integers(1, 3),
    tokens=st.integers(1, 400), skew=st.floats(0, 3), dep=st.floats(0, 1),
    seed=st.integers(0, 2**31),
)
def test_generator_output_always_validates(L, E, k, tokens, skew, dep, seed):
    k = min(k, E)
    stats = generate(TraceGenSpec(L, E, k, tokens, skew, dep, seed=seed))
    assert validate(stats) == []


# ---------------------------------------------------------------- generate


def test_uniform_two_expert_split_is_roughly_even():
    stats = generate(TraceGenSpec(2, 2, 1, 1000, 0.0, 0.0, seed=3))
    assert stats.load.sum(axis=1).tolist() == [1000, 1000]
    assert np.all(np.abs(stats.load - 500) < 60)


def test_hot_override_share_is_exact():
    spec = TraceGenSpec(16, 8, 2, 10000, 1.0, 0.5, (HotOverride(14, (0, 1), 0.64),), seed=1)
    stats = generate(spec)
    assert stats.load[14][0] + stats.load[14][1] == round(0.64 * 2 * 10000)


def test_full_dependency_top1_has_single_successor():
    stats = generate(TraceGenSpec(6, 5, 1, 3000, 0.8, 1.0, seed=11))
    for l in range(5):
        for row, n in zip(stats.transitions[l], stats.load[l]):
            assert np.count_nonzero(row) == (1 if n else 0)


def test_top_k_larger_than_experts_rejected():
    with pytest.raises(InvalidSpecError):
        generate(TraceGenSpec(2, 3, 4, 10))


@pytest.mark.parametrize("bad", [
    dict(tokens=0),
    dict(dependency_strength=1.5),
    dict(marginal_skew=-1.0),
    dict(hot_overrides=(HotOverride(9, (0,), 0.5),)),
    dict(hot_overrides=(HotOverride(0, (), 0.5),)),
    dict(hot_overrides=(HotOverride(0, (8,), 0.5),)),
    dict(hot_overrides=(HotOverride(0, (0,), 0.0),)),
    dict(hot_overrides=(HotOverride(0, (0,), 1.0),)),  # top-2 cannot put all slots on one expert
])
def test_invalid_specs_rejected(bad):
    base = dict(num_layers=3, num_experts=8, top_k=2, tokens=100)
    base.update(bad)
    with pytest.raises(InvalidSpecError):
        generate(TraceGenSpec(**base))


def test_generation_is_byte_identical_for_fixed_seed():
    spec = TraceGenSpec(8, 6, 2, 2000, 1.1, 0.4, (HotOverride(3, (2,), 0.3),), seed=99)
    assert trace.dumps(generate(spec)) == trace.dumps(generate(spec))


def test_transition_rows_track_next_layer_marginals():
    spec = TraceGenSpec(3, 6, 2, 40000, 1.0, 0.5, seed=5)
    s = generate(spec)
    for l in range(2):
        # expected next-layer distribution implied by the transitions
        implied = s.transitions[l].sum(axis=0) / s.transitions[l].sum()
        observed = s.load[l + 1] / s.load[l + 1].sum()
        assert np.allclose(implied, observed, atol=1e-12)
        # conditional rows average back to the marginal
        cond = s.transitions[l] / np.maximum(s.transitions[l].sum(axis=1, keepdims=True), 1)
        weights = s.load[l] / s.load[l].sum()
        assert np.allclose(weights @ cond, observed, atol=0.01)


# --------------------------------------------------------- total variation


def test_tv_identical_is_zero(rng):
    s = random_paths_stats(rng, 3, 4, 1, 40)
    assert np.all(total_variation(s, s) == 0.0)


def test_tv_disjoint_support_is_one():
    a = _stats([[100, 0]], np.zeros((0, 2, 2)))
    b = _stats([[0, 100]], np.zeros((0, 2, 2)))
    assert total_variation(a, b).tolist() == [1.0]


def test_tv_dimension_mismatch():
    a = _stats([[1, 0]], np.zeros((0, 2, 2)))
    b = _stats([[1, 0, 0]], np.zeros((0, 3, 3)))
    with pytest.raises(TraceError):
        total_variation(a, b)


def test_tv_same_family_different_seeds_is_small():
    base = dict(num_layers=32, num_experts=8, top_k=2, tokens=50000,
                marginal_skew=1.2, dependency_strength=0.6, structure_seed=7)
    a = generate(TraceGenSpec(seed=101, **base))
    b = generate(TraceGenSpec(seed=202, **base))
    assert total_variation(a, b).max() < 0.05


# ------------------------------------------------------------------- I/O


def test_round_trip(tmp_path, rng):
    s = random_paths_stats(rng, 4, 5, 2, 30)
    p = tmp_path / "t.json"
    trace.emit(s, p)
    assert trace.ingest(p) == s


def test_negative_count_names_field(tmp_path):
    doc = json.loads((FIXTURES / "two_layer_trace.json").read_text())
    doc["transitions"][0][1][2] = -1
    p = tmp_path / "neg.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(TraceError, match=r"transitions\[0\]\[1\]\[2\]"):
        trace.ingest(p)


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("load"),
    lambda d: d.__setitem__("load", [[3, 2, 1]]),
    lambda d: d.__setitem__("top_k", 1.5),
    lambda d: d["load"][1].__setitem__(0, 2),
])
def test_malformed_or_inconsistent_files_rejected(tmp_path, mutate):
    doc = json.loads((FIXTURES / "two_layer_trace.json").read_text())
    mutate(doc)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(TraceError):
        trace.ingest(p)


def test_not_json_rejected(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(TraceError):
        trace.ingest(p)


def test_hand_written_fixture_parses():
    s = trace.ingest(FIXTURES / "two_layer_trace.json")
    assert (s.num_layers, s.num_experts, s.top_k, s.tokens_total) == (2, 3, 1, 6)
    assert s.transitions.shape == (1, 3, 3)
    assert validate(s) == []


def test_emitted_file_has_stable_key_order(tmp_path, rng):
    s = random_paths_stats(rng, 2, 3, 1, 10)
    p = tmp_path / "t.json"
    trace.emit(s, p)
    keys = list(json.loads(p.read_text()))
    assert keys == ["num_layers", "num_experts", "top_k", "tokens_total",
                    "load", "transitions", "meta"]


def test_hot_override_argument_parsing():
    (h,) = trace.hot_overrides_from_args(["14:0,1:0.64"])
    assert h == HotOverride(14, (0, 1), 0.64)
    with pytest.raises(InvalidSpecError):
        trace.hot_overrides_from_args(["14:0,1"])
