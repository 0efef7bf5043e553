import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expertplace import cluster_opt as co, costmodel as cm, place_opt as po, topology
from expertplace.costmodel import CostParams
from expertplace.place_opt import PlacementError
from expertplace.trace import HotOverride, TraceGenSpec, generate

from oracles import naive_evaluate


def _random_case(seed, G=4, E=8, L=6):
    rng = np.random.default_rng(seed)
    s = generate(TraceGenSpec(L, E, 2, 1500, float(rng.uniform(0, 2)), float(rng.uniform(0, 1)), seed=seed))
    rows = []
    for _ in range(L):
        while True:
            a = rng.integers(0, G, E)
            if len(set(a.tolist())) == G:
                break
        rows.append(a)
    c = co.Clustering(L, E, G, np.array(rows))
    pl = po.compose(c, np.array([rng.permutation(G) for _ in range(L)]))
    B = np.triu(rng.choice([50e9, 900e9, 200e9], (G, G)), 1)
    return s, c, pl, topology.Topology(G, B + B.T)


def test_params_must_be_non_negative():
    with pytest.raises(ValueError):
        CostParams(compute_time_per_token=-1.0)


def test_uniform_trace_balanced_placement_tail_equals_avg():
    E, G, L, n = 4, 2, 3, 100
    load = np.full((L, E), n // 2)  # k=2, 100 tokens, 50 per expert
    trans = np.full((L - 1, E, E), n * 4 // (E * E))
    from expertplace.trace import RoutingStats
    s = RoutingStats(L, E, 2, n, load, trans)
    c, pl = po.baseline_contiguous(E, L, G)
    r = cm.evaluate(s, c, pl, topology.uniform(G, 1e9), CostParams())
    assert all(x.tail == x.avg for x in r.per_layer_compute)
    assert all(x.tail == x.avg for x in r.per_transition_comm)


def test_hot_pair_share_sets_compute_tail():
    spec = TraceGenSpec(16, 8, 2, 10000, 1.0, 0.3, (HotOverride(14, (0, 1), 0.64),), seed=2)
    s = generate(spec)
    c, pl = po.baseline_contiguous(8, 16, 4)
    params = CostParams(compute_time_per_token=2e-7)
    r = cm.evaluate(s, c, pl, topology.uniform(4, 900e9), params)
    layer_tokens = 2 * 10000
    assert r.gpu_token_share[14][0] == pytest.approx(0.64, abs=1e-12)
    assert r.per_layer_compute[14].tail == pytest.approx(0.64 * layer_tokens * 2e-7, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), overhead=st.floats(0, 1e-3))
def test_evaluate_matches_straight_line_oracle(seed, overhead):
    s, c, pl, topo = _random_case(seed)
    params = CostParams(3e-7, 4096.0, overhead)
    r = cm.evaluate(s, c, pl, topo, params)
    compute, comm, e2e, shares = naive_evaluate(s, pl.expert_to_gpu.tolist(), topo.bandwidth.tolist(), params)
    for got, (tail, avg) in zip(r.per_layer_compute, compute):
        assert got.tail == pytest.approx(tail, rel=1e-12)
        assert got.avg == pytest.approx(avg, rel=1e-12)
    for got, (tail, avg) in zip(r.per_transition_comm, comm):
        assert got.tail == pytest.approx(tail, rel=1e-12)
        assert got.avg == pytest.approx(avg, rel=1e-12)
    assert r.end_to_end == pytest.approx(e2e, rel=1e-12)
    assert np.allclose(r.gpu_token_share, shares, rtol=1e-12, atol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_report_invariants(seed):
    s, c, pl, topo = _random_case(seed)
    params = CostParams(1e-7, 8192.0, 5e-6)
    r = cm.evaluate(s, c, pl, topo, params)
    for l, x in enumerate(r.per_layer_compute):
        assert x.tail >= x.avg
        # conservation: per-GPU compute sums to c_t * k * N
        assert x.avg * topo.num_gpus == pytest.approx(params.compute_time_per_token * s.top_k * s.tokens_total, rel=1e-12)
        assert sum(r.gpu_token_share[l]) == pytest.approx(1.0, rel=1e-12)
    for x in r.per_transition_comm:
        assert x.tail >= x.avg
    want = sum(params.fixed_overhead_per_layer + x.tail for x in r.per_layer_compute) + \
        sum(x.tail for x in r.per_transition_comm)
    assert r.end_to_end == want


def test_comm_tails_match_placement_objective(skewed_trace, two_node_topology):
    c = co.solve_exact(skewed_trace, 4)
    C = po.comm_costs(skewed_trace, c)
    pl = po.solve(C, c, two_node_topology)
    params = CostParams()
    r = cm.evaluate(skewed_trace, c, pl, two_node_topology, params)
    total = sum(x.tail for x in r.per_transition_comm)
    assert total == pytest.approx(pl.objective * params.bytes_per_token, rel=1e-12)


def test_bandwidth_scaling_scales_comm_times():
    s, c, pl, topo = _random_case(5)
    a = cm.evaluate(s, c, pl, topo, CostParams())
    b = cm.evaluate(s, c, pl, topo.scaled(4.0), CostParams())
    for x, y in zip(a.per_transition_comm, b.per_transition_comm):
        assert y.tail == pytest.approx(x.tail / 4.0, rel=1e-12)
        assert y.avg == pytest.approx(x.avg / 4.0, rel=1e-12)


def test_single_gpu_has_no_communication():
    s = generate(TraceGenSpec(3, 4, 2, 100, seed=1))
    c = co.Clustering(3, 4, 1, np.zeros((3, 4), dtype=int))
    pl = po.identity_placement(c)
    r = cm.evaluate(s, c, pl, topology.uniform(1, 1.0), CostParams())
    assert all(x.tail == 0.0 for x in r.per_transition_comm)


def test_dimension_mismatch_and_bad_placement():
    s, c, pl, topo = _random_case(1)
    with pytest.raises(PlacementError):
        cm.evaluate(s, c, pl, topology.uniform(3, 1.0), CostParams())
    other = co.Clustering(c.num_layers, c.num_experts, c.num_clusters, np.roll(c.assign, 1, axis=1))
    with pytest.raises(PlacementError, match="disagrees"):
        cm.evaluate(s, other, pl, topo, CostParams())
    s2 = generate(TraceGenSpec(2, 8, 2, 100, seed=0))
    with pytest.raises(PlacementError):
        cm.evaluate(s2, c, pl, topo, CostParams())


# ----------------------------------------------------------------- compare


def test_compare_identity():
    s, c, pl, topo = _random_case(2)
    r = cm.evaluate(s, c, pl, topo, CostParams())
    out = cm.compare(r, r)
    assert out.speedup == 1.0
    assert all(v == 0.0 for k, v in out.to_dict().items() if k.endswith("_pct"))


def test_compare_speedup_ratio():
    s, c, pl, topo = _random_case(2)
    r = cm.evaluate(s, c, pl, topo, CostParams())
    base = cm.report_from_dict({**r.to_dict(), "end_to_end": 2.0})
    opt = cm.report_from_dict({**r.to_dict(), "end_to_end": 1.0})
    out = cm.compare(base, opt)
    assert out.speedup == 2.0 and out.end_to_end_reduction_pct == 50.0


@pytest.mark.parametrize("name,builder", [
    ("hierarchical_2x2", lambda: topology.hierarchical(2, 2, topology.NVLINK4_BW, topology.IB_400G_BW)),
    ("single_node_4", lambda: topology.uniform(4, topology.NVLINK4_BW)),
])
def test_skewed_fixture_speedup_regression(skewed_trace, regression, name, builder):
    topo = builder()
    c = co.solve_exact(skewed_trace, 4)
    pl = po.solve(po.comm_costs(skewed_trace, c), c, topo)
    bc, bp = po.baseline_contiguous(8, 32, 4)
    r = cm.evaluate(skewed_trace, c, pl, topo, CostParams())
    b = cm.evaluate(skewed_trace, bc, bp, topo, CostParams())
    out = cm.compare(b, r)
    assert out.speedup > 1.0
    assert out.speedup == pytest.approx(regression[name]["speedup"], rel=1e-9)


# ---------------------------------------------------------- memory balance


def test_memory_share_baseline():
    c, pl = po.baseline_contiguous(8, 32, 4)
    assert cm.gpu_memory_share(c, pl).tolist() == [64, 64, 64, 64]


def test_memory_share_solver_output_is_flat(skewed_trace, two_node_topology):
    c = co.solve_exact(skewed_trace, 4)
    pl = po.solve(po.comm_costs(skewed_trace, c), c, two_node_topology)
    assert len(set(cm.gpu_memory_share(c, pl).tolist())) == 1


def test_memory_share_matches_direct_count():
    s, c, pl, topo = _random_case(9)
    direct = [0] * topo.num_gpus
    for l in range(c.num_layers):
        for e in range(c.num_experts):
            direct[pl.gpu_of_cluster[l][c.assign[l][e]]] += 1
    assert cm.gpu_memory_share(c, pl).tolist() == direct


# ------------------------------------------------------------------ output


def test_report_files(tmp_path):
    s, c, pl, topo = _random_case(4)
    r = cm.evaluate(s, c, pl, topo, CostParams())
    js, cs = cm.write_report(r, tmp_path / "rep")
    doc = json.loads(js.read_text())
    assert cm.report_from_dict(doc).to_dict() == r.to_dict()
    rows = list(csv.DictReader(io.StringIO(cs.read_text())))
    assert len(rows) == s.num_layers + s.num_layers - 1
    assert {r["kind"] for r in rows} == {"compute", "comm"}
    assert float(rows[0]["tail_s"]) == r.per_layer_compute[0].tail
