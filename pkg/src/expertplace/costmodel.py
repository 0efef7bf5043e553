"""Analytical latency model for a placement.

Compute time is linear in tokens (every expert is the same FFN); dispatch
time for a GPU pair is ``tokens * bytes_per_token / bandwidth``. Phases are
serial: end-to-end time is the sum over layers of overhead plus compute
tail, plus the sum over layer transitions of the all-to-all tail.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cluster_opt import Clustering
from .place_opt import (
    Placement,
    PlacementError,
    comm_costs,
    layer_pair_volumes,
    pair_max,
)
from .topology import Topology
from .trace import RoutingStats


@dataclass(frozen=True)
class CostParams:
    compute_time_per_token: float = 1e-7
    bytes_per_token: float = 8192.0  # 4096-dim bf16 hidden state
    fixed_overhead_per_layer: float = 0.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


@dataclass
class TailAvg:
    tail: float
    avg: float


@dataclass
class CostReport:
    per_layer_compute: list[TailAvg]
    per_transition_comm: list[TailAvg]
    end_to_end: float
    gpu_token_share: list[list[float]]
    pair_volume_summary: list[dict]
    params: CostParams = field(default_factory=CostParams)

    def to_dict(self) -> dict:
        return {
            "end_to_end": self.end_to_end,
            "per_layer_compute": [asdict(x) for x in self.per_layer_compute],
            "per_transition_comm": [asdict(x) for x in self.per_transition_comm],
            "gpu_token_share": self.gpu_token_share,
            "pair_volume_summary": self.pair_volume_summary,
            "params": asdict(self.params),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "index", "tail_s", "avg_s", "max_share_or_volume", "mean_volume"])
        for l, x in enumerate(self.per_layer_compute):
            w.writerow(["compute", l, repr(x.tail), repr(x.avg),
                        repr(max(self.gpu_token_share[l])), ""])
        for l, x in enumerate(self.per_transition_comm):
            pv = self.pair_volume_summary[l]
            w.writerow(["comm", l, repr(x.tail), repr(x.avg), pv["max"], repr(pv["mean"])])
        return buf.getvalue()


def evaluate(stats: RoutingStats, clustering: Clustering, placement: Placement,
             topology: Topology, params: CostParams) -> CostReport:
    L, E, G = stats.num_layers, stats.num_experts, topology.num_gpus
    if (clustering.num_layers, clustering.num_experts) != (L, E):
        raise PlacementError(
            f"trace is {L}x{E} but clustering is "
            f"{clustering.num_layers}x{clustering.num_experts} (layers x experts)"
        )
    if placement.expert_to_gpu.shape != (L, E) or placement.num_gpus != G:
        raise PlacementError(
            f"placement covers {placement.num_layers} layers x {placement.num_experts} experts "
            f"on {placement.num_gpus} GPUs; trace/topology need {L} x {E} on {G}"
        )
    expect = np.take_along_axis(placement.gpu_of_cluster, clustering.assign, axis=1)
    if not np.array_equal(expect, placement.expert_to_gpu):
        raise PlacementError("placement expert_to_gpu disagrees with its cluster mapping")

    compute = []
    shares = []
    for l in range(L):
        tokens = np.bincount(placement.expert_to_gpu[l], weights=stats.load[l], minlength=G)
        t = params.compute_time_per_token * tokens
        tail = float(t.max())
        # min() guards against a one-ulp overshoot of the mean when all GPUs tie
        compute.append(TailAvg(tail, min(float(t.mean()), tail)))
        total = tokens.sum()
        shares.append((tokens / total).tolist() if total else [0.0] * G)

    C = comm_costs(stats, clustering)
    B = topology.bandwidth
    off = ~np.eye(G, dtype=bool)
    comm = []
    volumes = []
    for l in range(L - 1):
        V = layer_pair_volumes(C, placement, l)
        if G < 2:
            comm.append(TailAvg(0.0, 0.0))
            volumes.append({"max": 0, "mean": 0.0})
            continue
        times = (V[off] / B[off]) * params.bytes_per_token
        # tail shares pair_max with the placement objective so the two agree exactly
        tail = pair_max(V, B) * params.bytes_per_token
        comm.append(TailAvg(tail, min(float(times.mean()), tail)))
        volumes.append({"max": int(V[off].max()), "mean": float(V[off].mean())})

    e2e = sum(params.fixed_overhead_per_layer + x.tail for x in compute) + sum(x.tail for x in comm)
    return CostReport(compute, comm, float(e2e), shares, volumes, params)


@dataclass
class ComparisonSummary:
    baseline_end_to_end: float
    optimized_end_to_end: float
    speedup: float
    end_to_end_reduction_pct: float
    compute_tail_mean_reduction_pct: float
    compute_tail_max_reduction_pct: float
    comm_tail_mean_reduction_pct: float
    comm_tail_max_reduction_pct: float
    comm_avg_mean_reduction_pct: float

    def to_dict(self) -> dict:
        return asdict(self)


def _reduction(base: float, new: float) -> float:
    return 0.0 if base == 0 else 100.0 * (base - new) / base


def _stat(values: list[float], fn) -> float:
    return float(fn(values)) if values else 0.0


def compare(baseline: CostReport, optimized: CostReport) -> ComparisonSummary:
    """Relative improvement of ``optimized`` over ``baseline``."""
    bc = [x.tail for x in baseline.per_layer_compute]
    oc = [x.tail for x in optimized.per_layer_compute]
    bm = [x.tail for x in baseline.per_transition_comm]
    om = [x.tail for x in optimized.per_transition_comm]
    ba = [x.avg for x in baseline.per_transition_comm]
    oa = [x.avg for x in optimized.per_transition_comm]
    speedup = (baseline.end_to_end / optimized.end_to_end) if optimized.end_to_end else 1.0
    return ComparisonSummary(
        baseline_end_to_end=baseline.end_to_end,
        optimized_end_to_end=optimized.end_to_end,
        speedup=speedup,
        end_to_end_reduction_pct=_reduction(baseline.end_to_end, optimized.end_to_end),
        compute_tail_mean_reduction_pct=_reduction(_stat(bc, np.mean), _stat(oc, np.mean)),
        compute_tail_max_reduction_pct=_reduction(_stat(bc, max), _stat(oc, max)),
        comm_tail_mean_reduction_pct=_reduction(_stat(bm, np.mean), _stat(om, np.mean)),
        comm_tail_max_reduction_pct=_reduction(_stat(bm, max), _stat(om, max)),
        comm_avg_mean_reduction_pct=_reduction(_stat(ba, np.mean), _stat(oa, np.mean)),
    )


def gpu_memory_share(clustering: Clustering, placement: Placement) -> np.ndarray:
    """Experts hosted per GPU, totalled over all layers."""
    eg = np.take_along_axis(placement.gpu_of_cluster, clustering.assign, axis=1)
    return np.bincount(eg.ravel(), minlength=placement.num_gpus)


def report_from_dict(doc: dict) -> CostReport:
    return CostReport(
        per_layer_compute=[TailAvg(**x) for x in doc["per_layer_compute"]],
        per_transition_comm=[TailAvg(**x) for x in doc["per_transition_comm"]],
        end_to_end=float(doc["end_to_end"]),
        gpu_token_share=doc["gpu_token_share"],
        pair_volume_summary=doc["pair_volume_summary"],
        params=CostParams(**doc.get("params", {})),
    )


def write_report(report: CostReport, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    js = stem.with_suffix(".json")
    cs = stem.with_suffix(".csv")
    js.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    cs.write_text(report.to_csv(), encoding="utf-8")
    return js, cs
