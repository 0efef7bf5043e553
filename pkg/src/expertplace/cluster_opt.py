"""Load-balanced expert clustering.

Each layer's experts are partitioned into ``G`` non-empty clusters so that
the summed absolute deviation of cluster token loads from the per-layer mean
is minimal. Layers are independent, so the exact solver optimizes them one
at a time by enumerating set partitions as restricted growth strings.

Deviations are kept as integers scaled by ``G`` (``|G*T - sum(load)|``) so
that comparisons between partitions are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .trace import RoutingStats

ENUMERATION_LIMIT = 10**6


class ClusteringError(ValueError):
    pass


class EnumerationTooLarge(ClusteringError):
    pass


@dataclass(frozen=True, eq=False)
class Clustering:
    num_layers: int
    num_experts: int
    num_clusters: int
    assign: np.ndarray
    objective: float | None = None

    def __post_init__(self) -> None:
        a = np.array(self.assign, dtype=np.int64)
        L, E, G = self.num_layers, self.num_experts, self.num_clusters
        if a.shape != (L, E):
            raise ClusteringError(f"assign has shape {a.shape}, expected {(L, E)}")
        if a.size and (a.min() < 0 or a.max() >= G):
            raise ClusteringError(f"cluster ids must lie in [0, {G})")
        for l in range(L):
            missing = sorted(set(range(G)) - set(a[l].tolist()))
            if missing:
                raise ClusteringError(f"layer {l}: clusters {missing} are empty")
        a.setflags(write=False)
        object.__setattr__(self, "assign", a)

    def sizes(self) -> np.ndarray:
        """Experts per cluster, shape [L][G]."""
        out = np.zeros((self.num_layers, self.num_clusters), dtype=np.int64)
        for l in range(self.num_layers):
            out[l] = np.bincount(self.assign[l], minlength=self.num_clusters)
        return out

    def to_dict(self) -> dict:
        return {
            "num_clusters": self.num_clusters,
            "assign": self.assign.tolist(),
            "objective": self.objective,
        }


def from_dict(doc: dict) -> Clustering:
    try:
        a = np.array(doc["assign"], dtype=np.int64)
        G = int(doc["num_clusters"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ClusteringError(f"malformed clustering document: {exc}") from exc
    if a.ndim != 2:
        raise ClusteringError("assign must be a 2-D list")
    obj = doc.get("objective")
    return Clustering(a.shape[0], a.shape[1], G, a, None if obj is None else float(obj))


def load(path: str | Path) -> Clustering:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def emit(clustering: Clustering, path: str | Path) -> None:
    Path(path).write_text(json.dumps(clustering.to_dict()) + "\n", encoding="utf-8")


def _check_dims(stats: RoutingStats, clustering: Clustering) -> None:
    if (stats.num_layers, stats.num_experts) != (clustering.num_layers, clustering.num_experts):
        raise ClusteringError(
            f"trace is {stats.num_layers}x{stats.num_experts} (layers x experts) but "
            f"clustering is {clustering.num_layers}x{clustering.num_experts}"
        )


def cluster_loads(stats: RoutingStats, clustering: Clustering) -> np.ndarray:
    """Token load per cluster, shape [L][G]."""
    _check_dims(stats, clustering)
    G = clustering.num_clusters
    out = np.zeros((stats.num_layers, G), dtype=np.int64)
    for l in range(stats.num_layers):
        np.add.at(out[l], clustering.assign[l], stats.load[l])
    return out


def mean_load(stats: RoutingStats, layer: int, num_clusters: int) -> float:
    return float(stats.load[layer].sum()) / num_clusters


def scaled_deviations(stats: RoutingStats, clustering: Clustering) -> np.ndarray:
    """Per-layer ``G * sum_c |T[c] - mean|`` as exact integers."""
    T = cluster_loads(stats, clustering)
    G = clustering.num_clusters
    return np.abs(G * T - stats.load.sum(axis=1, keepdims=True)).sum(axis=1)


def objective_o1(stats: RoutingStats, clustering: Clustering) -> float:
    """Sum over layers and clusters of ``|T[c][l] - mean_load(l)|``."""
    return int(scaled_deviations(stats, clustering).sum()) / clustering.num_clusters


def stirling2(n: int, k: int) -> int:
    """Number of partitions of ``n`` labelled items into ``k`` non-empty blocks."""
    row = [1] + [0] * k
    for i in range(1, n + 1):
        new = [0] * (k + 1)
        for j in range(1, min(i, k) + 1):
            new[j] = j * row[j] + row[j - 1]
        row = new
    return row[k]


@lru_cache(maxsize=16)
def partitions(E: int, G: int) -> np.ndarray:
    """All restricted growth strings of length E with exactly G blocks, lexicographic."""
    rows = np.zeros((1, 1), dtype=np.int8)
    blocks = np.ones(1, dtype=np.int8)
    for i in range(1, E):
        remaining = E - i - 1
        new_rows, new_blocks = [], []
        for v in range(G):
            ok = v <= blocks
            nb = np.maximum(blocks, v + 1)
            ok &= nb + remaining >= G
            if ok.any():
                sel = rows[ok]
                new_rows.append(np.hstack([sel, np.full((len(sel), 1), v, dtype=np.int8)]))
                new_blocks.append(nb[ok].astype(np.int8))
        rows = np.vstack(new_rows)
        blocks = np.concatenate(new_blocks)
    rows = rows[blocks == G]
    order = np.lexsort(rows.T[::-1])
    out = rows[order]
    out.setflags(write=False)
    return out


def canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so the block holding the lowest unassigned expert gets the lowest free id."""
    mapping: dict[int, int] = {}
    for x in labels.tolist():
        if x not in mapping:
            mapping[x] = len(mapping)
    return np.array([mapping[x] for x in labels.tolist()], dtype=np.int64)


def _check_feasible(E: int, G: int) -> None:
    if G < 1:
        raise ClusteringError("need at least one cluster")
    if G > E:
        raise ClusteringError(
            f"cannot form {G} non-empty clusters from {E} experts per layer"
        )


def solve_exact(stats: RoutingStats, G: int) -> Clustering:
    """Optimal clustering by per-layer enumeration of all set partitions."""
    E, L = stats.num_experts, stats.num_layers
    _check_feasible(E, G)
    count = stirling2(E, G)
    if count > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(
            f"S({E},{G}) = {count} partitions per layer exceeds {ENUMERATION_LIMIT}; "
            "use solve_heuristic (mode 'heuristic') instead"
        )
    rgs = partitions(E, G)
    masks = [(rgs == c).astype(np.int64) for c in range(G)]
    assign = np.zeros((L, E), dtype=np.int64)
    total = 0
    for l in range(L):
        w = stats.load[l]
        S = int(w.sum())
        dev = np.zeros(len(rgs), dtype=np.int64)
        for m in masks:
            dev += np.abs(G * (m @ w) - S)
        best = int(np.argmin(dev))  # first minimum == lexicographically smallest
        assign[l] = rgs[best]
        total += int(dev[best])
    return Clustering(L, E, G, assign, total / G)


def _layer_local_search(w: list[int], G: int) -> list[int]:
    E = len(w)
    S = sum(w)
    order = sorted(range(E), key=lambda e: (-w[e], e))
    lab = [0] * E
    T = [0] * G
    n = [0] * G
    for i, e in enumerate(order):
        c = i if i < G else min(range(G), key=lambda c: (T[c], n[c], c))
        lab[e] = c
        T[c] += w[e]
        n[c] += 1

    def dev(t: int) -> int:
        return abs(G * t - S)

    improved = True
    while improved:
        improved = False
        for e in range(E):
            a = lab[e]
            if n[a] == 1:
                continue
            for b in range(G):
                if b == a:
                    continue
                delta = (dev(T[a] - w[e]) + dev(T[b] + w[e])) - (dev(T[a]) + dev(T[b]))
                if delta < 0:
                    T[a] -= w[e]
                    T[b] += w[e]
                    n[a] -= 1
                    n[b] += 1
                    lab[e] = b
                    improved = True
                    break
        for e1 in range(E):
            for e2 in range(e1 + 1, E):
                a, b = lab[e1], lab[e2]
                if a == b or w[e1] == w[e2]:
                    continue
                d = w[e1] - w[e2]
                delta = (dev(T[a] - d) + dev(T[b] + d)) - (dev(T[a]) + dev(T[b]))
                if delta < 0:
                    T[a] -= d
                    T[b] += d
                    lab[e1], lab[e2] = b, a
                    improved = True
    return lab


def solve_heuristic(stats: RoutingStats, G: int) -> Clustering:
    """Longest-processing-time seeding followed by move/swap local search."""
    E, L = stats.num_experts, stats.num_layers
    _check_feasible(E, G)
    assign = np.zeros((L, E), dtype=np.int64)
    for l in range(L):
        lab = _layer_local_search(stats.load[l].tolist(), G)
        assign[l] = canonical(np.array(lab))
    c = Clustering(L, E, G, assign)
    return Clustering(L, E, G, assign, objective_o1(stats, c))


def solve(stats: RoutingStats, G: int, mode: str = "auto") -> Clustering:
    """Dispatch on ``mode``: ``exact``, ``heuristic`` or ``auto`` (exact when enumerable)."""
    if mode == "exact":
        return solve_exact(stats, G)
    if mode == "heuristic":
        return solve_heuristic(stats, G)
    if mode == "auto":
        _check_feasible(stats.num_experts, G)
        if stirling2(stats.num_experts, G) <= ENUMERATION_LIMIT:
            return solve_exact(stats, G)
        return solve_heuristic(stats, G)
    raise ValueError(f"unknown clustering mode {mode!r}")


def contiguous(E: int, L: int, G: int) -> Clustering:
    """Index-contiguous blocks of E/G experts, identical in every layer."""
    if G < 1 or E % G:
        raise ClusteringError(
            f"contiguous baseline needs num_experts divisible by num_gpus (E={E}, G={G})"
        )
    row = np.arange(E) // (E // G)
    return Clustering(L, E, G, np.tile(row, (L, 1)))
