"""Cluster-to-GPU placement minimizing bandwidth-normalized all-to-all tail cost.

Given a fixed clustering, every layer picks a permutation mapping its ``G``
clusters onto the ``G`` GPUs. The cost of the step from layer ``l`` to
``l + 1`` is the largest ``V[g1][g2] / B[g1][g2]`` over ordered GPU pairs
``g1 != g2``, where ``V`` is the token volume the two permutations put on
that pair. The objective sums those step costs. A global constraint keeps
the number of experts hosted per GPU (summed over layers) within
``balance_slack`` of ``E * L / G``.

The exact solver is a depth-first branch-and-bound over layers. Its lower
bound is a backward dynamic program over (layer, permutation) that ignores
the balance constraint. Ties are broken towards the lexicographically
smallest sequence of permutations (``itertools.permutations`` order).
"""

from __future__ import annotations

import itertools
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster_opt import Clustering, contiguous
from .topology import Topology
from .trace import RoutingStats

MAX_GPUS = 6
EXHAUSTIVE_LIMIT = 10**7
DEFAULT_GAP = 0.025
REL_TOL = 1e-9


class PlacementError(ValueError):
    pass


class PlacementInfeasible(PlacementError):
    def __init__(self, message: str, min_slack: int | None = None):
        super().__init__(message)
        self.min_slack = min_slack


@dataclass(frozen=True, eq=False)
class CommCostTensor:
    costs: np.ndarray  # [L-1][G][G] tokens from cluster c1 (layer l) to c2 (layer l+1)

    def __post_init__(self) -> None:
        c = np.array(self.costs, dtype=np.int64)
        if c.ndim != 3 or c.shape[1] != c.shape[2]:
            raise PlacementError(f"costs must have shape [L-1][G][G], got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "costs", c)

    @property
    def num_transitions(self) -> int:
        return self.costs.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.costs.shape[1]


@dataclass(frozen=True, eq=False)
class Placement:
    gpu_of_cluster: np.ndarray  # [L][G]
    expert_to_gpu: np.ndarray  # [L][E]
    objective: float | None = None
    balance_slack: int = 0

    def __post_init__(self) -> None:
        pc = np.array(self.gpu_of_cluster, dtype=np.int64)
        eg = np.array(self.expert_to_gpu, dtype=np.int64)
        if pc.ndim != 2 or eg.ndim != 2 or pc.shape[0] != eg.shape[0]:
            raise PlacementError(
                f"gpu_of_cluster {pc.shape} and expert_to_gpu {eg.shape} are inconsistent"
            )
        G = pc.shape[1]
        ident = np.arange(G)
        for l, row in enumerate(pc):
            if not np.array_equal(np.sort(row), ident):
                raise PlacementError(
                    f"layer {l}: gpu_of_cluster {row.tolist()} is not a permutation of 0..{G - 1}"
                )
        if eg.size and (eg.min() < 0 or eg.max() >= G):
            raise PlacementError(f"expert_to_gpu entries must lie in [0, {G})")
        if self.balance_slack < 0:
            raise PlacementError("balance_slack must be non-negative")
        pc.setflags(write=False)
        eg.setflags(write=False)
        object.__setattr__(self, "gpu_of_cluster", pc)
        object.__setattr__(self, "expert_to_gpu", eg)

    @property
    def num_layers(self) -> int:
        return self.gpu_of_cluster.shape[0]

    @property
    def num_gpus(self) -> int:
        return self.gpu_of_cluster.shape[1]

    @property
    def num_experts(self) -> int:
        return self.expert_to_gpu.shape[1]

    def to_dict(self) -> dict:
        return {
            "balance_slack": self.balance_slack,
            "objective": self.objective,
            "gpu_of_cluster": self.gpu_of_cluster.tolist(),
            "expert_to_gpu": self.expert_to_gpu.tolist(),
        }

    def clustering(self) -> Clustering:
        """Recover the labelled clustering implied by the two maps."""
        L, G = self.gpu_of_cluster.shape
        inv = np.argsort(self.gpu_of_cluster, axis=1)
        assign = np.take_along_axis(inv, self.expert_to_gpu, axis=1)
        return Clustering(L, self.num_experts, G, assign)


def compose(clustering: Clustering, gpu_of_cluster: np.ndarray, objective: float | None = None,
            balance_slack: int = 0) -> Placement:
    pc = np.asarray(gpu_of_cluster, dtype=np.int64)
    if pc.shape != (clustering.num_layers, clustering.num_clusters):
        raise PlacementError(
            f"gpu_of_cluster shape {pc.shape} does not match clustering "
            f"{(clustering.num_layers, clustering.num_clusters)}"
        )
    eg = np.take_along_axis(pc, clustering.assign, axis=1)
    return Placement(pc, eg, objective, balance_slack)


def from_dict(doc: dict) -> Placement:
    try:
        return Placement(
            np.array(doc["gpu_of_cluster"], dtype=np.int64),
            np.array(doc["expert_to_gpu"], dtype=np.int64),
            None if doc.get("objective") is None else float(doc["objective"]),
            int(doc.get("balance_slack", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PlacementError):
            raise
        raise PlacementError(f"malformed placement document: {exc}") from exc


def load(path: str | Path) -> Placement:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def emit(placement: Placement, path: str | Path) -> None:
    Path(path).write_text(json.dumps(placement.to_dict()) + "\n", encoding="utf-8")


def gpu_expert_counts(placement: Placement) -> np.ndarray:
    """Experts hosted per GPU, totalled over layers."""
    return np.bincount(placement.expert_to_gpu.ravel(), minlength=placement.num_gpus)


def validate(placement: Placement, clustering: Clustering, balance_slack: int | None = None) -> list[str]:
    """Violations of the placement invariants relative to ``clustering``."""
    out = []
    slack = placement.balance_slack if balance_slack is None else balance_slack
    if placement.gpu_of_cluster.shape != (clustering.num_layers, clustering.num_clusters):
        return [f"placement shape {placement.gpu_of_cluster.shape} does not match clustering"]
    expect = np.take_along_axis(placement.gpu_of_cluster, clustering.assign, axis=1)
    for l, e in np.argwhere(expect != placement.expert_to_gpu):
        out.append(f"expert_to_gpu[{l}][{e}] disagrees with gpu_of_cluster")
    L, E, G = clustering.num_layers, clustering.num_experts, clustering.num_clusters
    for g, n in enumerate(gpu_expert_counts(placement)):
        if abs(G * int(n) - E * L) > G * slack:
            out.append(f"GPU {g} hosts {n} experts; target {E * L / G} +/- {slack}")
    return out


# ------------------------------------------------------------------ cost pieces


def comm_costs(stats: RoutingStats, clustering: Clustering) -> CommCostTensor:
    """Aggregate expert-pair transitions into cluster-pair token counts."""
    if (stats.num_layers, stats.num_experts) != (clustering.num_layers, clustering.num_experts):
        raise PlacementError(
            f"trace is {stats.num_layers}x{stats.num_experts} but clustering is "
            f"{clustering.num_layers}x{clustering.num_experts} (layers x experts)"
        )
    G = clustering.num_clusters
    X = np.zeros((stats.num_layers, stats.num_experts, G), dtype=np.int64)
    for l in range(stats.num_layers):
        X[l, np.arange(stats.num_experts), clustering.assign[l]] = 1
    C = np.zeros((max(stats.num_layers - 1, 0), G, G), dtype=np.int64)
    for l in range(stats.num_layers - 1):
        C[l] = X[l].T @ stats.transitions[l] @ X[l + 1]
    return CommCostTensor(C)


def layer_pair_volumes(C: CommCostTensor, placement: Placement, l: int) -> np.ndarray:
    """Tokens dispatched between each ordered GPU pair for the step l -> l+1."""
    G = C.num_clusters
    V = np.zeros((G, G), dtype=np.int64)
    src, dst = placement.gpu_of_cluster[l], placement.gpu_of_cluster[l + 1]
    V[np.ix_(src, dst)] = C.costs[l]
    return V


def pair_max(V: np.ndarray, B: np.ndarray) -> float:
    """Largest remote ``V/B`` over ordered pairs g1 != g2; zero with a single GPU."""
    G = V.shape[0]
    if G < 2:
        return 0.0
    off = ~np.eye(G, dtype=bool)
    return float((V[off] / B[off]).max())


def objective_o2(C: CommCostTensor, placement: Placement, topology: Topology) -> float:
    """Sum over layer steps of the largest remote tokens/bandwidth ratio."""
    total = 0.0
    for l in range(C.num_transitions):
        total += pair_max(layer_pair_volumes(C, placement, l), topology.bandwidth)
    return total


# -------------------------------------------------------------------- solvers


def _perms(G: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(G))), dtype=np.int64).reshape(-1, G)


def transition_tables(C: CommCostTensor, topology: Topology, perms: np.ndarray) -> np.ndarray:
    """``table[l][i][j]`` = step cost when layer l uses perms[i] and l+1 uses perms[j]."""
    P, G = perms.shape
    out = np.zeros((C.num_transitions, P, P))
    if G < 2:
        return out
    inv = np.argsort(perms, axis=1)  # inv[i][g] = cluster on GPU g
    off = ~np.eye(G, dtype=bool)
    B = topology.bandwidth.copy()
    np.fill_diagonal(B, 1.0)  # diagonal is masked below
    chunk = max(1, 2_000_000 // (P * G * G))
    for l in range(C.num_transitions):
        c = C.costs[l]
        for s in range(0, P, chunk):
            rows = inv[s:s + chunk]
            VV = c[rows[:, None, :, None], inv[None, :, None, :]]
            ratio = np.where(off, VV / B, -np.inf)
            out[l, s:s + chunk] = ratio.max(axis=(2, 3))
    return out


def symmetry_roots(topology: Topology, perms: np.ndarray) -> np.ndarray:
    """Smallest permutation index in each orbit of the bandwidth automorphism group.

    Relabelling GPUs by an automorphism ``a`` of ``B`` (applied to every
    layer) preserves both the objective and the balance constraint. The
    group acts freely on permutations by ``p -> a o p``, so the
    lexicographically first optimum always starts at an orbit minimum.
    """
    B = topology.bandwidth
    index = {tuple(p): i for i, p in enumerate(perms.tolist())}
    autos = [a for a in perms if np.array_equal(B[np.ix_(a, a)], B)]
    roots = []
    for i, p in enumerate(perms):
        if min(index[tuple(a[p])] for a in autos) == i:
            roots.append(i)
    return np.array(roots, dtype=np.int64)


def _tol(v: float) -> float:
    return REL_TOL * abs(v)


class _Search:
    """Tables and bounds shared by the feasibility and optimization passes.

    ``h[l][i]`` is the cheapest balance-blind completion from layer ``l`` with
    perms[i], a valid lower bound for the constrained problem.
    """

    def __init__(self, C: CommCostTensor, clustering: Clustering, topology: Topology,
                 slack: int):
        G = clustering.num_clusters
        if topology.num_gpus != G:
            raise PlacementError(
                f"topology has {topology.num_gpus} GPUs but clustering has {G} clusters"
            )
        if C.num_transitions != max(clustering.num_layers - 1, 0) or (
            C.num_transitions and C.num_clusters != G
        ):
            raise PlacementError("communication cost tensor does not match clustering")
        if G > MAX_GPUS:
            raise PlacementError(
                f"exact placement enumerates G! permutations per layer; G={G} exceeds {MAX_GPUS}"
            )
        L, E = clustering.num_layers, clustering.num_experts
        if slack < 0:
            raise PlacementError("balance_slack must be non-negative")
        if slack == 0 and (E * L) % G:
            raise PlacementInfeasible(
                f"E*L = {E * L} experts cannot be split evenly over {G} GPUs at slack 0; "
                "pass a positive balance slack",
                None,
            )
        self.L, self.E, self.G = L, E, G
        self.perms = _perms(G)
        self.P = len(self.perms)
        sizes = clustering.sizes()
        inv = np.argsort(self.perms, axis=1)
        # contrib[l][i][g]: experts GPU g receives at layer l under perms[i]
        self.contrib_arr = np.stack([sizes[l][inv] for l in range(L)])
        self.contrib = [[tuple(int(x) for x in self.contrib_arr[l, i]) for i in range(self.P)]
                        for l in range(L)]
        mins = [int(s.min()) for s in sizes]
        maxs = [int(s.max()) for s in sizes]
        self.rem_min = [sum(mins[l:]) for l in range(L + 1)]
        self.rem_max = [sum(maxs[l:]) for l in range(L + 1)]
        self.table = transition_tables(C, topology, self.perms)
        h = np.zeros((L, self.P))
        for l in range(L - 2, -1, -1):
            h[l] = (self.table[l] + h[l + 1][None, :]).min(axis=1)
        self.h = h
        self.set_slack(slack)
        self.proj = self._projected_bounds()

    def set_slack(self, slack: int) -> None:
        self.slack = slack
        self.hi = self.E * self.L + self.G * slack
        self.lo = self.E * self.L - self.G * slack

    def _projected_bounds(self) -> np.ndarray | None:
        """``proj[g][l][i][c]``: cheapest completion after perms[i] at layer l when GPU g
        holds ``c`` experts so far and must end within the balance window.

        Each table enforces the balance constraint for one GPU only, so it is
        a relaxation of the full problem and a valid lower bound. Returns
        None when the tables would be too large.
        """
        G, L, P = self.G, self.L, self.P
        maxc = self.E * L
        if G < 2 or G * L * P * (maxc + 1) > 4 * 10**7:
            return None
        c = np.arange(maxc + 1)
        final = np.where((G * c <= self.hi) & (G * c >= self.lo), 0.0, np.inf)
        out = np.empty((G, L, P, maxc + 1))
        for g in range(G):
            out[g, L - 1] = final[None, :]
            for l in range(L - 2, -1, -1):
                nxt = out[g, l + 1]
                shift = self.contrib_arr[l + 1][:, g]
                S = np.full((P, maxc + 1), np.inf)
                for j in range(P):
                    k = int(shift[j])
                    S[j, : maxc + 1 - k] = nxt[j, k:]
                out[g, l] = (self.table[l][:, :, None] + S[None, :, :]).min(axis=1)
        return out

    def bound(self, l: int, perm: np.ndarray, counts: np.ndarray) -> np.ndarray:
        """Lower bound on the completion cost of states at layer ``l``."""
        b = self.h[l][perm]
        if self.proj is not None:
            for g in range(self.G):
                b = np.maximum(b, self.proj[g, l][perm, counts[..., g]])
        return b

    def balance_ok(self, counts: tuple[int, ...], next_layer: int) -> bool:
        G = self.G
        rmin, rmax = self.rem_min[next_layer], self.rem_max[next_layer]
        for c in counts:
            if G * (c + rmin) > self.hi or G * (c + rmax) < self.lo:
                return False
        return True

    def add(self, counts: tuple[int, ...], l: int, i: int) -> tuple[int, ...]:
        return tuple(a + b for a, b in zip(counts, self.contrib[l][i]))

    # ---- feasibility (cost-free) search; returns a sequence or None
    def feasible_sequence(self) -> list[int] | None:
        dead: set[tuple] = set()
        seq: list[int] = []

        def rec(l: int, counts: tuple[int, ...], prev: int | None) -> bool:
            if l == self.L:
                return True
            if (l, counts) in dead:
                return False
            if prev is None:
                order = np.argsort(self.h[0], kind="stable")
            else:
                order = np.argsort(self.table[l - 1][prev] + self.h[l], kind="stable")
            tried = set()
            for i in order.tolist():
                nc = self.add(counts, l, i)
                if nc in tried:
                    # same balance state as a cheaper sibling that already failed
                    continue
                tried.add(nc)
                if not self.balance_ok(nc, l + 1):
                    continue
                seq.append(i)
                if rec(l + 1, nc, i):
                    return True
                seq.pop()
            dead.add((l, counts))
            return False

        zero = (0,) * self.G
        return list(seq) if rec(0, zero, None) else None

    def cost_of(self, seq: list[int]) -> float:
        total = 0.0
        for l in range(len(seq) - 1):
            total += float(self.table[l][seq[l], seq[l + 1]])
        return total

    # ---- bounded layer-by-layer search over (permutation, per-GPU counts) states
    def _forward(self, thr: float, roots: np.ndarray, beam: int | None = None):
        """Expand surviving states layer by layer.

        Layer ``l`` keeps each ``(perm index, counts)`` state once, with the
        cheapest prefix cost reaching it. A child is dropped when its prefix
        cost plus ``h`` exceeds ``thr`` or when its counts can no longer be
        balanced. With ``beam`` only the most promising states survive.
        """
        G, P, L = self.G, self.P, self.L

        def balanced(counts: np.ndarray, next_layer: int) -> np.ndarray:
            rmin, rmax = self.rem_min[next_layer], self.rem_max[next_layer]
            return np.all((G * (counts + rmin) <= self.hi) & (G * (counts + rmax) >= self.lo), axis=1)

        counts = self.contrib_arr[0][roots].astype(np.int64)
        ok = (self.bound(0, roots, counts) <= thr) & balanced(counts, 1)
        layers = [(roots[ok], counts[ok], np.zeros(int(ok.sum())))]
        edges = []  # per step: (parent index, child index, step cost)
        base = self.E * L + 1
        radix = base ** np.arange(G - 1, dtype=np.int64)
        packed = P * base ** (G - 1) < 2**62
        for l in range(L - 1):
            pi, pc, pg = layers[-1]
            n = len(pi)
            if n == 0:
                return layers, edges, False
            step = self.table[l][pi]  # (n, P)
            cg = pg[:, None] + step
            mask = cg + self.h[l + 1][None, :] <= thr
            par, child = np.nonzero(mask)
            cc = pc[par] + self.contrib_arr[l + 1][child]
            keep = balanced(cc, l + 2)
            par, child, cc = par[keep], child[keep], cc[keep]
            gv = cg[par, child]
            if self.proj is not None:
                keep = gv + self.bound(l + 1, child, cc) <= thr
                par, child, cc, gv = par[keep], child[keep], cc[keep], gv[keep]
            # group identical (perm, counts) states, keeping the cheapest prefix
            if packed:
                key = child + P * (cc[:, : G - 1] @ radix)
                order = np.argsort(key, kind="stable")
                ks = key[order]
                first = np.ones(len(ks), dtype=bool)
                first[1:] = ks[1:] != ks[:-1]
            else:
                rows = np.column_stack([child, cc])
                order = np.lexsort(rows.T[::-1])
                rs = rows[order]
                first = np.ones(len(rs), dtype=bool)
                first[1:] = np.any(rs[1:] != rs[:-1], axis=1)
            starts = np.flatnonzero(first)
            inv = np.empty(len(order), dtype=np.int64)
            inv[order] = np.cumsum(first) - 1
            best = np.minimum.reduceat(gv[order], starts) if len(starts) else np.zeros(0)
            rep = order[starts]
            sp, sc = child[rep], cc[rep]
            if beam is not None and len(starts) > beam:
                score = best + self.h[l + 1][sp]
                kept = np.sort(np.argsort(score, kind="stable")[:beam])
                remap = np.full(len(starts), -1)
                remap[kept] = np.arange(len(kept))
                sel = remap[inv] >= 0
                par, child, inv = par[sel], child[sel], remap[inv[sel]]
                sp, sc, best = sp[kept], sc[kept], best[kept]
            layers.append((sp, sc, best))
            edges.append((par, inv, self.table[l][pi[par], child]))
        return layers, edges, len(layers[-1][0]) > 0

    def _walk(self, layers, edges) -> list[int]:
        """Cheapest completion per state, then the lexicographically first near-optimal path."""
        L = self.L
        f = [None] * L
        f[L - 1] = np.zeros(len(layers[L - 1][0]))
        for l in range(L - 2, -1, -1):
            par, ch, cost = edges[l]
            fl = np.full(len(layers[l][0]), np.inf)
            np.minimum.at(fl, par, cost + f[l + 1][ch])
            f[l] = fl
        total0 = layers[0][2] + f[0]
        opt = float(total0.min())
        limit = opt + _tol(opt)
        cand = np.flatnonzero(total0 <= limit)
        s = int(cand[np.argmin(layers[0][0][cand])])
        seq = [int(layers[0][0][s])]
        gsum = 0.0
        for l in range(L - 1):
            par, ch, cost = edges[l]
            sel = np.flatnonzero(par == s)
            tot = gsum + cost[sel] + f[l + 1][ch[sel]]
            good = sel[tot <= limit]
            if len(good) == 0:  # rounding between forward and backward sums
                good = sel[[int(np.argmin(tot))]]
            e = int(good[np.argmin(layers[l + 1][0][ch[good]])])
            gsum += float(cost[e])
            s = int(ch[e])
            seq.append(int(layers[l + 1][0][s]))
        return seq

    def optimize(self, incumbent: list[int], gap: float, roots: np.ndarray) -> list[int]:
        """Optimal sequence, lexicographically first among near-ties.

        Every sequence costing at most ``thr`` survives a pass at threshold
        ``thr``, so the first pass that reaches the last layer holds the
        optimum. Thresholds widen geometrically from the balance-blind lower
        bound and are capped by the incumbent, which a beam pass tightens.
        """
        upper = self.cost_of(incumbent)
        c0 = self.contrib_arr[0].astype(np.int64)
        lower = float(self.bound(0, np.arange(self.P), c0).min())
        if upper <= lower + _tol(lower):
            return self._walk(*self._forward(upper + _tol(upper), roots)[:2])
        layers, edges, ok = self._forward(upper + _tol(upper), roots, beam=2048)
        if ok:
            cand = self._walk(layers, edges)
            c = self.cost_of(cand)
            if c < upper:
                incumbent, upper = cand, c
        if gap > 0 and upper <= (1.0 + gap) * lower:
            return incumbent
        excess = 1e-3 * max(lower, upper - lower)
        while True:
            thr = min(lower + excess, upper)
            layers, edges, ok = self._forward(thr + _tol(thr), roots)
            if ok:
                return self._walk(layers, edges)
            if thr >= upper:
                raise AssertionError("exact pass lost the incumbent")
            excess *= 1.5

    def min_slack(self) -> int:
        saved = self.slack
        s = saved
        while True:
            s += 1
            self.set_slack(s)
            if self.feasible_sequence() is not None:
                self.set_slack(saved)
                return s


def _with_recursion(L: int):
    need = 4 * L + 200
    if sys.getrecursionlimit() < need:
        sys.setrecursionlimit(need)


def solve(C: CommCostTensor, clustering: Clustering, topology: Topology,
          balance_slack: int = 0, gap: float = 0.0) -> Placement:
    """Optimal balance-feasible placement (within ``gap`` relative, 0 = exact)."""
    if gap < 0:
        raise PlacementError("gap must be non-negative")
    search = _Search(C, clustering, topology, balance_slack)
    _with_recursion(search.L)
    first = search.feasible_sequence()
    if first is None:
        need = search.min_slack()
        raise PlacementInfeasible(
            f"no placement balances experts within slack {balance_slack}; "
            f"minimum achievable slack is {need}",
            need,
        )
    seq = search.optimize(first, gap, symmetry_roots(topology, search.perms))
    pc = search.perms[seq]
    placement = compose(clustering, pc, None, balance_slack)
    obj = objective_o2(C, placement, topology)
    return compose(clustering, pc, obj, balance_slack)


def solve_exhaustive(C: CommCostTensor, clustering: Clustering, topology: Topology,
                     balance_slack: int = 0) -> Placement:
    """Reference solver enumerating every permutation sequence."""
    G, L, E = clustering.num_clusters, clustering.num_layers, clustering.num_experts
    if topology.num_gpus != G:
        raise PlacementError(
            f"topology has {topology.num_gpus} GPUs but clustering has {G} clusters"
        )
    if balance_slack == 0 and (E * L) % G:
        raise PlacementInfeasible(
            f"E*L = {E * L} experts cannot be split evenly over {G} GPUs at slack 0; "
            "pass a positive balance slack",
            None,
        )
    perms = list(itertools.permutations(range(G)))
    if len(perms) ** L > EXHAUSTIVE_LIMIT:
        raise PlacementError(f"(G!)^L = {len(perms)}^{L} exceeds {EXHAUSTIVE_LIMIT}")
    sizes = clustering.sizes()
    results = []  # (total, seq) in lexicographic order
    worst_dev = []
    for seq in itertools.product(range(len(perms)), repeat=L):
        counts = [0] * G
        for l, i in enumerate(seq):
            for c, g in enumerate(perms[i]):
                counts[g] += int(sizes[l][c])
        dev = max(abs(G * n - E * L) for n in counts)
        worst_dev.append(dev)
        if dev > G * balance_slack:
            continue
        pl = compose(clustering, np.array([perms[i] for i in seq]).reshape(L, G))
        total = 0.0
        for l in range(L - 1):
            total += pair_max(layer_pair_volumes(C, pl, l), topology.bandwidth)
        results.append((total, seq))
    if not results:
        need = math.ceil(min(worst_dev) / G)
        raise PlacementInfeasible(
            f"no placement balances experts within slack {balance_slack}; "
            f"minimum achievable slack is {need}",
            need,
        )
    best = min(t for t, _ in results)
    limit = best + _tol(best)
    seq = next(s for t, s in results if t <= limit)
    pc = np.array([perms[i] for i in seq]).reshape(L, G)
    placement = compose(clustering, pc, None, balance_slack)
    return compose(clustering, pc, objective_o2(C, placement, topology), balance_slack)


def identity_placement(clustering: Clustering, balance_slack: int = 0) -> Placement:
    pc = np.tile(np.arange(clustering.num_clusters), (clustering.num_layers, 1))
    return compose(clustering, pc, None, balance_slack)


def baseline_contiguous(E: int, L: int, G: int) -> tuple[Clustering, Placement]:
    """Experts in index-contiguous blocks of E/G per GPU, the same for every layer."""
    clustering = contiguous(E, L, G)
    return clustering, identity_placement(clustering)


def scored(placement: Placement, C: CommCostTensor, topology: Topology) -> Placement:
    """Copy of ``placement`` with its objective filled in."""
    return Placement(placement.gpu_of_cluster, placement.expert_to_gpu,
                     objective_o2(C, placement, topology), placement.balance_slack)

