"""Token-routing statistics: container, validation, JSON I/O and a synthetic generator.

A trace holds two aggregates per model:

* ``load[l][e]`` - tokens routed to expert ``e`` at layer ``l``
* ``transitions[l][e1][e2]`` - co-activation pairs between expert ``e1`` at
  layer ``l`` and expert ``e2`` at layer ``l + 1``

Under top-k routing every token contributes ``k * k`` pairs per consecutive
layer step, which keeps all conservation laws exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class TraceError(ValueError):
    """Raised for malformed trace files or inconsistent statistics."""


class InvalidSpecError(ValueError):
    """Raised when a generator spec cannot be simulated."""


def _frozen(a: Any, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.int64)
    if arr.ndim != ndim:
        raise TraceError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RoutingStats:
    num_layers: int
    num_experts: int
    top_k: int
    tokens_total: int
    load: np.ndarray
    transitions: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        L, E = self.num_layers, self.num_experts
        load = _frozen(self.load, 2, "load")
        trans = np.array(self.transitions, dtype=np.int64)
        if trans.size == 0:
            trans = trans.reshape(max(L - 1, 0), E, E)
        trans = _frozen(trans, 3, "transitions")
        if load.shape != (L, E):
            raise TraceError(f"load has shape {load.shape}, expected {(L, E)}")
        if trans.shape != (max(L - 1, 0), E, E):
            raise TraceError(
                f"transitions has shape {trans.shape}, expected {(max(L - 1, 0), E, E)}"
            )
        object.__setattr__(self, "load", load)
        object.__setattr__(self, "transitions", trans)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoutingStats):
            return NotImplemented
        return (
            (self.num_layers, self.num_experts, self.top_k, self.tokens_total)
            == (other.num_layers, other.num_experts, other.top_k, other.tokens_total)
            and np.array_equal(self.load, other.load)
            and np.array_equal(self.transitions, other.transitions)
            and self.meta == other.meta
        )

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "tokens_total": self.tokens_total,
            "load": self.load.tolist(),
            "transitions": self.transitions.tolist(),
            "meta": self.meta,
        }


def validate(stats: RoutingStats) -> list[str]:
    """Return a description of every violated invariant; empty means consistent."""
    out: list[str] = []
    L, E, k, n = stats.num_layers, stats.num_experts, stats.top_k, stats.tokens_total
    if L < 1:
        out.append(f"num_layers must be >= 1, got {L}")
    if E < 1:
        out.append(f"num_experts must be >= 1, got {E}")
    if k < 1:
        out.append(f"top_k must be >= 1, got {k}")
    if n < 0:
        out.append(f"tokens_total must be >= 0, got {n}")

    for l, e in zip(*np.nonzero(stats.load < 0)):
        out.append(f"load[{l}][{e}] is negative ({stats.load[l, e]})")
    for l, e1, e2 in zip(*np.nonzero(stats.transitions < 0)):
        out.append(f"transitions[{l}][{e1}][{e2}] is negative")

    slots = k * n
    for l in range(L):
        s = int(stats.load[l].sum())
        if s != slots:
            out.append(f"layer {l}: load sums to {s}, expected top_k*tokens_total={slots}")
    for l in range(L - 1):
        t = stats.transitions[l]
        s = int(t.sum())
        if s != k * k * n:
            out.append(
                f"transition {l}: total {s}, expected top_k^2*tokens_total={k * k * n}"
            )
        rows = t.sum(axis=1)
        for e in np.nonzero(rows != k * stats.load[l])[0]:
            out.append(
                f"transition {l}: row {e} sums to {rows[e]}, expected top_k*load[{l}][{e}]"
                f"={k * stats.load[l, e]}"
            )
        cols = t.sum(axis=0)
        for e in np.nonzero(cols != k * stats.load[l + 1])[0]:
            out.append(
                f"transition {l}: column {e} sums to {cols[e]}, expected "
                f"top_k*load[{l + 1}][{e}]={k * stats.load[l + 1, e]}"
            )
    return out


def total_variation(a: RoutingStats, b: RoutingStats) -> np.ndarray:
    """Per-layer total-variation distance between normalized load distributions."""
    if a.load.shape != b.load.shape:
        raise TraceError(f"dimension mismatch: {a.load.shape} vs {b.load.shape}")
    out = np.zeros(a.num_layers)
    for l in range(a.num_layers):
        sa, sb = a.load[l].sum(), b.load[l].sum()
        if sa == 0 and sb == 0:
            continue
        if sa == 0 or sb == 0:
            out[l] = 1.0
            continue
        out[l] = 0.5 * np.abs(a.load[l] / sa - b.load[l] / sb).sum()
    return out


# --------------------------------------------------------------------------- I/O

_INT_FIELDS = ("num_layers", "num_experts", "top_k", "tokens_total")


def _check_counts(value: Any, depth: int, name: str) -> None:
    if depth == 0:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TraceError(f"{name} must be an integer, got {value!r}")
        if value < 0:
            raise TraceError(f"{name} is negative ({value})")
        return
    if not isinstance(value, list):
        raise TraceError(f"{name} must be a list")
    for i, v in enumerate(value):
        _check_counts(v, depth - 1, f"{name}[{i}]")


def from_dict(doc: dict) -> RoutingStats:
    if not isinstance(doc, dict):
        raise TraceError("trace document must be a JSON object")
    for key in (*_INT_FIELDS, "load", "transitions"):
        if key not in doc:
            raise TraceError(f"missing field {key!r}")
    for key in _INT_FIELDS:
        _check_counts(doc[key], 0, key)
    _check_counts(doc["load"], 2, "load")
    _check_counts(doc["transitions"], 3, "transitions")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise TraceError("meta must be an object")
    try:
        stats = RoutingStats(
            num_layers=doc["num_layers"],
            num_experts=doc["num_experts"],
            top_k=doc["top_k"],
            tokens_total=doc["tokens_total"],
            load=doc["load"],
            transitions=doc["transitions"],
            meta=meta,
        )
    except TraceError:
        raise
    except ValueError as exc:  # ragged nested lists
        raise TraceError(f"inconsistent dimensions: {exc}") from exc
    problems = validate(stats)
    if problems:
        raise TraceError("trace failed validation: " + "; ".join(problems[:5]))
    return stats


def dumps(stats: RoutingStats) -> str:
    return json.dumps(stats.to_dict(), separators=(",", ":")) + "\n"


def emit(stats: RoutingStats, path: str | Path) -> None:
    Path(path).write_text(dumps(stats), encoding="utf-8")


def ingest(path: str | Path) -> RoutingStats:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)


# --------------------------------------------------------------------- generator


@dataclass(frozen=True)
class HotOverride:
    layer: int
    experts: tuple[int, ...]
    mass_fraction: float


@dataclass(frozen=True)
class TraceGenSpec:
    """Parameters of the synthetic Markov routing workload.

    ``seed`` drives per-token sampling. ``structure_seed`` drives the
    per-layer popularity order and each expert's preferred successor; when
    omitted it defaults to ``seed``. Holding ``structure_seed`` fixed while
    varying ``seed`` yields independent batches of the same workload.
    """

    num_layers: int
    num_experts: int
    top_k: int
    tokens: int
    marginal_skew: float = 0.0
    dependency_strength: float = 0.0
    hot_overrides: tuple[HotOverride, ...] = ()
    seed: int = 0
    structure_seed: int | None = None
    dataset: str = "synthetic"

    def check(self) -> None:
        if self.num_layers < 1 or self.num_experts < 1 or self.top_k < 1:
            raise InvalidSpecError("num_layers, num_experts and top_k must be >= 1")
        if self.top_k > self.num_experts:
            raise InvalidSpecError(
                f"top_k={self.top_k} exceeds num_experts={self.num_experts}"
            )
        if self.tokens < 1:
            raise InvalidSpecError(f"tokens must be >= 1, got {self.tokens}")
        if self.marginal_skew < 0:
            raise InvalidSpecError("marginal_skew must be non-negative")
        if not 0.0 <= self.dependency_strength <= 1.0:
            raise InvalidSpecError("dependency_strength must lie in [0, 1]")
        seen = set()
        for h in self.hot_overrides:
            if not 0 <= h.layer < self.num_layers:
                raise InvalidSpecError(f"hot override layer {h.layer} out of range")
            if h.layer in seen:
                raise InvalidSpecError(f"duplicate hot override for layer {h.layer}")
            seen.add(h.layer)
            if not h.experts or len(set(h.experts)) != len(h.experts):
                raise InvalidSpecError("hot override expert set must be non-empty and distinct")
            if any(not 0 <= e < self.num_experts for e in h.experts):
                raise InvalidSpecError(f"hot override experts {h.experts} out of range")
            if not 0.0 < h.mass_fraction <= 1.0:
                raise InvalidSpecError("hot override mass_fraction must lie in (0, 1]")
            hot_slots = round(h.mass_fraction * self.top_k * self.tokens)
            n_hot, n_cold = len(h.experts), self.num_experts - len(h.experts)
            lo = max(0, self.top_k - n_cold) * self.tokens
            hi = min(self.top_k, n_hot) * self.tokens
            if not lo <= hot_slots <= hi:
                raise InvalidSpecError(
                    f"hot override on layer {h.layer}: {hot_slots} hot slots not "
                    f"achievable with top_k={self.top_k} (range {lo}..{hi})"
                )

    def to_meta(self) -> dict:
        return {
            "dataset": self.dataset,
            "generator": "markov",
            "seed": self.seed,
            "structure_seed": self.seed if self.structure_seed is None else self.structure_seed,
            "tokens": self.tokens,
            "marginal_skew": self.marginal_skew,
            "dependency_strength": self.dependency_strength,
            "hot_overrides": [
                {"layer": h.layer, "experts": list(h.experts), "mass_fraction": h.mass_fraction}
                for h in self.hot_overrides
            ],
        }


def zipf_marginals(rng: np.random.Generator, L: int, E: int, skew: float) -> np.ndarray:
    """Per-layer Zipf popularity over a freshly permuted expert order."""
    weights = 1.0 / np.arange(1, E + 1) ** skew
    weights /= weights.sum()
    out = np.empty((L, E))
    for l in range(L):
        out[l, rng.permutation(E)] = weights
    return out


def _sample_sets(rng: np.random.Generator, probs: np.ndarray, fallback: np.ndarray,
                 counts: np.ndarray, allowed: np.ndarray | None = None) -> np.ndarray:
    """Draw ``counts[t]`` distinct experts per row without replacement.

    Gumbel-top-k over ``log probs`` is equivalent to sequential sampling
    without replacement. Experts with zero probability are only used once the
    support is exhausted, first ordered by ``fallback`` then uniformly.
    """
    n, E = probs.shape
    g = rng.gumbel(size=(n, E))
    with np.errstate(divide="ignore"):
        key_p = np.where(probs > 0, np.log(probs) + g, -np.inf)
        fb = np.broadcast_to(fallback, (n, E))
        key_f = np.where(fb > 0, np.log(fb) + g, -np.inf)
    tier = np.where(probs > 0, 0, np.where(fb > 0, 1, 2))
    key = np.where(tier == 0, key_p, np.where(tier == 1, key_f, g))
    if allowed is not None:
        tier = np.where(allowed, tier, 3)
    # finite keys lie well inside (-1e4, 1e4); offsetting by tier orders tiers first
    order = np.argsort(1e4 * tier - key, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(E), (n, E)), axis=1)
    return ranks < counts[:, None]


def generate(spec: TraceGenSpec) -> RoutingStats:
    """Simulate ``spec.tokens`` tokens through an L-layer Markov routing process."""
    spec.check()
    L, E, k, N = spec.num_layers, spec.num_experts, spec.top_k, spec.tokens
    struct_seed = spec.seed if spec.structure_seed is None else spec.structure_seed
    srng = np.random.default_rng([struct_seed, 0])
    rng = np.random.default_rng([spec.seed, 1])

    marg = zipf_marginals(srng, L, E, spec.marginal_skew)
    # preferred successor of expert e at layer l, for l in [0, L-2]
    succ = srng.integers(0, E, size=(max(L - 1, 0), E))
    hot = {h.layer: h for h in spec.hot_overrides}
    d = spec.dependency_strength

    load = np.zeros((L, E), dtype=np.int64)
    trans = np.zeros((max(L - 1, 0), E, E), dtype=np.int64)
    prev: np.ndarray | None = None
    for l in range(L):
        if prev is None:
            probs = np.broadcast_to(marg[0], (N, E)).copy()
        else:
            pref = np.zeros((E, E))
            pref[np.arange(E), succ[l - 1]] = 1.0
            probs = (1.0 - d) * marg[l] + d * (prev.astype(float) @ pref) / k
        if l in hot:
            cur = _sample_hot(rng, probs, marg[l], hot[l], k, N)
        else:
            cur = _sample_sets(rng, probs, marg[l], np.full(N, k))
        load[l] = cur.sum(axis=0)
        if prev is not None:
            # float64 matmul is exact for counts below 2**53 and uses BLAS
            trans[l - 1] = np.rint(prev.T.astype(float) @ cur.astype(float)).astype(np.int64)
        prev = cur

    return RoutingStats(L, E, k, N, load, trans, meta=spec.to_meta())


def _sample_hot(rng: np.random.Generator, probs: np.ndarray, marg: np.ndarray,
                h: HotOverride, k: int, N: int) -> np.ndarray:
    E = probs.shape[1]
    in_set = np.zeros(E, dtype=bool)
    in_set[list(h.experts)] = True
    hot_slots = round(h.mass_fraction * k * N)
    base, extra = divmod(hot_slots, N)
    n_hot = np.full(N, base)
    n_hot[rng.permutation(N)[:extra]] += 1
    hot_part = _sample_sets(rng, probs, marg, n_hot, allowed=np.broadcast_to(in_set, (N, E)))
    cold_part = _sample_sets(rng, probs, marg, k - n_hot, allowed=np.broadcast_to(~in_set, (N, E)))
    return (hot_part & in_set) | (cold_part & ~in_set)


def hot_overrides_from_args(items: Sequence[str]) -> tuple[HotOverride, ...]:
    """Parse ``layer:e1,e2:fraction`` strings."""
    out = []
    for item in items:
        try:
            layer, experts, frac = item.split(":")
            out.append(HotOverride(int(layer), tuple(int(e) for e in experts.split(",")), float(frac)))
        except ValueError as exc:
            raise InvalidSpecError(
                f"bad hot override {item!r}; expected LAYER:E1,E2,...:FRACTION"
            ) from exc
    return tuple(out)


def summary(stats: RoutingStats) -> str:
    """Human-readable conservation summary."""
    problems = validate(stats)
    shares = stats.load / max(stats.top_k * stats.tokens_total, 1)
    top = shares.max(axis=1)
    lines = [
        f"layers={stats.num_layers} experts={stats.num_experts} top_k={stats.top_k} "
        f"tokens={stats.tokens_total}",
        f"load per layer = {stats.top_k * stats.tokens_total} slots; "
        f"transition pairs per step = {stats.top_k ** 2 * stats.tokens_total}",
        f"max single-expert share: {top.max():.4f} (layer {int(top.argmax())}), "
        f"mean {top.mean():.4f}",
        "conservation: OK" if not problems else f"conservation: {len(problems)} violation(s)",
    ]
    return "\n".join(lines)

