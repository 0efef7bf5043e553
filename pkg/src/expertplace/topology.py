"""GPU fleet model: pairwise interconnect bandwidths in bytes/sec."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NVLINK4_BW = 900e9  # H100/H200 NVLink Gen4, bytes/s
IB_400G_BW = 400e9 / 8  # ConnectX-7 400 Gb/s InfiniBand, bytes/s


class TopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Topology:
    num_gpus: int
    bandwidth: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        G = self.num_gpus
        if G < 1:
            raise TopologyError(f"num_gpus must be >= 1, got {G}")
        bw = np.array(self.bandwidth, dtype=float)
        if bw.shape != (G, G):
            raise TopologyError(f"bandwidth has shape {bw.shape}, expected {(G, G)}")
        off = ~np.eye(G, dtype=bool)
        if not np.all(np.isfinite(bw[off])) or np.any(bw[off] <= 0):
            raise TopologyError("off-diagonal bandwidths must be finite and positive")
        if not np.array_equal(bw, bw.T):
            i, j = np.argwhere(bw != bw.T)[0]
            raise TopologyError(
                f"bandwidth matrix is not symmetric: B[{i}][{j}]={bw[i, j]} "
                f"but B[{j}][{i}]={bw[j, i]}"
            )
        # the diagonal is never read; pin it for stable output
        np.fill_diagonal(bw, 0.0)
        bw.setflags(write=False)
        object.__setattr__(self, "bandwidth", bw)
        labels = tuple(self.labels)
        if labels and len(labels) != G:
            raise TopologyError(f"expected {G} labels, got {len(labels)}")
        object.__setattr__(self, "labels", labels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return (
            self.num_gpus == other.num_gpus
            and np.array_equal(self.bandwidth, other.bandwidth)
            and self.labels == other.labels
        )

    def scaled(self, factor: float) -> "Topology":
        return Topology(self.num_gpus, self.bandwidth * factor, self.labels)

    def to_dict(self) -> dict:
        return {
            "num_gpus": self.num_gpus,
            "bandwidth": self.bandwidth.tolist(),
            "labels": list(self.labels),
        }


def uniform(num_gpus: int, bw: float) -> Topology:
    if bw <= 0:
        raise TopologyError("bandwidth must be positive")
    B = np.full((num_gpus, num_gpus), float(bw))
    return Topology(num_gpus, B, tuple(f"gpu{g}" for g in range(num_gpus)))


def hierarchical(nodes: int, gpus_per_node: int, intra_bw: float, inter_bw: float) -> Topology:
    """Same-node pairs get ``intra_bw``; cross-node pairs get ``inter_bw``."""
    if nodes < 1 or gpus_per_node < 1:
        raise TopologyError("nodes and gpus_per_node must be >= 1")
    if not intra_bw >= inter_bw > 0:
        raise TopologyError("require intra_bw >= inter_bw > 0")
    G = nodes * gpus_per_node
    node = np.arange(G) // gpus_per_node
    B = np.where(node[:, None] == node[None, :], float(intra_bw), float(inter_bw))
    labels = tuple(f"node{g // gpus_per_node}/gpu{g % gpus_per_node}" for g in range(G))
    return Topology(G, B, labels)


def from_dict(doc: dict) -> Topology:
    if not isinstance(doc, dict) or "num_gpus" not in doc or "bandwidth" not in doc:
        raise TopologyError("topology document needs 'num_gpus' and 'bandwidth'")
    try:
        bw = np.array(doc["bandwidth"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise TopologyError(f"bad bandwidth matrix: {exc}") from exc
    return Topology(int(doc["num_gpus"]), bw, tuple(doc.get("labels", ())))


def load(path: str | Path) -> Topology:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TopologyError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)


def emit(topo: Topology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topo.to_dict()) + "\n", encoding="utf-8")
