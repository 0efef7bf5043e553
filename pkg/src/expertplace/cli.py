"""Command-line front end: profile -> cluster -> place -> evaluate.

Every stage reads and writes plain JSON so it can run on its own::

    expertplace generate-trace --layers 32 --experts 8 --tokens 20000 --out trace.json
    expertplace cluster --trace trace.json --gpus 4 --out clustering.json
    expertplace place --trace trace.json --clustering clustering.json --gpus 4 --out placement.json
    expertplace evaluate --trace trace.json --placement placement.json --gpus 4 --out-dir report/
    expertplace pipeline --trace trace.json --gpus 4 --out-dir out/

Set ``EXPERTPLACE_LOG_LEVEL`` (e.g. ``DEBUG``) to change logging verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import cluster_opt, costmodel, place_opt, topology as topo_mod, trace
from .costmodel import CostParams

log = logging.getLogger("expertplace")

MODES = ("auto", "exact", "heuristic", "exhaustive-oracle")


class CLIError(Exception):
    pass


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


@dataclass
class PipelineConfig:
    trace: str | None = None
    topology: str | None = None
    out_dir: str = "out"
    gpus: int | None = None
    slack: int = 0
    mode: str = "auto"
    gap: float | None = None
    seed: int = 0
    bytes_per_token: float = CostParams.bytes_per_token
    compute_per_token: float = CostParams.compute_time_per_token
    layer_overhead: float = CostParams.fixed_overhead_per_layer
    nodes: int = 1
    intra_bw: float = topo_mod.NVLINK4_BW
    inter_bw: float = topo_mod.IB_400G_BW

    @classmethod
    def from_sources(cls, path: str | None, args: argparse.Namespace) -> "PipelineConfig":
        values: dict = {}
        if path:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            known = {f.name for f in fields(cls)}
            unknown = sorted(set(doc) - known)
            if unknown:
                raise CLIError(f"unknown config keys: {', '.join(unknown)}")
            values.update(doc)
        for f in fields(cls):
            v = getattr(args, f.name, None)
            if v is not None:
                values[f.name] = v
        cfg = cls(**values)
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.trace is None:
            raise CLIError("no trace given (--trace or 'trace' in the config file)")
        if not Path(self.trace).exists():
            raise CLIError(f"trace file {self.trace} does not exist")
        if self.topology is not None and not Path(self.topology).exists():
            raise CLIError(f"topology file {self.topology} does not exist")
        if self.gpus is not None and self.gpus < 1:
            raise CLIError("--gpus must be >= 1")
        if self.mode not in MODES:
            raise CLIError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.slack < 0:
            raise CLIError("--slack must be non-negative")

    def params(self) -> CostParams:
        return CostParams(self.compute_per_token, self.bytes_per_token, self.layer_overhead)

    def effective_gap(self) -> float:
        if self.gap is not None:
            return self.gap
        return place_opt.DEFAULT_GAP if self.mode == "heuristic" else 0.0


# --------------------------------------------------------------------- helpers


def _resolve_topology(path: str | None, gpus: int | None, nodes: int = 1,
                      intra_bw: float = topo_mod.NVLINK4_BW,
                      inter_bw: float = topo_mod.IB_400G_BW) -> topo_mod.Topology:
    if path:
        t = topo_mod.load(path)
        if gpus is not None and t.num_gpus != gpus:
            raise CLIError(f"topology {path} has {t.num_gpus} GPUs but --gpus is {gpus}")
        return t
    if gpus is None:
        raise CLIError("give --gpus or --topology")
    if gpus % nodes:
        raise CLIError(f"--gpus {gpus} is not divisible by --nodes {nodes}")
    return topo_mod.hierarchical(nodes, gpus // nodes, intra_bw, inter_bw)


def _check_trace_topology(stats: trace.RoutingStats, topo: topo_mod.Topology,
                          trace_path: str, topo_label: str) -> None:
    if topo.num_gpus > stats.num_experts:
        raise CLIError(
            f"trace {trace_path} has {stats.num_experts} experts per layer but topology "
            f"{topo_label} has {topo.num_gpus} GPUs; each GPU needs at least one expert"
        )


def _cluster(stats: trace.RoutingStats, G: int, mode: str) -> cluster_opt.Clustering:
    if mode in ("exact", "exhaustive-oracle"):
        return cluster_opt.solve_exact(stats, G)
    return cluster_opt.solve(stats, G, "heuristic" if mode == "heuristic" else "auto")


def _place(C, clustering, topo, slack: int, mode: str, gap: float) -> place_opt.Placement:
    if mode == "exhaustive-oracle":
        return place_opt.solve_exhaustive(C, clustering, topo, slack)
    return place_opt.solve(C, clustering, topo, slack, gap)


def _add_topology_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topology", help="topology JSON (default: built from --gpus/--nodes)")
    p.add_argument("--gpus", type=int, help="number of GPUs (= clusters per layer)")
    p.add_argument("--nodes", type=int, help="nodes for the built-in hierarchical topology")
    p.add_argument("--intra-bw", type=float, help="intra-node bandwidth, bytes/s")
    p.add_argument("--inter-bw", type=float, help="inter-node bandwidth, bytes/s")


def _add_cost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bytes-per-token", type=float, help="dispatch payload per token, bytes")
    p.add_argument("--compute-per-token", type=float, help="expert compute time per token, s")
    p.add_argument("--layer-overhead", type=float, help="fixed non-MoE time per layer, s")


def _params(args: argparse.Namespace) -> CostParams:
    d = CostParams()
    return CostParams(
        d.compute_time_per_token if args.compute_per_token is None else args.compute_per_token,
        d.bytes_per_token if args.bytes_per_token is None else args.bytes_per_token,
        d.fixed_overhead_per_layer if args.layer_overhead is None else args.layer_overhead,
    )


def _topology_from_args(args: argparse.Namespace) -> topo_mod.Topology:
    return _resolve_topology(
        args.topology, args.gpus, args.nodes or 1,
        topo_mod.NVLINK4_BW if args.intra_bw is None else args.intra_bw,
        topo_mod.IB_400G_BW if args.inter_bw is None else args.inter_bw,
    )


# -------------------------------------------------------------------- commands


def cmd_generate_trace(args: argparse.Namespace) -> int:
    spec = trace.TraceGenSpec(
        num_layers=args.layers,
        num_experts=args.experts,
        top_k=args.top_k,
        tokens=args.tokens,
        marginal_skew=args.skew,
        dependency_strength=args.dependency,
        hot_overrides=trace.hot_overrides_from_args(args.hot or []),
        seed=args.seed,
        structure_seed=args.structure_seed,
        dataset=args.dataset,
    )
    stats = trace.generate(spec)
    problems = trace.validate(stats)
    if problems:
        raise CLIError("generator produced inconsistent statistics: " + "; ".join(problems[:3]))
    trace.emit(stats, args.out)
    print(trace.summary(stats))
    for h in spec.hot_overrides:
        share = stats.load[h.layer][list(h.experts)].sum() / (stats.top_k * stats.tokens_total)
        print(f"hot layer {h.layer}: experts {list(h.experts)} carry {share:.4f} of slots")
    print(f"wrote {args.out}")
    return 0


def cmd_make_topology(args: argparse.Namespace) -> int:
    nodes = args.nodes or 1
    if args.gpus % nodes:
        raise CLIError(f"--gpus {args.gpus} is not divisible by --nodes {nodes}")
    t = topo_mod.hierarchical(
        nodes, args.gpus // nodes,
        topo_mod.NVLINK4_BW if args.intra_bw is None else args.intra_bw,
        topo_mod.IB_400G_BW if args.inter_bw is None else args.inter_bw,
    )
    topo_mod.emit(t, args.out)
    print(f"wrote {args.out} ({t.num_gpus} GPUs, {nodes} node(s))")
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    stats = trace.ingest(args.trace)
    if args.mode not in MODES:
        raise CLIError(f"unknown mode {args.mode!r}")
    c = _cluster(stats, args.gpus, args.mode)
    cluster_opt.emit(c, args.out)
    print(f"total load deviation = {c.objective:g}; wrote {args.out}")
    return 0


def cmd_place(args: argparse.Namespace) -> int:
    stats = trace.ingest(args.trace)
    clustering = cluster_opt.load(args.clustering)
    gpus = args.gpus if args.gpus is not None else clustering.num_clusters
    args.gpus = gpus
    topo = _topology_from_args(args)
    if topo.num_gpus != clustering.num_clusters:
        raise CLIError(
            f"clustering {args.clustering} has {clustering.num_clusters} clusters but "
            f"topology has {topo.num_gpus} GPUs"
        )
    gap = args.gap if args.gap is not None else (
        place_opt.DEFAULT_GAP if args.mode == "heuristic" else 0.0)
    C = place_opt.comm_costs(stats, clustering)
    pl = _place(C, clustering, topo, args.slack, args.mode, gap)
    place_opt.emit(pl, args.out)
    print(f"dispatch objective (sum of per-step max tokens/bandwidth) = {pl.objective:g}; wrote {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    stats = trace.ingest(args.trace)
    pl = place_opt.load(args.placement)
    if args.gpus is None:
        args.gpus = pl.num_gpus
    topo = _topology_from_args(args)
    clustering = pl.clustering()
    report = costmodel.evaluate(stats, clustering, pl, topo, _params(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js, cs = costmodel.write_report(report, out / args.name)
    print(f"end-to-end {report.end_to_end:.6g} s; wrote {js} and {cs}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    base = costmodel.report_from_dict(json.loads(Path(args.baseline).read_text()))
    opt = costmodel.report_from_dict(json.loads(Path(args.optimized).read_text()))
    summary = costmodel.compare(base, opt)
    doc = summary.to_dict()
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc, indent=2))
    return 0


def run_pipeline(cfg: PipelineConfig) -> costmodel.ComparisonSummary:
    """Run every stage and write all artifacts into ``cfg.out_dir``."""
    stats = trace.ingest(cfg.trace)
    topo = _resolve_topology(cfg.topology, cfg.gpus, cfg.nodes, cfg.intra_bw, cfg.inter_bw)
    G = topo.num_gpus
    _check_trace_topology(stats, topo, cfg.trace, cfg.topology or f"built-in ({G} GPUs)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.params()

    t0 = time.perf_counter()
    clustering = _cluster(stats, G, cfg.mode)
    log.info("clustering done in %.2fs (load deviation %g)", time.perf_counter() - t0, clustering.objective)
    C = place_opt.comm_costs(stats, clustering)
    t0 = time.perf_counter()
    placement = _place(C, clustering, topo, cfg.slack, cfg.mode, cfg.effective_gap())
    log.info("placement done in %.2fs (dispatch objective %g)", time.perf_counter() - t0, placement.objective)

    base_clustering, base_placement = place_opt.baseline_contiguous(
        stats.num_experts, stats.num_layers, G)
    base_clustering = cluster_opt.Clustering(
        base_clustering.num_layers, base_clustering.num_experts, G, base_clustering.assign,
        cluster_opt.objective_o1(stats, base_clustering))
    base_placement = place_opt.scored(base_placement, place_opt.comm_costs(stats, base_clustering), topo)

    report = costmodel.evaluate(stats, clustering, placement, topo, params)
    base_report = costmodel.evaluate(stats, base_clustering, base_placement, topo, params)
    summary = costmodel.compare(base_report, report)

    cluster_opt.emit(clustering, out / "clustering.json")
    place_opt.emit(placement, out / "placement.json")
    place_opt.emit(base_placement, out / "baseline_placement.json")
    costmodel.write_report(report, out / "report")
    costmodel.write_report(base_report, out / "baseline_report")
    _write_json(out / "comparison.json", summary.to_dict())
    # the output location is not a parameter of the result; leave it out so
    # identical runs into different directories stay byte-identical
    resolved = asdict(cfg)
    del resolved["out_dir"]
    resolved.update(gpus=G, gap=cfg.effective_gap())
    _write_json(out / "config.json", resolved)

    # re-ingest what was written and re-check it
    again = place_opt.load(out / "placement.json")
    problems = place_opt.validate(again, clustering)
    if problems:
        raise CLIError("emitted placement failed validation: " + "; ".join(problems))
    return summary


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = PipelineConfig.from_sources(args.config, args)
    summary = run_pipeline(cfg)
    print(f"baseline end-to-end  {summary.baseline_end_to_end:.6g} s")
    print(f"optimized end-to-end {summary.optimized_end_to_end:.6g} s")
    print(f"speedup {summary.speedup:.4f}x "
          f"(mean compute tail reduced {summary.compute_tail_mean_reduction_pct + 0.0:.1f}%, "
          f"mean all-to-all tail reduced {summary.comm_tail_mean_reduction_pct + 0.0:.1f}%)")
    print(f"artifacts in {cfg.out_dir}")
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertplace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-trace", help="simulate token-routing statistics")
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--tokens", type=int, default=20000)
    p.add_argument("--skew", type=float, default=1.0, help="Zipf exponent of expert popularity")
    p.add_argument("--dependency", type=float, default=0.5,
                   help="share of routing that follows each expert's preferred successor")
    p.add_argument("--hot", action="append", metavar="LAYER:E1,E2:FRACTION",
                   help="force a share of a layer's slots onto given experts (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--structure-seed", type=int, default=None,
                   help="seed for popularity order and successors (default: --seed)")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_trace)

    p = sub.add_parser("make-topology", help="write a (hierarchical) topology JSON")
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--nodes", type=int)
    p.add_argument("--intra-bw", type=float)
    p.add_argument("--inter-bw", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_topology)

    p = sub.add_parser("cluster", help="balance expert loads into one cluster per GPU")
    p.add_argument("--trace", required=True)
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--mode", default="auto", choices=MODES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("place", help="assign clusters to GPUs")
    p.add_argument("--trace", required=True)
    p.add_argument("--clustering", required=True)
    _add_topology_flags(p)
    p.add_argument("--slack", type=int, default=0)
    p.add_argument("--mode", default="auto", choices=MODES)
    p.add_argument("--gap", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("evaluate", help="score a placement with the cost model")
    p.add_argument("--trace", required=True)
    p.add_argument("--placement", required=True)
    _add_topology_flags(p)
    _add_cost_flags(p)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="report", help="output file stem")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="cluster, place, evaluate and compare with the baseline")
    p.add_argument("--config", help="JSON file with PipelineConfig keys; flags override it")
    p.add_argument("--trace")
    _add_topology_flags(p)
    p.add_argument("--slack", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--gap", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    _add_cost_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("compare", help="compare two cost reports")
    p.add_argument("--baseline", required=True)
    p.add_argument("--optimized", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("EXPERTPLACE_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
