"""Aggregated latency / energy / area / reliability costs and bottleneck analysis.

Latency contract (shared with :mod:`npudse.funcsim`): every level is double
buffered, so transfers on each boundary overlap compute; only the first fill
of the input tiles down the hierarchy is exposed::

    latency = max(compute + prologue, max_b transfer_b)
    compute = ceil(temporal_steps / macs_per_cycle)
    transfer_b = ceil(words_b / bandwidth_b)
    prologue = sum_b ceil(first_fill_b / bandwidth_b)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .design_space import Architecture, FlowGraph, architecture, node_area
from .mapping import Schedule, boundary_volume, first_fill, padding_overhead, validate_schedule
from .validation import InvalidScheduleError
from .workload import OperatorNest

COMPUTE = "compute"
CSV_COLUMNS = (
    "latency_cycles",
    "compute_cycles",
    "prologue_cycles",
    "energy",
    "area",
    "total_fit",
    "expected_faulty_pe_fraction",
    "padding_overhead",
    "utilized_pes",
)


def transfer_cycles(words: int, bandwidth: float | None) -> int:
    if bandwidth is None or words == 0:
        return 0
    return math.ceil(Fraction(words) / Fraction(bandwidth))


def double_buffered_latency(
    temporal_steps: int,
    macs_per_cycle: int,
    fills: Sequence[int],
    words: Sequence[int],
    bandwidths: Sequence[float | None],
) -> tuple[int, int, int, list[int]]:
    """(latency, compute, prologue, per-boundary transfer cycles)."""
    compute = -(-temporal_steps // macs_per_cycle)
    prologue = sum(transfer_cycles(f, bw) for f, bw in zip(fills, bandwidths))
    xfers = [transfer_cycles(w, bw) for w, bw in zip(words, bandwidths)]
    return max([compute + prologue, *xfers]), compute, prologue, xfers


def fmt_float(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


@dataclass
class CostReport:
    latency_cycles: int
    compute_cycles: int
    prologue_cycles: int
    energy: float
    area: float
    datapaths: dict[str, int]
    datapath_energy: dict[str, float]
    volumes: dict[str, dict[str, int]]
    utilization: dict[str, float]
    node_energy: dict[str, float]
    node_area: dict[str, float]
    node_fit: dict[str, float]
    total_fit: float
    expected_faulty_pe_fraction: float
    padding_overhead: float
    utilized_pes: int
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def edp(self) -> float:
        return self.energy * self.latency_cycles

    @property
    def power(self) -> float:
        return self.energy / self.latency_cycles

    def metric(self, name: str) -> float:
        if name in ("fit", "total_fit", "fit_budget"):
            return self.total_fit
        if name in ("latency", "latency_cycles"):
            return float(self.latency_cycles)
        return float(getattr(self, name))

    def csv_row(self) -> list[str]:
        return [str(v) if isinstance(v, int) else fmt_float(v) for v in (getattr(self, c) for c in CSV_COLUMNS)]

    def to_dict(self) -> dict:
        return {
            "latency_cycles": self.latency_cycles,
            "compute_cycles": self.compute_cycles,
            "prologue_cycles": self.prologue_cycles,
            "energy": self.energy,
            "area": self.area,
            "total_fit": self.total_fit,
            "expected_faulty_pe_fraction": self.expected_faulty_pe_fraction,
            "padding_overhead": self.padding_overhead,
            "utilized_pes": self.utilized_pes,
            "datapaths": self.datapaths,
            "datapath_energy": self.datapath_energy,
            "volumes": self.volumes,
            "utilization": self.utilization,
            "extra": self.extra,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _used_pe(arch: Architecture, s: Schedule, row: int, col: int) -> bool:
    rows = next((f for a, _, f in s.spatial if a == "rows"), 1)
    cols = next((f for a, _, f in s.spatial if a == "cols"), 1)
    return row < rows and col < cols


def faulty_lane_fraction(pe_fault_rate: float, lanes_per_pe: int) -> float:
    if not 0.0 <= pe_fault_rate <= 1.0:
        raise ValueError("pe_fault_rate must lie in [0, 1]")
    return 1.0 - (1.0 - pe_fault_rate) ** lanes_per_pe


def evaluate_cost(
    d: FlowGraph,
    s: Schedule,
    nest: OperatorNest,
    pe_fault_rate: float = 0.0,
    arch: Architecture | None = None,
    check: bool = True,
) -> CostReport:
    arch = arch or architecture(d)
    if check:
        rep = validate_schedule(s, nest, arch)
        if not rep.ok:
            raise InvalidScheduleError(rep)
    L = arch.n_levels
    vols = [boundary_volume(s, nest, b) for b in range(L)]
    fills = [first_fill(s, nest, b) for b in range(L)]
    words = [sum(v.values()) for v in vols]
    bws = [b.bandwidth for b in arch.boundaries]
    latency, compute, prologue, xfers = double_buffered_latency(
        s.temporal_steps, arch.array.macs_per_cycle, fills, words, bws
    )
    lib = d.library
    steps = s.temporal_steps

    energy: dict[str, float] = {}
    util: dict[str, float] = {}
    dp_energy: dict[str, float] = {COMPUTE: steps * s.utilized_pes * arch.array.mac_energy}
    for b, bd in enumerate(arch.boundaries):
        inner = arch.levels[b - 1].energy if b > 0 else 0.0
        dp_energy[bd.id] = words[b] * (arch.levels[b].energy + inner + bd.transit_energy)
    for l, lv in enumerate(arch.levels):
        moved = words[l] + (words[l + 1] if l + 1 < L else 0)
        energy[lv.node] = lv.energy * moved
        busy = max(xfers[l], xfers[l + 1] if l + 1 < L else 0)
        util[lv.node] = min(1.0, busy / latency)
    for b, bd in enumerate(arch.boundaries):
        for t in bd.transit:
            energy[t] = lib[d.nodes[t].kind].costs.energy * words[b]
            util[t] = min(1.0, xfers[b] / latency)
    for pid, r, c in arch.array.pes:
        used = _used_pe(arch, s, r, c)
        energy[pid] = steps * arch.array.mac_energy if used else 0.0
        util[pid] = min(1.0, compute / latency) if used else 0.0
    for nid, n in d.nodes.items():
        if nid not in util:
            util[nid] = 0.0 if n.kind == "group" else 1.0
            energy.setdefault(nid, 0.0)

    areas = {nid: node_area(d, n) for nid, n in d.nodes.items()}
    fits = {}
    extra: dict[str, float] = {}
    for nid, n in d.nodes.items():
        c = lib[n.kind].costs
        fits[nid] = c.fit_rate * util[nid] * (c.harden_fit_factor if n.hardened else 1.0)
        for k, v in c.extra.items():
            extra[k] = extra.get(k, 0.0) + v
    datapaths = {COMPUTE: compute + prologue}
    for b, bd in enumerate(arch.boundaries):
        datapaths[bd.id] = xfers[b]
    return CostReport(
        latency_cycles=latency,
        compute_cycles=compute,
        prologue_cycles=prologue,
        energy=math.fsum(dp_energy.values()),
        area=math.fsum(areas.values()),
        datapaths=datapaths,
        datapath_energy=dp_energy,
        volumes={arch.boundaries[b].id: vols[b] for b in range(L - 1, -1, -1)},
        utilization=util,
        node_energy=energy,
        node_area=areas,
        node_fit=fits,
        total_fit=math.fsum(fits.values()),
        expected_faulty_pe_fraction=faulty_lane_fraction(pe_fault_rate, arch.array.macs_per_cycle),
        padding_overhead=padding_overhead(s, nest),
        utilized_pes=s.utilized_pes,
        extra=extra,
    )


def reliability_metrics(d: FlowGraph, s: Schedule, nest: OperatorNest, pe_fault_rate: float = 0.0) -> tuple[float, float]:
    """(total FIT, expected fraction of mapped MAC lanes on a faulty PE)."""
    r = evaluate_cost(d, s, nest, pe_fault_rate)
    return r.total_fit, r.expected_faulty_pe_fraction


# ------------------------------------------------------------- cost graph


@dataclass(frozen=True)
class CostNode:
    id: str
    kind: str
    energy: float
    area: float
    fit: float
    utilization: float
    governing: tuple[str, ...]


@dataclass(frozen=True)
class DatapathCost:
    id: str
    cycles: int
    energy: float
    governing: tuple[tuple[str, str], ...]  # (parameter, direction that lowers the cost)


@dataclass(frozen=True)
class CostGraph:
    nodes: Mapping[str, CostNode]
    datapaths: Mapping[str, DatapathCost]
    report: CostReport

    @property
    def energy(self) -> float:
        return math.fsum(n.energy for n in self.nodes.values())

    @property
    def latency(self) -> int:
        return max(p.cycles for p in self.datapaths.values())

    @property
    def area(self) -> float:
        return math.fsum(n.area for n in self.nodes.values())


def _pe_param(d: FlowGraph, arch: Architecture) -> str:
    top = d.nodes[arch.array.node]
    if "child.macs_per_cycle" in top.params:
        return f"{top.id}.child.macs_per_cycle"
    return f"{arch.array.pes[0][0]}.macs_per_cycle"


def _mitigations(d: FlowGraph, arch: Architecture, dp: str) -> tuple[tuple[str, str], ...]:
    if dp == COMPUTE:
        out = []
        if arch.array.node in d.nodes and d.nodes[arch.array.node].kind == "group":
            out += [(f"{arch.array.node}.rows", "+"), (f"{arch.array.node}.cols", "+")]
        out += [(_pe_param(d, arch), "+"), ("schedule.spatial_unroll", "+")]
        return tuple(out)
    bd = next(b for b in arch.boundaries if b.id == dp)
    out = [(f"{bd.src}.bandwidth", "+")]
    out += [(f"{t}.bandwidth", "+") for t in bd.transit if "bandwidth" in d.nodes[t].params]
    if bd.dst in d.nodes and d.nodes[bd.dst].kind == "buffer":
        out.append((f"{bd.dst}.size", "+"))
    out.append(("schedule.reuse_tiling", "+"))
    return tuple(out)


def build_cost_graph(d: FlowGraph, s: Schedule, nest: OperatorNest, report: CostReport | None = None) -> CostGraph:
    arch = architecture(d)
    r = report or evaluate_cost(d, s, nest, arch=arch)
    nodes = {}
    gov: dict[str, list[str]] = {}
    for dp in r.datapaths:
        for p, _ in _mitigations(d, arch, dp):
            nid = p.split(".")[0]
            gov.setdefault(nid, []).append(p)
    for nid, n in d.nodes.items():
        nodes[nid] = CostNode(
            nid, n.kind, r.node_energy.get(nid, 0.0), r.node_area[nid], r.node_fit[nid], r.utilization[nid],
            tuple(sorted(set(gov.get(nid, [])))),
        )
    # the energy a node accrues on behalf of a datapath is folded into the node totals;
    # datapath energies are an alternative partition of the same sum
    datapaths = {
        dp: DatapathCost(dp, cyc, r.datapath_energy[dp], _mitigations(d, arch, dp)) for dp, cyc in r.datapaths.items()
    }
    return CostGraph(nodes, datapaths, r)


@dataclass(frozen=True)
class BottleneckDiagnosis:
    objective: str
    dominant: str
    ratio: float
    mitigations: tuple[tuple[str, str], ...]
    contributions: Mapping[str, float]

    def explain(self) -> str:
        ratio = "inf" if math.isinf(self.ratio) else f"{self.ratio:.2f}"
        fixes = ", ".join(f"{p} {'up' if d == '+' else 'down'}" for p, d in self.mitigations)
        return f"{self.objective} dominated by {self.dominant} ({ratio}x next); mitigate: {fixes}"


def identify_bottleneck(cg: CostGraph, objective: str = "latency") -> BottleneckDiagnosis:
    if objective == "latency":
        contrib = {k: float(p.cycles) for k, p in cg.datapaths.items()}
    elif objective == "energy":
        contrib = {k: p.energy for k, p in cg.datapaths.items()}
    else:
        raise ValueError(f"bottleneck objective must be latency or energy, not {objective!r}")
    ranked = sorted(contrib, key=lambda k: (-contrib[k], k))
    top = ranked[0]
    if len(ranked) == 1:
        ratio = math.inf
    else:
        second = contrib[ranked[1]]
        ratio = 1.0 if contrib[top] == second else (math.inf if second == 0 else contrib[top] / second)
    return BottleneckDiagnosis(objective, top, ratio, cg.datapaths[top].governing, contrib)
