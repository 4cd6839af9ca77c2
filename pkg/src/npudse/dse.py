"""Design-space exploration: bottleneck-guided search and black-box baselines.

A *point* is a configured design plus one schedule per workload nest. One
evaluation is one cost-model call on a point; budgets count evaluations.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .cost import CostReport, build_cost_graph, evaluate_cost, fmt_float, identify_bottleneck
from .design_space import (
    DesignSpaceSpec,
    FlowGraph,
    architecture,
    enumerate_hyperparameters,
    enumerate_topologies,
)
from .mapping import Schedule, data_movement_volume, first_fill, formulate_mapping_space, schedule_list
from .workload import OperatorNest

METRICS = ("latency", "energy", "area", "edp", "power", "fit")
_ALIASES = {"total_fit": "fit", "fit_budget": "fit", "latency_cycles": "latency"}


def metric_name(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in METRICS:
        raise ValueError(f"unknown metric {name!r}; choose from {', '.join(METRICS)}")
    return name


@dataclass(frozen=True)
class Objectives:
    objectives: tuple[str, ...] = ("latency",)
    constraints: Mapping[str, float] = field(default_factory=dict)
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.objectives:
            raise ValueError("need at least one objective")
        object.__setattr__(self, "objectives", tuple(metric_name(o) for o in self.objectives))
        cons = {}
        for k, v in self.constraints.items():
            if not v > 0:
                raise ValueError(f"constraint bound {k}={v} must be positive")
            cons[metric_name(k)] = float(v)
        object.__setattr__(self, "constraints", cons)
        if self.weights is not None and len(self.weights) != len(self.objectives):
            raise ValueError("one weight per objective")

    def vector(self, m: Mapping[str, float]) -> tuple[float, ...]:
        return tuple(m[o] for o in self.objectives)

    def feasible(self, m: Mapping[str, float]) -> bool:
        return all(m[k] <= v for k, v in self.constraints.items())


# ---------------------------------------------------------------- points


def point_id(design: FlowGraph, schedules: Sequence[Schedule]) -> str:
    h = hashlib.sha256("\n".join(s.key() for s in schedules).encode()).hexdigest()[:12]
    return f"{design.digest()}/{h}"


@dataclass(frozen=True)
class PointCost:
    metrics: dict[str, float]
    reports: tuple[CostReport, ...]


def evaluate_point(design: FlowGraph, schedules: Sequence[Schedule], workload: Sequence[OperatorNest]) -> PointCost:
    arch = architecture(design)
    reps = tuple(evaluate_cost(design, s, n, arch=arch, check=False) for s, n in zip(schedules, workload))
    lat = float(sum(r.latency_cycles for r in reps))
    energy = math.fsum(r.energy for r in reps)
    fit = math.fsum(r.total_fit * r.latency_cycles for r in reps) / lat if lat else 0.0
    m = {
        "latency": lat,
        "energy": energy,
        "area": reps[0].area if reps else 0.0,
        "edp": energy * lat,
        "power": energy / lat if lat else 0.0,
        "fit": fit,
    }
    return PointCost(m, reps)


def _eval_task(args):
    return evaluate_point(*args)


class SearchSpace:
    """All (design, schedules) points of a design space for a workload, in canonical order."""

    def __init__(self, spec: DesignSpaceSpec, workload: Sequence[OperatorNest], mapping: Mapping[str, Any] | None = None):
        self.spec = spec
        self.workload = tuple(workload)
        opts = dict(spec.mapping)
        opts.update(mapping or {})
        self.mapping = {"orders": opts.get("orders", "all"), "spatial": opts.get("spatial", True), "padded": opts.get("padded", False)}
        self.topologies = list(enumerate_topologies(spec))
        self.designs: list[FlowGraph] = []
        self.topology_of: list[int] = []
        for ti, t in enumerate(self.topologies):
            for cfg in enumerate_hyperparameters(t, spec):
                self.designs.append(cfg)
                self.topology_of.append(ti)
        self.index = {d.digest(): i for i, d in enumerate(self.designs)}
        self._sched: dict[int, list[list[Schedule]]] = {}
        self._stats: dict[tuple[int, int], list[tuple[int, tuple[int, ...], int, int, int]]] = {}

    def schedules(self, di: int) -> list[list[Schedule]]:
        if di not in self._sched:
            d = self.designs[di]
            self._sched[di] = [schedule_list(formulate_mapping_space(n, d, **self.mapping)) for n in self.workload]
        return self._sched[di]

    def n_points(self, di: int) -> int:
        return math.prod(len(x) for x in self.schedules(di))

    @property
    def total_points(self) -> int:
        return sum(self.n_points(i) for i in range(len(self.designs)))

    def points(self) -> Iterator[tuple[int, tuple[int, ...]]]:
        for di in range(len(self.designs)):
            for combo in itertools.product(*(range(len(x)) for x in self.schedules(di))):
                yield di, combo

    def materialize(self, p: tuple[int, tuple[int, ...]]) -> tuple[FlowGraph, tuple[Schedule, ...]]:
        di, combo = p
        scheds = self.schedules(di)
        return self.designs[di], tuple(scheds[i][j] for i, j in enumerate(combo))

    def stats(self, di: int, ni: int) -> list[tuple[int, tuple[int, ...], int, int, int]]:
        """Mapping-level features per schedule: (utilized PEs, words per boundary
        outermost first, total words, temporal steps, total first-fill words)."""
        key = (di, ni)
        if key not in self._stats:
            d, nest = self.designs[di], self.workload[ni]
            arch = architecture(d)
            out = []
            for s in self.schedules(di)[ni]:
                vol = data_movement_volume(s, nest, arch)
                words = tuple(sum(v.values()) for v in vol.values())
                fill = sum(first_fill(s, nest, b) for b in range(arch.n_levels))
                out.append((s.utilized_pes, words, sum(words), s.temporal_steps, fill))
            self._stats[key] = out
        return self._stats[key]

    def heuristic_index(self, di: int, ni: int) -> int:
        """Mapper heuristic: most PEs in use, then least outer traffic, then least total traffic."""
        st = self.stats(di, ni)
        return min(range(len(st)), key=lambda j: (-st[j][0], st[j][1][0] if st[j][1] else 0, st[j][2], j))

    def heuristic_point(self, di: int) -> tuple[int, tuple[int, ...]] | None:
        if self.n_points(di) == 0:
            return None
        return di, tuple(self.heuristic_index(di, ni) for ni in range(len(self.workload)))


# ----------------------------------------------------------- front, trace


@dataclass(frozen=True)
class FrontEntry:
    id: str
    design: FlowGraph
    schedules: tuple[Schedule, ...]
    metrics: Mapping[str, float]
    vector: tuple[float, ...]


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


@dataclass
class ParetoFront:
    objectives: Objectives
    entries: list[FrontEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.sorted())

    def ids(self) -> set[str]:
        return {e.id for e in self.entries}

    def sorted(self) -> list[FrontEntry]:
        return sorted(self.entries, key=lambda e: (e.vector, e.id))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate_id", "design_hash", *METRICS])
        for e in self.sorted():
            w.writerow([e.id, e.design.digest(), *(fmt_float(e.metrics[m]) for m in METRICS)])
        return buf.getvalue()


def pareto_insert(front: ParetoFront, entry: FrontEntry) -> ParetoFront:
    """Insert ``entry`` iff nondominated; evict what it dominates. Equal costs keep the lowest id."""
    keep = []
    for e in front.entries:
        if e.id == entry.id:
            return front
        if dominates(e.vector, entry.vector):
            return front
        if e.vector == entry.vector:
            if e.id < entry.id:
                return front
            continue
        if not dominates(entry.vector, e.vector):
            keep.append(e)
    keep.append(entry)
    front.entries = keep
    return front


@dataclass
class TraceRecord:
    step: int
    evaluation: int | None
    candidate: str
    action: str
    rationale: str
    feasible: bool
    metrics: Mapping[str, float]
    dominant: str | None = None
    ratio: float | None = None
    dominant_before: float | None = None
    dominant_after: float | None = None
    accepted: bool = False

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, float):
                return fmt_float(v)
            if isinstance(v, Mapping):
                return {k: enc(x) for k, x in v.items()}
            return v

        return json.dumps({k: enc(v) for k, v in self.__dict__.items()}, sort_keys=True)


@dataclass
class SearchResult:
    front: ParetoFront
    trace: list[TraceRecord]
    evaluations: int
    space_points: int

    def trace_lines(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.trace)

    def evaluations_to_reach(self, metric: str, target: float) -> int | None:
        """Evaluations spent until a feasible point with ``metric <= target`` was first evaluated."""
        for r in self.trace:
            if r.evaluation is not None and r.feasible and r.metrics[metric] <= target:
                return r.evaluation
        return None

    def best(self) -> FrontEntry | None:
        s = self.front.sorted()
        return s[0] if s else None


# --------------------------------------------------------------- runner


class _Runner:
    """Coordinator: owns the front, trace, evaluation cache and budget."""

    def __init__(self, space: SearchSpace, obj: Objectives, budget: int | None, jobs: int):
        if budget is not None and budget < 1:
            raise ValueError("budget must be >= 1")
        self.space, self.obj, self.budget, self.jobs = space, obj, budget, jobs
        self.cache: dict[tuple, PointCost] = {}
        self.count = 0
        self.front = ParetoFront(obj)
        self.trace: list[TraceRecord] = []
        self.pool = ProcessPoolExecutor(jobs) if jobs > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    @property
    def remaining(self) -> float:
        return math.inf if self.budget is None else self.budget - self.count

    def evaluate(self, points: Sequence[tuple]) -> list[tuple[PointCost | None, int | None]]:
        """Evaluate points in order (cached points are free); stops at the budget.

        Returns (cost or None if over budget, evaluation number or None if cached).
        """
        todo, seen = [], set()
        for p in points:
            if p not in self.cache and p not in seen and len(todo) < self.remaining:
                todo.append(p)
                seen.add(p)
        args = [(*self.space.materialize(p), self.space.workload) for p in todo]
        if self.pool is not None and len(args) > 1:
            results = list(self.pool.map(_eval_task, args, chunksize=max(1, len(args) // (4 * self.jobs))))
        else:
            results = [_eval_task(a) for a in args]
        numbers = {}
        for p, r in zip(todo, results):
            self.count += 1
            self.cache[p] = r
            numbers[p] = self.count
            if self.obj.feasible(r.metrics):
                d, scheds = self.space.materialize(p)
                pareto_insert(self.front, FrontEntry(point_id(d, scheds), d, scheds, r.metrics, self.obj.vector(r.metrics)))
        out = []
        for p in points:
            if p in numbers:
                out.append((self.cache[p], numbers.pop(p)))
            else:
                out.append((self.cache.get(p), None))
        return out

    def record(self, p, cost: PointCost, number, action, rationale="", **kw) -> TraceRecord:
        d, scheds = self.space.materialize(p)
        if "dominant" not in kw and cost.reports:
            # latency bottleneck of the slowest operator
            r = max(cost.reports, key=lambda r: r.latency_cycles)
            kw["dominant"] = min(r.datapaths, key=lambda k: (-r.datapaths[k], k))
        rec = TraceRecord(
            step=len(self.trace),
            evaluation=number,
            candidate=point_id(d, scheds),
            action=action,
            rationale=rationale,
            feasible=self.obj.feasible(cost.metrics),
            metrics=dict(cost.metrics),
            **kw,
        )
        self.trace.append(rec)
        return rec

    def result(self) -> SearchResult:
        self.close()
        return SearchResult(self.front, self.trace, self.count, self.space.total_points)


# ------------------------------------------------------------ guided step


@dataclass(frozen=True)
class Edit:
    kind: str  # "param" | "schedule" | "escalate"
    target: str
    point: tuple | None
    rationale: str


@dataclass
class GuidedState:
    space: SearchSpace
    point: tuple[int, tuple[int, ...]]
    nest: int = 0  # nest whose cost graph was diagnosed
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    samples: int = 32
    tried: set = field(default_factory=set)


def _rank(param: str, v: int) -> float:
    # an unconstrained (0) bandwidth is the fastest setting
    return math.inf if param.endswith("bandwidth") and v == 0 else float(v)


def _step_param(space: SearchSpace, di: int, param: str, direction: str) -> tuple[int, int, int] | None:
    d = space.designs[di]
    nid, p = param.split(".", 1)
    if nid not in d.nodes or p not in d.nodes[nid].params:
        return None
    n = d.nodes[nid]
    cur = n.params[p]
    values = sorted(n.ranges.get(p, (cur,)), key=lambda v: _rank(p, v))
    if direction == "+":
        nxt = [v for v in values if _rank(p, v) > _rank(p, cur)]
    else:
        nxt = [v for v in reversed(values) if _rank(p, v) < _rank(p, cur)]
    for v in nxt:
        cand = d.with_params({nid: {p: v}})
        j = space.index.get(cand.digest())
        if j is not None and space.n_points(j) > 0:
            return j, cur, v
    return None


def _boundary_index(space: SearchSpace, di: int, dp: str) -> int | None:
    arch = architecture(space.designs[di])
    ids = [b.id for b in reversed(arch.boundaries)]  # outermost first, like stats()
    return ids.index(dp) if dp in ids else None


def bottleneck_guided_step(state: GuidedState, diagnosis) -> list[Edit]:
    """Candidate edits that act on the parameters mitigating the dominant datapath."""
    sp = state.space
    di, combo = state.point
    ni = state.nest
    st = sp.stats(di, ni)
    cur = combo[ni]

    def with_sched(j):
        c = list(combo)
        c[ni] = j
        return di, tuple(c)

    if diagnosis.ratio == 1.0:
        # balanced: only re-optimize the mapping
        n = len(st)
        pool = state.rng.choice(n, size=min(state.samples, n), replace=False) if n else []
        key = lambda j: (-st[j][0], st[j][1][0] if st[j][1] else 0, st[j][2], j)
        cands = sorted((int(j) for j in pool if int(j) != cur and with_sched(int(j)) not in state.tried), key=key)
        if cands:
            return [Edit("schedule", "schedule.reoptimize", with_sched(cands[0]),
                         f"{diagnosis.explain()}; balanced, re-optimize mapping")]
        return [Edit("escalate", "topology", None, f"{diagnosis.explain()}; balanced and no untried mapping left")]

    edits: list[Edit] = []
    for param, direction in diagnosis.mitigations:
        if param == "schedule.spatial_unroll":
            better = [j for j in range(len(st)) if st[j][0] > st[cur][0]]
            if better:
                j = min(better, key=lambda j: (-st[j][0], st[j][1][0] if st[j][1] else 0, st[j][2], j))
                edits.append(Edit("schedule", param, with_sched(j),
                                  f"{diagnosis.explain()}; unroll {st[cur][0]}->{st[j][0]} PEs"))
        elif param == "schedule.reuse_tiling":
            b = _boundary_index(sp, di, diagnosis.dominant)
            if b is None:
                continue
            ok = [j for j in range(len(st)) if st[j][0] >= st[cur][0] and st[j][1][b] < st[cur][1][b]]
            if ok:
                j = min(ok, key=lambda j: (st[j][1][b], st[j][2], j))
                edits.append(Edit("schedule", param, with_sched(j),
                                  f"{diagnosis.explain()}; retile for reuse, {st[cur][1][b]}->{st[j][1][b]} words"))
        else:
            step = _step_param(sp, di, param, direction)
            if step is not None:
                j, old, new = step
                p = sp.heuristic_point(j)
                edits.append(Edit("param", param, p, f"{diagnosis.explain()}; {param} {old}->{new}"))
    # re-optimize the mapping against the dominant datapath's own term
    if diagnosis.dominant == "compute":
        proxy = lambda j: (st[j][3], st[j][4])
    else:
        b = _boundary_index(sp, di, diagnosis.dominant)
        proxy = (lambda j: (st[j][1][b],)) if b is not None else None
    if proxy is not None:
        ok = [j for j in range(len(st)) if proxy(j) < proxy(cur) and with_sched(j) not in state.tried]
        if ok:
            j = min(ok, key=lambda j: (proxy(j), st[j][2], j))
            if all(e.point != with_sched(j) for e in edits):
                edits.append(Edit("schedule", "schedule.reoptimize", with_sched(j),
                                  f"{diagnosis.explain()}; re-map to shrink {diagnosis.dominant}"))
    if not edits:
        return [Edit("escalate", "topology", None, f"{diagnosis.explain()}; every mitigating parameter at its limit")]
    return edits


def _diagnose(space: SearchSpace, p, cost: PointCost, objective: str):
    d, scheds = space.materialize(p)
    ni = max(range(len(cost.reports)), key=lambda i: (cost.reports[i].latency_cycles, -i))
    cg = build_cost_graph(d, scheds[ni], space.workload[ni], cost.reports[ni])
    return ni, identify_bottleneck(cg, "energy" if objective == "energy" else "latency")


# --------------------------------------------------------------- searches


def explore(
    spec: DesignSpaceSpec,
    workload: Sequence[OperatorNest],
    obj: Objectives,
    budget: int | None = None,
    seed: int = 0,
    jobs: int = 1,
    mapping: Mapping[str, Any] | None = None,
    space: SearchSpace | None = None,
    samples: int = 32,
) -> SearchResult:
    """Bottleneck-guided search, then canonical-order coverage of what is left.

    Topologies are visited round-robin with at most ``budget // topologies``
    guided evaluations each; leftover budget enumerates unvisited points, so
    an unlimited budget yields the exhaustive front.
    """
    sp = space or SearchSpace(spec, workload, mapping)
    run = _Runner(sp, obj, budget, jobs)
    first = next(sp.points(), None)
    if first is None:
        return run.result()
    (c, n), = run.evaluate([first])
    run.record(first, c, n, "start", "first canonical candidate")
    rng = np.random.default_rng(seed)
    primary = obj.objectives[0]
    n_topo = len(sp.topologies)
    cap = math.inf if budget is None else max(1, budget // n_topo)
    for ti in range(n_topo):
        if run.remaining <= 0:
            break
        start = next((sp.heuristic_point(i) for i, t in enumerate(sp.topology_of) if t == ti and sp.n_points(i)), None)
        if start is None:
            continue
        spent0 = run.count
        (c, n), = run.evaluate([start])
        if c is None:
            break
        run.record(start, c, n, "topology", f"visit topology {ti}: {sp.topologies[ti].signature()}")
        state = GuidedState(sp, start, rng=rng, samples=samples)
        state.tried.add(start)
        cur_cost = c
        while run.remaining > 0 and run.count - spent0 < cap:
            ni, diag = _diagnose(sp, state.point, cur_cost, primary)
            state.nest = ni
            edits = [e for e in bottleneck_guided_step(state, diag)]
            if edits[0].kind == "escalate":
                run.record(state.point, cur_cost, None, "escalate", edits[0].rationale,
                           dominant=diag.dominant, ratio=diag.ratio, accepted=True)
                break
            left = cap - (run.count - spent0)
            edits = [e for e in edits if e.point not in state.tried]
            fresh = [e for e in edits if e.point not in run.cache]
            if len(fresh) > left:
                drop = {id(e) for e in fresh[int(left):]}
                edits = [e for e in edits if id(e) not in drop]
            if not edits:
                run.record(state.point, cur_cost, None, "escalate", f"{diag.explain()}; no untried edit",
                           dominant=diag.dominant, ratio=diag.ratio, accepted=True)
                break
            results = run.evaluate([e.point for e in edits])
            before = diag.contributions[diag.dominant]
            cur_feasible = obj.feasible(cur_cost.metrics)
            best = None
            for e, (rc, num) in zip(edits, results):
                state.tried.add(e.point)
                if rc is None:
                    continue
                _, after_diag = _diagnose(sp, e.point, rc, primary)
                after = after_diag.contributions.get(diag.dominant, math.inf)
                ok = obj.feasible(rc.metrics) and (
                    not cur_feasible
                    or (rc.metrics[primary] < cur_cost.metrics[primary] and after < before)
                )
                rec = run.record(e.point, rc, num, e.kind + ":" + e.target, e.rationale,
                                 dominant=diag.dominant, ratio=diag.ratio, dominant_before=before, dominant_after=after)
                if ok and (best is None or rc.metrics[primary] < best[1].metrics[primary]):
                    best = (e, rc, rec)
            if best is None:
                run.record(state.point, cur_cost, None, "escalate", f"{diag.explain()}; no improving edit",
                           dominant=diag.dominant, ratio=diag.ratio, accepted=True)
                break
            best[2].accepted = True
            state.point, cur_cost = best[0].point, best[1]
    # coverage phase
    batch: list = []
    for p in sp.points():
        if run.remaining <= 0:
            break
        if p in run.cache:
            continue
        batch.append(p)
        if len(batch) >= min(run.remaining, 64):
            _cover(run, batch)
            batch = []
    if batch and run.remaining > 0:
        _cover(run, batch)
    return run.result()


def _cover(run: _Runner, batch):
    for p, (c, n) in zip(batch, run.evaluate(batch)):
        if c is not None and n is not None:
            run.record(p, c, n, "cover", "canonical coverage")


def exhaustive(spec: DesignSpaceSpec, workload, obj: Objectives, mapping=None, space=None, jobs: int = 1) -> SearchResult:
    sp = space or SearchSpace(spec, workload, mapping)
    run = _Runner(sp, obj, None, jobs)
    pts = list(sp.points())
    for p, (c, n) in zip(pts, run.evaluate(pts)):
        run.record(p, c, n, "exhaustive")
    return run.result()


def random_search(
    spec: DesignSpaceSpec,
    workload: Sequence[OperatorNest],
    obj: Objectives,
    budget: int | None = None,
    seed: int = 0,
    jobs: int = 1,
    mapping: Mapping[str, Any] | None = None,
    space: SearchSpace | None = None,
) -> SearchResult:
    """Uniform sampling without replacement over every point of the space."""
    sp = space or SearchSpace(spec, workload, mapping)
    run = _Runner(sp, obj, budget, jobs)
    pts = list(sp.points())
    order = np.random.default_rng(seed).permutation(len(pts))
    n = len(pts) if budget is None else min(budget, len(pts))
    for s in range(0, n, 64):
        batch = [pts[i] for i in order[s : min(n, s + 64)]]
        for p, (c, num) in zip(batch, run.evaluate(batch)):
            run.record(p, c, num, "sample")
    return run.result()


def _temperature(t, k: int) -> float:
    if callable(t):
        return float(t(k))
    if isinstance(t, (tuple, list)):
        t0, alpha = t
        return t0 * alpha**k
    return float(t)


def simulated_annealing(
    spec: DesignSpaceSpec,
    workload: Sequence[OperatorNest],
    obj: Objectives,
    budget: int,
    seed: int = 0,
    temperature: float | tuple[float, float] | Callable[[int], float] = (0.2, 0.95),
    jobs: int = 1,
    mapping: Mapping[str, Any] | None = None,
    space: SearchSpace | None = None,
) -> SearchResult:
    """Metropolis search; neighbors change one design parameter or one schedule.

    The scalarized energy is the weighted sum of objectives normalized by the
    first evaluated point.
    """
    sp = space or SearchSpace(spec, workload, mapping)
    run = _Runner(sp, obj, budget, jobs)
    rng = np.random.default_rng(seed)
    live = [i for i in range(len(sp.designs)) if sp.n_points(i) > 0]
    if not live:
        return run.result()
    di = live[int(rng.integers(len(live)))]
    cur = (di, tuple(int(rng.integers(len(x))) for x in sp.schedules(di)))
    (c, n), = run.evaluate([cur])
    run.record(cur, c, n, "start", "random start", accepted=True)
    weights = np.asarray(obj.weights or [1.0] * len(obj.objectives), dtype=float)
    norm = np.array([max(abs(v), 1e-300) for v in obj.vector(c.metrics)])

    def energy(m):
        if not obj.feasible(m):
            return math.inf
        return float(np.dot(weights, np.asarray(obj.vector(m)) / norm))

    e_cur = energy(c.metrics)
    k = 0
    stall = 0
    while run.remaining > 0 and stall < 50 * max(1, len(live)):
        nb = _neighbor(sp, cur, rng)
        if nb is None:
            break
        fresh = nb not in run.cache
        (c2, n2), = run.evaluate([nb])
        if c2 is None:
            break
        stall = 0 if fresh else stall + 1
        e_new = energy(c2.metrics)
        T = _temperature(temperature, k)
        delta = e_new - e_cur
        if math.isinf(T):
            accept = True
        elif delta <= 0:
            accept = True
        elif T <= 0 or math.isinf(delta):
            accept = False
        else:
            accept = bool(rng.random() < math.exp(-delta / T))
        run.record(nb, c2, n2, "neighbor", f"T={fmt_float(T)} delta={fmt_float(delta)}", accepted=accept)
        if accept:
            cur, e_cur = nb, e_new
        k += 1
    return run.result()


def _neighbor(sp: SearchSpace, p, rng: np.random.Generator):
    di, combo = p
    d = sp.designs[di]
    moves = []
    for nid in sorted(d.nodes):
        n = d.nodes[nid]
        if n.parent is not None and d.nodes[n.parent].template is not None:
            continue
        for param in sorted(n.ranges):
            if len(n.ranges[param]) > 1:
                moves.append((nid, param))
    n_sched = sum(len(x) > 1 for x in sp.schedules(di))
    options = len(moves) + n_sched
    for _ in range(32):
        if options == 0:
            return None
        pick = int(rng.integers(options))
        if pick < len(moves):
            nid, param = moves[pick]
            vals = sorted(d.nodes[nid].ranges[param])
            i = vals.index(d.nodes[nid].params[param])
            j = i + (1 if rng.random() < 0.5 else -1)
            if not 0 <= j < len(vals):
                continue
            cand = sp.index.get(d.with_params({nid: {param: vals[j]}}).digest())
            if cand is None or sp.n_points(cand) == 0:
                continue
            scheds = sp.schedules(cand)
            # keep the same schedule when it exists on the new design
            new_combo = []
            for ni, j0 in enumerate(combo):
                old = sp.schedules(di)[ni][j0]
                try:
                    new_combo.append(scheds[ni].index(old))
                except ValueError:
                    new_combo.append(int(rng.integers(len(scheds[ni]))))
            return cand, tuple(new_combo)
        ni = [i for i, x in enumerate(sp.schedules(di)) if len(x) > 1][pick - len(moves)]
        n = len(sp.schedules(di)[ni])
        j = int(rng.integers(n - 1))
        j = j + 1 if j >= combo[ni] else j
        c = list(combo)
        c[ni] = j
        return di, tuple(c)
    return None


