"""Mapping space of a loop nest on a configured design.

Conventions used throughout:

* storage levels are indexed innermost-first: level 0 feeds the PE array,
  the last level is the root memory;
* ``factors[l][i]`` is the temporal trip count of dim ``i`` at level ``l``;
  the spatial unroll sits below level 0;
* the tile held at level ``l`` spans the spatial tile times every temporal
  factor at levels ``<= l``; "level -1" denotes the spatial tile itself;
* boundary ``l`` moves level ``l-1`` tiles out of level ``l``. A tile is
  (re)fetched each time the indices of its operand's loops change in the
  flattened loop nest above it, so loops that do not index an operand only
  give reuse while they stay inside the innermost loop that does.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

from .design_space import Architecture, FlowGraph, architecture
from .validation import ValidationReport
from .workload import OPERANDS, OperatorNest

AXES = ("rows", "cols")
INPUT_OPERANDS = ("input", "weight")


@dataclass(frozen=True)
class Schedule:
    dims: tuple[str, ...]
    factors: tuple[tuple[int, ...], ...]
    orders: tuple[tuple[str, ...], ...]
    spatial: tuple[tuple[str, str, int], ...] = ()  # (axis, dim, unroll)
    epilogue_level: int | None = None

    @property
    def n_levels(self) -> int:
        return len(self.factors)

    def factor(self, level: int, dim: str) -> int:
        return self.factors[level][self.dims.index(dim)]

    def spatial_factor(self, dim: str) -> int:
        for _, d, f in self.spatial:
            if d == dim:
                return f
        return 1

    @property
    def utilized_pes(self) -> int:
        return math.prod(f for _, _, f in self.spatial)

    def tile(self, level: int) -> dict[str, int]:
        """Cumulative tile extents per dim held at ``level`` (``-1`` = spatial tile)."""
        out = {}
        for i, d in enumerate(self.dims):
            t = self.spatial_factor(d)
            for l in range(level + 1):
                t *= self.factors[l][i]
            out[d] = t
        return out

    def padded_bounds(self) -> dict[str, int]:
        return self.tile(self.n_levels - 1)

    @property
    def temporal_steps(self) -> int:
        return math.prod(f for row in self.factors for f in row)

    def loops(self, from_level: int = 0) -> list[tuple[int, str, int]]:
        """Flattened (level, dim, trip) loops above ``from_level``, outermost first, trips > 1."""
        out = []
        for l in range(self.n_levels - 1, from_level - 1, -1):
            order = [d for d in self.orders[l] if d in self.dims]
            order += [d for d in self.dims if d not in order]
            out.extend((l, d, self.factor(l, d)) for d in order if self.factor(l, d) > 1)
        return out

    def to_dict(self, arch: Architecture | None = None) -> dict:
        levels = []
        for l in range(self.n_levels - 1, -1, -1):
            entry = {
                "level": l,
                "factors": {d: self.factors[l][i] for i, d in enumerate(self.dims)},
                "order": list(self.orders[l]),
            }
            if arch is not None:
                entry["node"] = arch.levels[l].node
            levels.append(entry)
        d = {"dims": list(self.dims), "levels": levels, "spatial": [list(s) for s in self.spatial]}
        if self.epilogue_level is not None:
            d["epilogue_level"] = self.epilogue_level
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def key(self) -> str:
        return self.dumps()


def parse_schedule(text: str | dict) -> Schedule:
    doc = json.loads(text) if isinstance(text, str) else text
    dims = tuple(doc["dims"])
    by_level = {e["level"]: e for e in doc["levels"]}
    n = len(by_level)
    factors = tuple(tuple(int(by_level[l]["factors"].get(d, 1)) for d in dims) for l in range(n))
    orders = tuple(tuple(by_level[l].get("order", [])) for l in range(n))
    spatial = tuple((a, d, int(f)) for a, d, f in doc.get("spatial", []))
    return Schedule(dims, factors, orders, spatial, doc.get("epilogue_level"))


def make_schedule(
    nest: OperatorNest,
    factors: list[dict[str, int]],
    orders: list[list[str]] | None = None,
    spatial: list[tuple[str, str, int]] | None = None,
) -> Schedule:
    """Convenience constructor; ``factors`` listed innermost level first, missing dims = 1."""
    dims = nest.labels
    fac = tuple(tuple(int(lv.get(d, 1)) for d in dims) for lv in factors)
    if orders is None:
        orders = [[d for d in dims if lv.get(d, 1) > 1] for lv in factors]
    return Schedule(dims, fac, tuple(tuple(o) for o in orders), tuple(spatial or ()))


def outermost_schedule(nest: OperatorNest, d: FlowGraph | Architecture) -> Schedule:
    """Everything iterated at the root memory; valid on any design."""
    arch = d if isinstance(d, Architecture) else architecture(d)
    L = arch.n_levels
    fac = [dict() for _ in range(L - 1)] + [nest.bounds]
    return make_schedule(nest, fac)


# ------------------------------------------------------------ footprints


def operand_footprint(s: Schedule, nest: OperatorNest, level: int, operand: str) -> int:
    """Words of ``operand`` covered by the cumulative tile at ``level``."""
    tile = s.tile(level)
    return math.prod(e.extent(tile) for e in nest.operands[operand])


def fetch_count(s: Schedule, nest: OperatorNest, boundary: int, operand: str) -> int:
    rel = nest.relevant(operand)
    loops = s.loops(boundary)
    last = max((i for i, (_, d, _) in enumerate(loops) if d in rel), default=-1)
    return math.prod(t for _, _, t in loops[: last + 1])


def boundary_volume(s: Schedule, nest: OperatorNest, boundary: int) -> dict[str, int]:
    return {
        op: fetch_count(s, nest, boundary, op) * operand_footprint(s, nest, boundary - 1, op)
        for op in OPERANDS
    }


def data_movement_volume(s: Schedule, nest: OperatorNest, d: FlowGraph | Architecture) -> dict[str, dict[str, int]]:
    """Words per operand crossing each boundary, outermost boundary first.

    Output words count write-backs, one per residency episode of an output tile.
    """
    arch = d if isinstance(d, Architecture) else architecture(d)
    return {arch.boundaries[b].id: boundary_volume(s, nest, b) for b in range(arch.n_levels - 1, -1, -1)}


def first_fill(s: Schedule, nest: OperatorNest, boundary: int) -> int:
    """Input words needed at ``boundary`` before the first computation can start."""
    return sum(operand_footprint(s, nest, boundary - 1, op) for op in INPUT_OPERANDS)


def padding_overhead(s: Schedule, nest: OperatorNest) -> float:
    padded = math.prod(s.padded_bounds().values())
    return padded / nest.macs - 1.0


# ------------------------------------------------------------ validation


def validate_schedule(s: Schedule, nest: OperatorNest, d: FlowGraph | Architecture) -> ValidationReport:
    arch = d if isinstance(d, Architecture) else architecture(d)
    rep = ValidationReport()
    if s.dims != nest.labels:
        rep.add("structure", ["dims"], f"schedule dims {s.dims} != nest dims {nest.labels}")
        return rep
    if s.n_levels != arch.n_levels:
        rep.add("structure", ["levels"], f"schedule has {s.n_levels} levels, design has {arch.n_levels}")
        return rep
    if any(len(row) != len(s.dims) or any(f < 1 for f in row) for row in s.factors):
        rep.add("structure", ["factors"], "factors must be positive, one per dim")
        return rep
    padded = s.padded_bounds()
    for dim, b in nest.dims:
        if padded[dim] < b:
            rep.add("coverage", [dim], f"factor product {padded[dim]} < bound {b}")
    for l, order in enumerate(s.orders):
        if len(set(order)) != len(order) or not set(order) <= set(s.dims):
            rep.add("order", [f"L{l}"], f"order {order} is not a permutation of known dims")
            continue
        missing = [dim for dim in s.dims if s.factor(l, dim) > 1 and dim not in order]
        if missing:
            rep.add("order", [f"L{l}"], f"order omits looping dims {missing}")
    axes = [a for a, _, _ in s.spatial]
    sdims = [dim for _, dim, _ in s.spatial]
    if len(set(axes)) != len(axes) or len(set(sdims)) != len(sdims) or len(axes) > 2:
        rep.add("spatial", ["array"], "each axis and dim may be unrolled at most once")
    for axis, dim, f in s.spatial:
        if axis not in AXES or dim not in s.dims:
            rep.add("spatial", [axis], f"unknown axis/dim {axis}/{dim}")
            continue
        if f < 1 or f > arch.array.extent(axis):
            rep.add("spatial", [axis], f"unroll {f} of {dim} exceeds {axis} extent {arch.array.extent(axis)}")
        if dim in nest.reduction and f > 1 and not arch.array.accumulates(axis):
            rep.add("spatial_reduction", [axis], f"reduction dim {dim} on non-accumulating {axis}")
    for l, lv in enumerate(arch.levels):
        if lv.capacity is None:
            continue
        if lv.capacity == 0:
            if any(f > 1 for f in s.factors[l]):
                rep.add("capacity", [lv.node], f"level {l} has no storage; only unit factors allowed")
            continue
        for op in OPERANDS:
            words = operand_footprint(s, nest, l, op)
            if words > lv.capacity:
                rep.add("capacity", [lv.node, op], f"{op} tile needs {words} words, level {l} holds {lv.capacity}")
    return rep


# ---------------------------------------------------------- mapping space


def _divisors(n: int) -> list[int]:
    return [k for k in range(1, n + 1) if n % k == 0]


def ordered_factorizations(n: int, parts: int) -> list[tuple[int, ...]]:
    """All ordered tuples of ``parts`` positive ints whose product is ``n``."""
    if parts == 1:
        return [(n,)]
    return [(k, *rest) for k in _divisors(n) for rest in ordered_factorizations(n // k, parts - 1)]


@dataclass(frozen=True)
class MappingSpace:
    nest: OperatorNest
    arch: Architecture
    orders: str = "all"  # or "fixed"
    spatial: bool = True
    padded: bool = False
    design_id: str = ""
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @cached_property
    def spatial_options(self) -> tuple[tuple[tuple[str, str], ...], ...]:
        if not self.spatial:
            return ((),)
        arr = self.arch.array

        def ok(axis: str, dim: str) -> bool:
            return (
                arr.extent(axis) >= 2
                and self.nest.bound(dim) >= 2
                and (dim not in self.nest.reduction or arr.accumulates(axis))
            )

        preferred = ("rows", "cols") if arr.rows >= arr.cols else ("cols", "rows")
        opts: list[tuple[tuple[str, str], ...]] = [()]
        for dim in self.nest.labels:
            axis = next((a for a in preferred if ok(a, dim)), None)
            if axis is not None:
                opts.append(((axis, dim),))
        for d1, d2 in itertools.permutations(self.nest.labels, 2):
            if ok("rows", d1) and ok("cols", d2):
                opts.append((("rows", d1), ("cols", d2)))
        return tuple(opts)

    def _unrolls(self, axis: str, dim: str) -> list[int]:
        ext, b = self.arch.array.extent(axis), self.nest.bound(dim)
        if self.padded:
            return list(range(2, min(ext, b) + 1))
        return [k for k in _divisors(b) if 2 <= k <= ext]

    def _temporal(self, bound: int, s: int) -> list[tuple[int, ...]]:
        L = self.arch.n_levels
        frozen = {l for l in range(L - 1) if self.arch.levels[l].capacity == 0}
        if not self.padded:
            return [f for f in ordered_factorizations(bound // s, L) if all(f[l] == 1 for l in frozen)]
        free = [l for l in range(L - 1) if l not in frozen]
        out = []

        def rec(i: int, prod: int, acc: list[int]):
            if i == len(free):
                f = [1] * (L - 1)
                for l, k in zip(free, acc):
                    f[l] = k
                out.append((*f, -(-bound // prod)))
                return
            for k in range(1, bound // prod + 1):
                rec(i + 1, prod * k, acc + [k])

        rec(0, s, [])
        return out

    def dim_choices(self, assignment) -> list[list[tuple[int, tuple[int, ...]]]]:
        """Per dim: (spatial unroll, temporal factors per level) options."""
        amap = {dim: axis for axis, dim in assignment}
        out = []
        for dim, b in self.nest.dims:
            unrolls = self._unrolls(amap[dim], dim) if dim in amap else [1]
            out.append([(s, f) for s in unrolls for f in self._temporal(b, s)])
        return out

    def tilings(self) -> Iterator[Schedule]:
        """Valid tilings with canonical (nest-order) loop orders."""
        for assignment in self.spatial_options:
            amap = {dim: axis for axis, dim in assignment}
            choices = self.dim_choices(assignment)
            for combo in itertools.product(*choices):
                factors = tuple(tuple(c[1][l] for c in combo) for l in range(self.arch.n_levels))
                spatial = tuple(
                    (amap[dim], dim, combo[i][0]) for i, dim in enumerate(self.nest.labels) if dim in amap
                )
                spatial = tuple(sorted(spatial, key=lambda x: AXES.index(x[0])))
                orders = tuple(
                    tuple(dim for i, dim in enumerate(self.nest.labels) if factors[l][i] > 1)
                    for l in range(self.arch.n_levels)
                )
                s = Schedule(self.nest.labels, factors, orders, spatial)
                if self._fits(s):
                    yield s

    def _fits(self, s: Schedule) -> bool:
        for l, lv in enumerate(self.arch.levels):
            if lv.capacity is None or lv.capacity == 0:
                continue
            for op in OPERANDS:
                if operand_footprint(s, self.nest, l, op) > lv.capacity:
                    return False
        return True

    def orderings(self, tiling: Schedule) -> Iterator[Schedule]:
        if self.orders == "fixed":
            yield tiling
            return
        per_level = [list(itertools.permutations(o)) for o in tiling.orders]
        for combo in itertools.product(*per_level):
            yield Schedule(tiling.dims, tiling.factors, tuple(combo), tiling.spatial, tiling.epilogue_level)

    @property
    def size(self) -> int:
        return count_schedules(self)


def formulate_mapping_space(
    nest: OperatorNest,
    d: FlowGraph | Architecture,
    orders: str = "all",
    spatial: bool = True,
    padded: bool = False,
) -> MappingSpace:
    """Tilings x loop orders x spatial unrollings admissible on ``d``.

    Tilings are exact factorizations unless ``padded``, in which case inner
    factors are free and the root level takes the ceiling of the remainder.
    """
    if orders not in ("all", "fixed"):
        raise ValueError("orders must be 'all' or 'fixed'")
    arch = d if isinstance(d, Architecture) else architecture(d)
    did = d.digest() if isinstance(d, FlowGraph) else ""
    return MappingSpace(nest, arch, orders, spatial, padded, did)


def enumerate_schedules(space: MappingSpace) -> Iterator[Schedule]:
    for t in space.tilings():
        yield from space.orderings(t)


def count_schedules(space: MappingSpace) -> int:
    if "count" not in space._cache:
        total = 0
        for t in space.tilings():
            total += 1 if space.orders == "fixed" else math.prod(math.factorial(len(o)) for o in t.orders)
        space._cache["count"] = total
    return space._cache["count"]


def schedule_list(space: MappingSpace) -> list[Schedule]:
    if "list" not in space._cache:
        space._cache["list"] = list(enumerate_schedules(space))
        space._cache["count"] = len(space._cache["list"])
    return space._cache["list"]
