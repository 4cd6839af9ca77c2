"""Tile-functional dataflow simulation of a schedule on a design.

The simulator expands the schedule into an execution table (one row per
temporal step, one column per PE), evaluates every MAC in fixed point,
and measures traffic by watching which tile each boundary has resident.
Cycle counts follow the same double-buffering contract as :mod:`npudse.cost`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .cost import double_buffered_latency
from .design_space import Architecture, FlowGraph, architecture
from .mapping import Schedule, make_schedule, validate_schedule
from .reliability.faults import FaultMap, apply_memory_faults, fault_aware_map
from .reliability.mitigations import RangeBounds, chain_skip
from .reliability.tinynet import QuantNet, TinyNet
from .validation import InvalidScheduleError
from .workload import ModelGraph, OperatorNest, matmul_nest, topological_order

OPERANDS = ("input", "weight", "output")


@dataclass
class SimResult:
    output: np.ndarray
    cycles: int
    counters: dict[str, dict[str, int]]
    log: list[str] = field(default_factory=list)
    compute_cycles: int = 0
    prologue_cycles: int = 0

    def fingerprint(self) -> bytes:
        head = json.dumps({"cycles": self.cycles, "counters": self.counters, "log": self.log}, sort_keys=True)
        return head.encode() + np.ascontiguousarray(self.output, dtype="<i8").tobytes()


@dataclass(frozen=True)
class Mitigations:
    fap: bool = False
    fault_aware_map: bool | Sequence[int] = False
    range_bounds: tuple[float, float] | None = None
    te_drop_p: float | None = None
    seed: int = 0


# ----------------------------------------------------------- execution table


@dataclass
class _Table:
    loops: list[tuple[int, str, int]]
    digits: np.ndarray  # (T, n_loops)
    idx: dict[str, np.ndarray]  # dim -> (T, sr, sc)
    valid: np.ndarray
    rows_dim: str | None
    cols_dim: str | None

    @property
    def steps(self) -> int:
        return self.digits.shape[0]


def _table(s: Schedule, nest: OperatorNest) -> _Table:
    loops = s.loops(0)
    T = math.prod(t for *_, t in loops)
    if loops:
        digits = np.stack(np.unravel_index(np.arange(T), [t for *_, t in loops]), axis=1)
    else:
        digits = np.zeros((T, 0), dtype=np.int64)
    sp = {a: (d, f) for a, d, f in s.spatial}
    rd, sr = sp.get("rows", (None, 1))
    cd, sc = sp.get("cols", (None, 1))
    idx = {}
    for i, dim in enumerate(s.dims):
        stride = s.spatial_factor(dim)
        strides = {}
        for l in range(s.n_levels):
            strides[l] = stride
            stride *= s.factors[l][i]
        base = np.zeros(T, dtype=np.int64)
        for j, (l, d, _) in enumerate(loops):
            if d == dim:
                base += digits[:, j] * strides[l]
        v = np.broadcast_to(base[:, None, None], (T, sr, sc)).copy()
        if dim == rd:
            v += np.arange(sr)[None, :, None]
        if dim == cd:
            v += np.arange(sc)[None, None, :]
        idx[dim] = v
    valid = np.ones((T, sr, sc), dtype=bool)
    for dim, b in nest.dims:
        valid &= idx[dim] < b
    return _Table(loops, digits, idx, valid, rd, cd)


def _operand_index(nest: OperatorNest, tab: _Table, op: str) -> list[np.ndarray]:
    out = []
    for e in nest.operands[op]:
        v = np.zeros_like(tab.valid, dtype=np.int64)
        for d, c in e.terms:
            v = v + c * tab.idx[d]
        out.append(v)
    return out


def _gather(a: np.ndarray, index: list[np.ndarray], valid: np.ndarray) -> np.ndarray:
    clipped = tuple(np.minimum(ix, n - 1) for ix, n in zip(index, a.shape))
    return np.where(valid, a[clipped], 0)


def _traffic(s: Schedule, nest: OperatorNest, arch: Architecture, tab: _Table, log_limit: int):
    """Per-boundary word counters and first-fill words, by residency tracking."""
    counters: dict[str, dict[str, int]] = {}
    fills: list[int] = []
    words: list[int] = []
    events: list[tuple[int, str]] = []
    op_index = {op: _operand_index(nest, tab, op) for op in OPERANDS}
    for b in range(arch.n_levels):
        inner = math.prod(t for l, _, t in tab.loops if l < b)
        per_op = {}
        for op in OPERANDS:
            # tile at level b-1: the first `inner` steps over every PE
            tile = 1
            for v in op_index[op]:
                first = v[:inner]
                tile *= int(first.max() - first.min() + 1)
            rel = nest.relevant(op)
            cols = [j for j, (l, d, _) in enumerate(tab.loops) if l >= b and d in rel]
            ident = tab.digits[:, cols]
            changed = np.ones(tab.steps, dtype=bool)
            changed[1:] = np.any(ident[1:] != ident[:-1], axis=1)
            per_op[op] = int(changed.sum()) * tile
            if log_limit:
                bid = arch.boundaries[b].id
                for t in np.flatnonzero(changed)[:log_limit]:
                    events.append((int(t), f"step {int(t)}: {'drain' if op == 'output' else 'fetch'} {op} tile over {bid}"))
            if op != "output":
                per_op.setdefault("_fill", 0)
                per_op["_fill"] += tile
        fills.append(per_op.pop("_fill"))
        words.append(sum(per_op.values()))
        counters[arch.boundaries[b].id] = per_op
    ordered = {arch.boundaries[b].id: counters[arch.boundaries[b].id] for b in range(arch.n_levels - 1, -1, -1)}
    events.sort()
    return ordered, fills, words, [e for _, e in events[:log_limit]]


def _check_inputs(nest: OperatorNest, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for op in ("input", "weight"):
        if op not in inputs:
            raise ValueError(f"missing operand {op!r}")
        a = np.asarray(inputs[op])
        want = nest.operand_shape(op)
        if a.shape != want:
            raise ValueError(f"shape mismatch: {op} has shape {a.shape}, nest expects {want}")
        if not np.issubdtype(a.dtype, np.integer):
            raise ValueError(f"{op} must be an integer (fixed-point) tensor")
        out[op] = a.astype(np.int64)
    return out


def apply_epilogue(out: np.ndarray, epilogue: Sequence[Mapping[str, Any]], tensors: Mapping[str, np.ndarray]) -> np.ndarray:
    for e in epilogue:
        op, name = e["op"], e.get("operand")
        other = None if name is None else np.asarray(tensors[name])
        if op == "relu":
            out = np.maximum(out, 0)
        elif op == "add":
            out = out + other
        elif op == "sub":
            out = out - other
        elif op == "mul":
            out = out * other
        elif op == "max":
            out = np.maximum(out, other)
        elif op == "min":
            out = np.minimum(out, other)
        else:
            raise ValueError(f"unknown epilogue op {op!r}")
    return out


def _run(d, s, nest, inputs, arch, check, keep_fn, weight_fn, log_limit):
    arch = arch or architecture(d)
    if check:
        rep = validate_schedule(s, nest, arch)
        if not rep.ok:
            raise InvalidScheduleError(rep)
    ins = _check_inputs(nest, inputs)
    if weight_fn is not None:
        ins["weight"] = weight_fn(ins["weight"])
    tab = _table(s, nest)
    x = _gather(ins["input"], _operand_index(nest, tab, "input"), tab.valid)
    w = _gather(ins["weight"], _operand_index(nest, tab, "weight"), tab.valid)
    prod = x * w
    if keep_fn is not None:
        prod = prod * keep_fn(tab)
    out = np.zeros(nest.operand_shape("output"), dtype=np.int64)
    oi = tuple(np.minimum(ix, n - 1) for ix, n in zip(_operand_index(nest, tab, "output"), out.shape))
    np.add.at(out, oi, np.where(tab.valid, prod, 0))
    out = apply_epilogue(out, nest.epilogue, inputs)
    counters, fills, words, log = _traffic(s, nest, arch, tab, log_limit)
    bws = [b.bandwidth for b in arch.boundaries]
    cycles, compute, prologue, _ = double_buffered_latency(tab.steps, arch.array.macs_per_cycle, fills, words, bws)
    return SimResult(out, cycles, counters, log, compute, prologue)


def simulate(
    d: FlowGraph,
    s: Schedule,
    nest: OperatorNest,
    inputs: Mapping[str, np.ndarray],
    arch: Architecture | None = None,
    check: bool = True,
    log_limit: int = 16,
) -> SimResult:
    """Fault-free execution; ``inputs`` maps ``input``/``weight`` (and epilogue operands) to int tensors."""
    return _run(d, s, nest, inputs, arch, check, None, None, log_limit)


def simulate_with_faults(
    d: FlowGraph,
    s: Schedule,
    nest: OperatorNest,
    inputs: Mapping[str, np.ndarray],
    fm: FaultMap,
    mitigations: Mitigations = Mitigations(),
    arch: Architecture | None = None,
    check: bool = True,
    log_limit: int = 16,
) -> SimResult:
    """Execution on a faulty array.

    Order: fault-aware column permutation, then FAP bypass of faulty MACs
    (without FAP a faulty MAC forces its outgoing partial sum to zero), then
    timing errors, then clamping of the output to ``range_bounds``.
    """
    arch = arch or architecture(d)
    if fm.shape != (arch.array.rows, arch.array.cols):
        raise ValueError(f"fault map shape {fm.shape} != array {arch.array.rows}x{arch.array.cols}")
    m = mitigations
    if m.te_drop_p is not None and not 0.0 <= m.te_drop_p <= 1.0:
        raise ValueError("te_drop_p must lie in [0, 1]")
    faulty = fm.pe_mask()
    rows, cols = fm.shape
    chained = any(a == "rows" and dim in nest.reduction for a, dim, _ in s.spatial) and arch.array.accumulate_rows

    def perm_for(tab: _Table) -> np.ndarray:
        if m.fault_aware_map is False or m.fault_aware_map is None:
            return np.arange(cols)
        if m.fault_aware_map is True:
            sal = _column_saliency(s, nest, tab, np.asarray(inputs["weight"]), rows, cols)
            return fault_aware_map(sal, fm)
        perm = np.asarray(m.fault_aware_map, dtype=int)
        if sorted(perm.tolist()) != list(range(cols)):
            raise ValueError("fault-aware mapping must be a permutation of the array columns")
        return perm

    def keep_fn(tab: _Table) -> np.ndarray:
        T, sr, sc = tab.valid.shape
        perm = perm_for(tab)
        bad = faulty[np.arange(sr)[:, None], perm[np.arange(sc)][None, :]]  # (sr, sc)
        if m.fap or not chained:
            keep = np.broadcast_to(~bad, (T, sr, sc)).copy()
        else:
            # stuck-at-zero partial sum wipes every product accumulated above it
            full = faulty[:, perm[np.arange(sc)]]
            below = np.flip(np.logical_or.accumulate(np.flip(full, 0), axis=0), 0)[:sr]
            keep = np.broadcast_to(~below, (T, sr, sc)).copy()
        if m.te_drop_p is not None:
            err = np.random.default_rng(m.seed).random((T, sr, sc)) < m.te_drop_p
            err &= keep
            keep &= ~chain_skip(err, 1)
        return keep.astype(np.int64)

    weight_fn = (lambda w: apply_memory_faults(w, fm)) if fm.memory_faults else None
    res = _run(d, s, nest, inputs, arch, check, keep_fn, weight_fn, log_limit)
    if m.range_bounds is not None:
        lo, hi = m.range_bounds
        if lo > hi:
            raise ValueError("invalid range bounds")
        res.output = np.clip(res.output, math.ceil(lo), math.floor(hi))
    return res


def _column_saliency(s, nest, tab, weight, rows, cols) -> np.ndarray:
    """(cols, rows) summed |w| landing on each logical column slot and array row."""
    T, sr, sc = tab.valid.shape
    wi = _operand_index(nest, tab, "weight")
    w = np.abs(_gather(weight.astype(np.int64), wi, tab.valid)).astype(float)
    sal = np.zeros((cols, rows))
    sal[:sc, :sr] = w.sum(axis=0).T
    return sal


# ------------------------------------------------------------- references


def reference_nest(nest: OperatorNest, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Direct evaluation of a lowered matmul/conv2d (plus epilogue)."""
    x = np.asarray(inputs["input"], dtype=np.int64)
    w = np.asarray(inputs["weight"], dtype=np.int64)
    if nest.kind == "matmul":
        out = x @ w
    elif nest.kind == "conv2d":
        b = nest.bounds
        sy = nest.operands["input"][2].terms[0][1]
        sx = nest.operands["input"][3].terms[0][1]
        win = np.lib.stride_tricks.sliding_window_view(x, (b["R"], b["S"]), axis=(2, 3))
        win = win[:, :, ::sy, ::sx]  # (N, C, Y, X, R, S)
        out = np.einsum("ncyxrs,kcrs->nkyx", win, w)
    else:
        raise ValueError(f"no reference for {nest.kind}")
    return apply_epilogue(out, nest.epilogue, inputs)


def _node_reference(op, feeds: Mapping[str, np.ndarray]) -> np.ndarray:
    a = op.attributes
    args = [np.asarray(feeds[t]) for t in op.inputs]
    if op.kind == "matmul":
        out = args[0] @ args[1]
    elif op.kind == "conv2d":
        stride = a.get("stride", 1)
        sy, sx = (stride, stride) if isinstance(stride, int) else stride
        r, s = args[1].shape[2:]
        win = np.lib.stride_tricks.sliding_window_view(args[0], (r, s), axis=(2, 3))[:, :, ::sy, ::sx]
        out = np.einsum("ncyxrs,kcrs->nkyx", win, args[1])
    elif op.kind == "elementwise":
        fn = {"relu": None, "add": np.add, "sub": np.subtract, "mul": np.multiply, "max": np.maximum, "min": np.minimum}
        out = np.maximum(args[0], 0) if a["op"] == "relu" else fn[a["op"]](args[0], args[1])
    elif op.kind == "pooling":
        k = a["kernel"]
        r, s = (k, k) if isinstance(k, int) else k
        stride = a.get("stride", [r, s])
        sy, sx = (stride, stride) if isinstance(stride, int) else stride
        win = np.lib.stride_tricks.sliding_window_view(args[0], (r, s), axis=(2, 3))[:, :, ::sy, ::sx]
        out = win.max(axis=(4, 5)) if a["op"] == "max" else win.mean(axis=(4, 5))
    else:
        raise ValueError(f"unknown operator kind {op.kind!r}")
    for e in op.epilogue:
        out = apply_epilogue(out, [e], feeds)
    return out


def execute_graph(g: ModelGraph, feeds: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate every node of ``g`` in topological order; returns all tensors."""
    env = {k: np.asarray(v) for k, v in feeds.items()}
    for op in topological_order(g):
        env[op.outputs[0]] = _node_reference(op, env)
    return env


# ---------------------------------------------------------- TinyNet driver


@dataclass(frozen=True)
class Reference:
    pass


@dataclass(frozen=True)
class Mapped:
    design: FlowGraph
    schedules: tuple[Schedule, ...] | None = None


@dataclass(frozen=True)
class Faulty:
    design: FlowGraph
    fault_map: FaultMap
    mitigations: Mitigations = Mitigations()
    bounds: RangeBounds | None = None
    schedules: tuple[Schedule, ...] | None = None


def weight_stationary_schedule(nest: OperatorNest, d: FlowGraph | Architecture) -> Schedule:
    """Matmul with K down the rows (if they accumulate) and N across the columns;
    every remaining trip iterates at the root memory with M innermost."""
    arch = d if isinstance(d, Architecture) else architecture(d)
    b = nest.bounds

    def largest_divisor(n, cap):
        return max(k for k in range(1, min(n, cap) + 1) if n % k == 0)

    spatial = []
    kr = largest_divisor(b["K"], arch.array.rows) if arch.array.accumulate_rows else 1
    nc = largest_divisor(b["N"], arch.array.cols)
    if kr > 1:
        spatial.append(("rows", "K", kr))
    if nc > 1:
        spatial.append(("cols", "N", nc))
    outer = {"N": b["N"] // nc, "K": b["K"] // kr, "M": b["M"]}
    fac = [dict() for _ in range(arch.n_levels - 1)] + [outer]
    orders = [[] for _ in range(arch.n_levels - 1)] + [[dim for dim in ("N", "K", "M") if outer[dim] > 1]]
    return make_schedule(nest, fac, orders, spatial)


def run_inference(net: TinyNet | QuantNet, X: np.ndarray, y: np.ndarray, mode=Reference()) -> float:
    """Classification accuracy of the fixed-point net under an execution mode."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty dataset")
    q = net.quantize() if isinstance(net, TinyNet) else net
    if isinstance(mode, Reference):
        return q.accuracy(X, y)
    if isinstance(mode, (Mapped, Faulty)):
        arch = architecture(mode.design)
        nests = [matmul_nest(len(X), c.shape[1], c.shape[0], name=f"fc{i}") for i, c in enumerate(q.codes)]
        scheds = mode.schedules or tuple(weight_stationary_schedule(n, arch) for n in nests)
        offsets = [q.offset(i) for i in range(q.n_layers)]

        def matmul(i, a, w):
            ins = {"input": a, "weight": w}
            if isinstance(mode, Mapped):
                return simulate(mode.design, scheds[i], nests[i], ins, arch, log_limit=0).output
            fm = mode.fault_map
            if fm.memory_faults:
                # shift the layer's memory faults to local word indices
                local = tuple((wd - offsets[i], bt, v) for wd, bt, v in fm.memory_faults if offsets[i] <= wd < offsets[i] + w.size)
                fm = FaultMap(fm.shape, fm.pe_faults, local, fm.word_width, fm.seed)
            m = Mitigations(mode.mitigations.fap, mode.mitigations.fault_aware_map, None,
                            mode.mitigations.te_drop_p, mode.mitigations.seed + i)
            return simulate_with_faults(mode.design, scheds[i], nests[i], ins, fm, m, arch, log_limit=0).output

        return q.accuracy(X, y, matmul=matmul, bounds=mode.bounds if isinstance(mode, Faulty) else None)
    raise ValueError(f"unknown execution mode {mode!r}")


# ------------------------------------------------------------- tensor I/O


def save_tensor(path: str | Path, a: np.ndarray, scale: int = 0) -> None:
    """One JSON header line, then raw little-endian data."""
    a = np.asarray(a)
    dt = a.dtype.newbyteorder("<")
    header = {"shape": list(a.shape), "dtype": dt.str, "scale": scale}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def load_tensor(path: str | Path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        data = f.read()
    a = np.frombuffer(data, dtype=np.dtype(header["dtype"])).reshape(header["shape"]).copy()
    return a, header.get("scale", 0)
