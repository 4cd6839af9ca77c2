"""Model graphs, operator fusion and lowering to canonical loop nests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

SCHEMA_VERSION = 1

OPERATOR_KINDS = ("conv2d", "matmul", "elementwise", "pooling")
ELEMENTWISE_OPS = ("relu", "add", "sub", "mul", "max", "min")
POOLING_OPS = ("max", "avg")
CONV_DIMS = ("N", "K", "C", "Y", "X", "R", "S")
MATMUL_DIMS = ("M", "N", "K")
OPERANDS = ("input", "weight", "output")


class ModelError(ValueError):
    """Raised for malformed model documents or inconsistent graphs."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(f"{node}: {message}" if node else message)


@dataclass(frozen=True)
class OperatorSpec:
    name: str
    kind: str
    attributes: dict[str, Any]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    # fused elementwise ops applied to the output: ({"op": ..., "operand": tensor|None}, ...)
    epilogue: tuple[dict[str, Any], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "name": self.name,
            "kind": self.kind,
            "attributes": self.attributes,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
        }
        if self.epilogue:
            d["epilogue"] = [dict(e) for e in self.epilogue]
        return d


@dataclass(frozen=True)
class ModelGraph:
    tensors: dict[str, tuple[int, ...]]
    nodes: tuple[OperatorSpec, ...]

    @property
    def edges(self) -> list[tuple[str, str, str]]:
        """(producer, consumer, tensor) triples."""
        producer = {t: n.name for n in self.nodes for t in n.outputs}
        out = []
        for n in self.nodes:
            for t in n.inputs:
                if t in producer:
                    out.append((producer[t], n.name, t))
            for e in n.epilogue:
                t = e.get("operand")
                if t in producer:
                    out.append((producer[t], n.name, t))
        return out

    def node(self, name: str) -> OperatorSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def consumers(self, tensor: str) -> list[OperatorSpec]:
        return [
            n
            for n in self.nodes
            if tensor in n.inputs or any(e.get("operand") == tensor for e in n.epilogue)
        ]

    def graph_inputs(self) -> list[str]:
        produced = {t for n in self.nodes for t in n.outputs}
        return sorted(t for t in self.tensors if t not in produced)

    def graph_outputs(self) -> list[str]:
        consumed = {e[2] for e in self.edges}
        return [t for n in self.nodes for t in n.outputs if t not in consumed]

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SCHEMA_VERSION,
            "tensors": {k: list(v) for k, v in self.tensors.items()},
            "operators": [n.to_dict() for n in self.nodes],
        }


@dataclass(frozen=True)
class IndexExpr:
    """Affine index ``sum(coef * dim)`` into one tensor axis."""

    terms: tuple[tuple[str, int], ...]

    @property
    def dims(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.terms)

    def extent(self, tile: dict[str, int]) -> int:
        return 1 + sum(c * (tile[d] - 1) for d, c in self.terms)

    def __str__(self) -> str:
        return "+".join(d if c == 1 else f"{c}*{d}" for d, c in self.terms)


@dataclass(frozen=True)
class OperatorNest:
    name: str
    kind: str
    dims: tuple[tuple[str, int], ...]
    operands: dict[str, tuple[IndexExpr, ...]]
    reduction: frozenset[str]
    epilogue: tuple[dict[str, Any], ...] = field(default=())

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.dims)

    @property
    def bounds(self) -> dict[str, int]:
        return dict(self.dims)

    def bound(self, dim: str) -> int:
        return self.bounds[dim]

    @property
    def macs(self) -> int:
        return math.prod(b for _, b in self.dims)

    def relevant(self, operand: str) -> frozenset[str]:
        return frozenset(d for e in self.operands[operand] for d in e.dims)

    def operand_shape(self, operand: str) -> tuple[int, ...]:
        return tuple(e.extent(self.bounds) for e in self.operands[operand])


def _dims(v: Any, n: int, what: str, node: str) -> tuple[int, ...]:
    if isinstance(v, int):
        v = [v] * n
    if not isinstance(v, (list, tuple)) or len(v) != n or not all(
        isinstance(x, int) and x >= 1 for x in v
    ):
        raise ModelError(f"{what} must be {n} positive integers", node)
    return tuple(v)


def _expect_arity(op: OperatorSpec, n_in: tuple[int, ...]) -> None:
    if len(op.inputs) not in n_in or len(op.outputs) != 1:
        raise ModelError(f"{op.kind} takes {n_in} inputs and 1 output", op.name)


def infer_output_shape(op: OperatorSpec, tensors: dict[str, tuple[int, ...]]) -> tuple[int, ...]:
    """Shape rule of each operator kind; raises ModelError on mismatch."""
    for t in op.inputs:
        if t not in tensors:
            raise ModelError(f"shape mismatch: undeclared tensor {t!r}", op.name)
    shapes = [tensors[t] for t in op.inputs]
    a = op.attributes
    if op.kind == "matmul":
        _expect_arity(op, (2,))
        x, w = shapes
        if len(x) != 2 or len(w) != 2 or x[1] != w[0]:
            raise ModelError(f"shape mismatch: matmul {x} x {w}", op.name)
        m, k, n = x[0], x[1], w[1]
        for key, val in (("M", m), ("N", n), ("K", k)):
            if key in a and a[key] != val:
                raise ModelError(f"shape mismatch: attribute {key}={a[key]} but tensors give {val}", op.name)
        return (m, n)
    if op.kind == "conv2d":
        _expect_arity(op, (2,))
        x, w = shapes
        if len(x) != 4 or len(w) != 4 or x[1] != w[1]:
            raise ModelError(f"shape mismatch: conv2d input {x} weight {w}", op.name)
        sy, sx = _dims(a.get("stride", 1), 2, "stride", op.name)
        n, _, h, wd = x
        k, _, r, s = w
        if (h - r) % sy or (wd - s) % sx or h < r or wd < s:
            raise ModelError(f"shape mismatch: kernel {r}x{s} stride {sy},{sx} does not tile input {h}x{wd}", op.name)
        return (n, k, (h - r) // sy + 1, (wd - s) // sx + 1)
    if op.kind == "elementwise":
        _expect_arity(op, (1, 2))
        if a.get("op") not in ELEMENTWISE_OPS:
            raise ModelError(f"unknown elementwise op {a.get('op')!r}", op.name)
        if len(shapes) == 2:
            _broadcast_check(shapes[0], shapes[1], op.name)
        return shapes[0]
    if op.kind == "pooling":
        _expect_arity(op, (1,))
        (x,) = shapes
        if a.get("op") not in POOLING_OPS:
            raise ModelError(f"unknown pooling op {a.get('op')!r}", op.name)
        if len(x) != 4:
            raise ModelError(f"shape mismatch: pooling input {x}", op.name)
        r, s = _dims(a.get("kernel"), 2, "kernel", op.name)
        sy, sx = _dims(a.get("stride", [r, s]), 2, "stride", op.name)
        n, c, h, wd = x
        if (h - r) % sy or (wd - s) % sx or h < r or wd < s:
            raise ModelError("shape mismatch: pooling window does not tile input", op.name)
        return (n, c, (h - r) // sy + 1, (wd - s) // sx + 1)
    raise ModelError(f"unknown operator kind {op.kind!r}", op.name)


def _broadcast_check(a: tuple[int, ...], b: tuple[int, ...], node: str) -> None:
    if len(b) > len(a) or any(y not in (1, x) for x, y in zip(a[::-1], b[::-1])):
        raise ModelError(f"shape mismatch: cannot broadcast {b} onto {a}", node)


def validate_graph(g: ModelGraph) -> None:
    seen: set[str] = set()
    produced: dict[str, str] = {}
    for n in g.nodes:
        if n.name in seen:
            raise ModelError("duplicate operator name", n.name)
        seen.add(n.name)
        for t in n.outputs:
            if t in produced:
                raise ModelError(f"tensor {t!r} produced twice", n.name)
            produced[t] = n.name
    for n in g.nodes:
        for t in n.outputs:
            if t not in g.tensors:
                raise ModelError(f"shape mismatch: undeclared tensor {t!r}", n.name)
        out = infer_output_shape(n, g.tensors)
        for e in n.epilogue:
            if e.get("op") not in ELEMENTWISE_OPS:
                raise ModelError(f"unknown epilogue op {e.get('op')!r}", n.name)
            if e.get("operand") is not None:
                if e["operand"] not in g.tensors:
                    raise ModelError(f"shape mismatch: undeclared tensor {e['operand']!r}", n.name)
                _broadcast_check(out, g.tensors[e["operand"]], n.name)
        if tuple(g.tensors[n.outputs[0]]) != out:
            raise ModelError(
                f"shape mismatch: output {n.outputs[0]!r} declared {g.tensors[n.outputs[0]]}, expected {out}",
                n.name,
            )
    _topological_order(g)


def _topological_order(g: ModelGraph) -> list[OperatorSpec]:
    by_name = {n.name: n for n in g.nodes}
    deps: dict[str, set[str]] = {n.name: set() for n in g.nodes}
    for src, dst, _ in g.edges:
        deps[dst].add(src)
    order: list[OperatorSpec] = []
    done: set[str] = set()
    while len(order) < len(g.nodes):
        ready = [n for n in deps if n not in done and deps[n] <= done]
        if not ready:
            stuck = sorted(n for n in deps if n not in done)
            raise ModelError("graph has a cycle", stuck[0])
        # keep declaration order among ready nodes
        for n in g.nodes:
            if n.name in ready:
                order.append(by_name[n.name])
                done.add(n.name)
    return order


def topological_order(g: ModelGraph) -> list[OperatorSpec]:
    return _topological_order(g)


def parse_model(text: str) -> ModelGraph:
    """Parse and validate a schema-v1 model document (JSON)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != SCHEMA_VERSION:
        raise ModelError(f"malformed document: expected version {SCHEMA_VERSION}")
    if not isinstance(doc.get("tensors"), dict) or not isinstance(doc.get("operators"), list):
        raise ModelError("malformed document: 'tensors' and 'operators' required")
    tensors: dict[str, tuple[int, ...]] = {}
    for name, shape in doc["tensors"].items():
        if not isinstance(shape, list) or not shape or not all(
            isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in shape
        ):
            raise ModelError(f"malformed document: tensor {name!r} needs positive integer extents")
        tensors[name] = tuple(shape)
    nodes = []
    for i, op in enumerate(doc["operators"]):
        if not isinstance(op, dict):
            raise ModelError(f"malformed document: operator #{i} is not an object")
        name = op.get("name", f"op{i}")
        kind = op.get("kind")
        if kind not in OPERATOR_KINDS:
            raise ModelError(f"unknown operator kind {kind!r}", name)
        try:
            nodes.append(
                OperatorSpec(
                    name=name,
                    kind=kind,
                    attributes=dict(op.get("attributes", {})),
                    inputs=tuple(op["inputs"]),
                    outputs=tuple(op["outputs"]),
                    epilogue=tuple(dict(e) for e in op.get("epilogue", [])),
                )
            )
        except (KeyError, TypeError):
            raise ModelError("malformed document: operator needs 'inputs' and 'outputs'", name) from None
    g = ModelGraph(tensors=tensors, nodes=tuple(nodes))
    validate_graph(g)
    return g


def serialize_model(g: ModelGraph) -> str:
    return json.dumps(g.to_dict(), indent=2, sort_keys=True) + "\n"


def _fusable_producer(g: ModelGraph, ew: OperatorSpec) -> tuple[OperatorSpec, str | None] | None:
    producers = {t: n for n in g.nodes for t in n.outputs}
    produced_inputs = [t for t in ew.inputs if t in producers]
    if len(produced_inputs) != 1:
        return None
    src_t = produced_inputs[0]
    src = producers[src_t]
    if src.kind not in ("conv2d", "matmul") or len(g.consumers(src_t)) != 1:
        return None
    if src_t in g.graph_outputs():
        return None
    others = [t for t in ew.inputs if t != src_t]
    if len(others) == 1 and ew.inputs.index(src_t) != 0:
        # fused epilogues apply as out = op(out, operand); keep operand order
        if ew.attributes["op"] not in ("add", "mul", "max", "min"):
            return None
    return src, (others[0] if others else None)


def fuse_operators(g: ModelGraph) -> ModelGraph:
    """Absorb single-consumer elementwise successors into conv2d/matmul epilogues."""
    cur = g
    while True:
        for ew in cur.nodes:
            if ew.kind != "elementwise":
                continue
            hit = _fusable_producer(cur, ew)
            if hit is None:
                continue
            src, operand = hit
            fused = replace(
                src,
                outputs=ew.outputs,
                epilogue=src.epilogue + ({"op": ew.attributes["op"], "operand": operand},),
            )
            nodes = tuple(fused if n.name == src.name else n for n in cur.nodes if n.name != ew.name)
            dropped = src.outputs[0]
            tensors = {k: v for k, v in cur.tensors.items() if k != dropped}
            cur = ModelGraph(tensors=tensors, nodes=nodes)
            break
        else:
            return cur


def _expr(*terms: tuple[str, int]) -> IndexExpr:
    return IndexExpr(tuple(terms))


def lower_to_nest(op: OperatorSpec, tensors: dict[str, tuple[int, ...]] | None = None) -> OperatorNest:
    """Lower a conv2d/matmul to its canonical perfectly nested loop.

    ``tensors`` supplies the operand shapes; attributes alone suffice for
    matmul (``M``, ``N``, ``K``) and for conv2d when ``N, K, C, Y, X, R, S``
    are all given.
    """
    a = op.attributes
    if op.kind == "matmul":
        if tensors is not None:
            (m, k), (_, n) = tensors[op.inputs[0]], tensors[op.inputs[1]]
        else:
            m, n, k = a["M"], a["N"], a["K"]
        return OperatorNest(
            name=op.name,
            kind="matmul",
            dims=(("M", m), ("N", n), ("K", k)),
            operands={
                "input": (_expr(("M", 1)), _expr(("K", 1))),
                "weight": (_expr(("K", 1)), _expr(("N", 1))),
                "output": (_expr(("M", 1)), _expr(("N", 1))),
            },
            reduction=frozenset({"K"}),
            epilogue=op.epilogue,
        )
    if op.kind == "conv2d":
        sy, sx = _dims(a.get("stride", 1), 2, "stride", op.name)
        if tensors is not None:
            out = infer_output_shape(op, tensors)
            n, c = tensors[op.inputs[0]][:2]
            k, _, r, s = tensors[op.inputs[1]]
            y, x = out[2], out[3]
        else:
            n, k, c, y, x, r, s = (a[d] for d in CONV_DIMS)
        bounds = dict(zip(CONV_DIMS, (n, k, c, y, x, r, s)))
        return OperatorNest(
            name=op.name,
            kind="conv2d",
            dims=tuple((d, bounds[d]) for d in CONV_DIMS),
            operands={
                "weight": (_expr(("K", 1)), _expr(("C", 1)), _expr(("R", 1)), _expr(("S", 1))),
                "input": (_expr(("N", 1)), _expr(("C", 1)), _expr(("Y", sy), ("R", 1)), _expr(("X", sx), ("S", 1))),
                "output": (_expr(("N", 1)), _expr(("K", 1)), _expr(("Y", 1)), _expr(("X", 1))),
            },
            reduction=frozenset({"C", "R", "S"}),
            epilogue=op.epilogue,
        )
    raise ModelError(f"unsupported kind for lowering: {op.kind}", op.name)


def matmul_nest(m: int, n: int, k: int, name: str = "matmul") -> OperatorNest:
    return lower_to_nest(OperatorSpec(name, "matmul", {"M": m, "N": n, "K": k}, ("a", "b"), ("c",)))


def conv2d_nest(n: int, k: int, c: int, y: int, x: int, r: int, s: int, stride: int = 1, name: str = "conv") -> OperatorNest:
    attrs = dict(zip(CONV_DIMS, (n, k, c, y, x, r, s)), stride=stride)
    return lower_to_nest(OperatorSpec(name, "conv2d", attrs, ("x", "w"), ("y",)))


def lower_graph(g: ModelGraph) -> list[OperatorNest]:
    """Nests for every conv2d/matmul node, in topological order."""
    return [lower_to_nest(n, g.tensors) for n in _topological_order(g) if n.kind in ("conv2d", "matmul")]
