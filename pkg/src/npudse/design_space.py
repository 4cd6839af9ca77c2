"""Component libraries, flow-graph designs, legality/pruning rules and enumeration.

A design is a :class:`FlowGraph`: storage nodes (``dram``, ``buffer``) chained
from a root memory down to a PE array ``group``, optionally with ``dma`` /
``noc_link`` transit nodes in between. Vertical exploration enumerates
topologies from a skeleton; horizontal exploration enumerates the parameter
values each node admits.
"""

from __future__ import annotations

import ast
import hashlib
import itertools
import json
import operator
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator, Mapping

from .validation import ValidationReport

SCHEMA_VERSION = 1
KINDS = ("compute_pe", "buffer", "dram", "noc_link", "dma", "controller", "group")
STORAGE_KINDS = ("dram", "buffer")
TRANSIT_KINDS = ("dma", "noc_link")


class DesignError(ValueError):
    pass


# ---------------------------------------------------------------- library


@dataclass(frozen=True)
class Costs:
    area: float = 0.0
    area_per_word: float = 0.0
    energy: float = 0.0
    latency: float = 1.0
    fit_rate: float = 0.0
    harden_area_factor: float = 1.0
    harden_fit_factor: float = 1.0
    extra: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ComponentDef:
    kind: str
    parameters: Mapping[str, tuple[int, ...]]
    costs: Costs

    def admits(self, param: str, value: Any) -> bool:
        return param in self.parameters and value in self.parameters[param]

    def default(self, param: str) -> int:
        return self.parameters[param][0]


@dataclass(frozen=True)
class ComponentLibrary:
    components: Mapping[str, ComponentDef]

    def __getitem__(self, kind: str) -> ComponentDef:
        try:
            return self.components[kind]
        except KeyError:
            raise DesignError(f"unknown component kind {kind!r}") from None

    def __contains__(self, kind: str) -> bool:
        return kind in self.components

    def __len__(self) -> int:
        return len(self.components)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        comps = []
        for kind in sorted(self.components):
            c = self.components[kind]
            costs = {k: getattr(c.costs, k) for k in Costs.__dataclass_fields__ if k != "extra"}
            costs["extra"] = dict(c.costs.extra)
            comps.append({"kind": kind, "parameters": {k: {"values": list(v)} for k, v in c.parameters.items()}, "costs": costs})
        return {"version": SCHEMA_VERSION, "components": comps}


def _param_values(spec: Any, where: str) -> tuple[int, ...]:
    if isinstance(spec, list):
        vals = spec
    elif isinstance(spec, dict) and "values" in spec:
        vals = spec["values"]
    elif isinstance(spec, dict) and "min" in spec and "max" in spec:
        step = spec.get("step", 1)
        if spec.get("pow2"):
            vals, v = [], spec["min"]
            while v <= spec["max"]:
                vals.append(v)
                v *= 2
        else:
            vals = list(range(spec["min"], spec["max"] + 1, step))
    else:
        raise DesignError(f"{where}: malformed parameter range {spec!r}")
    if not vals:
        raise DesignError(f"{where}: empty parameter range")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
        raise DesignError(f"{where}: parameter values must be integers")
    return tuple(vals)


def load_component_library(text: str) -> ComponentLibrary:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DesignError(f"malformed library document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != SCHEMA_VERSION or not isinstance(doc.get("components"), list):
        raise DesignError("malformed library document: need version 1 and a 'components' list")
    comps: dict[str, ComponentDef] = {}
    for entry in doc["components"]:
        kind = entry.get("kind")
        if kind not in KINDS:
            raise DesignError(f"unknown component kind {kind!r}")
        if kind in comps:
            raise DesignError(f"duplicate component kind {kind!r}")
        params = {p: _param_values(s, f"{kind}.{p}") for p, s in entry.get("parameters", {}).items()}
        raw = dict(entry.get("costs", {}))
        extra = raw.pop("extra", {})
        unknown = set(raw) - set(Costs.__dataclass_fields__)
        if unknown:
            raise DesignError(f"{kind}: unknown cost fields {sorted(unknown)}")
        costs = Costs(**{k: float(v) for k, v in raw.items()}, extra={k: float(v) for k, v in extra.items()})
        for name in Costs.__dataclass_fields__:
            if name != "extra" and getattr(costs, name) < 0:
                raise DesignError(f"{kind}: negative cost {name}={getattr(costs, name)}")
        if any(v < 0 for v in costs.extra.values()):
            raise DesignError(f"{kind}: negative extra cost")
        if not 0 < costs.harden_fit_factor <= 1:
            raise DesignError(f"{kind}: harden_fit_factor must lie in (0, 1]")
        if costs.harden_area_factor < 1:
            raise DesignError(f"{kind}: harden_area_factor must be >= 1")
        comps[kind] = ComponentDef(kind, params, costs)
    return ComponentLibrary(comps)


# -------------------------------------------------------------- flow graph


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    params: Mapping[str, int]
    hardened: bool = False
    parent: str | None = None
    # values this node may take during horizontal exploration
    ranges: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    # child description for replicated groups
    template: Mapping[str, Any] | None = None
    coord: tuple[int, int] | None = None


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    bandwidth: float | None = None


@dataclass(frozen=True)
class FlowGraph:
    nodes: Mapping[str, Node]
    edges: tuple[Edge, ...]
    root: str
    library: ComponentLibrary = field(compare=False, repr=False)

    def children(self, nid: str) -> list[Node]:
        return [n for n in self.nodes.values() if n.parent == nid]

    def descendants(self, nid: str) -> list[Node]:
        out = []
        for c in self.children(nid):
            out.append(c)
            out.extend(self.descendants(c.id))
        return out

    def depth(self, nid: str) -> int:
        kids = self.children(nid)
        return 0 if not kids else 1 + max(self.depth(k.id) for k in kids)

    def leaves(self, kind: str = "compute_pe") -> list[Node]:
        return [n for n in self.nodes.values() if n.kind == kind]

    def edge_bandwidth(self, e: Edge) -> float | None:
        if e.bandwidth is not None:
            return e.bandwidth
        bw = self.nodes[e.src].params.get("bandwidth")
        return None if bw is None or bw == 0 else float(bw)

    def signature(self) -> str:
        """Topology signature: kinds and ids along the root-to-array chain."""
        chain = _chain(self)
        return ">".join(f"{self.nodes[n].kind}:{n}" for n in chain)

    def to_dict(self) -> dict[str, Any]:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            d: dict[str, Any] = {"id": nid, "kind": n.kind, "params": dict(sorted(n.params.items()))}
            if n.hardened:
                d["hardened"] = True
            if n.parent is not None:
                d["parent"] = n.parent
            if n.coord is not None:
                d["coord"] = list(n.coord)
            nodes.append(d)
        edges = [
            {"src": e.src, "dst": e.dst, **({"bandwidth": e.bandwidth} if e.bandwidth is not None else {})}
            for e in sorted(self.edges, key=lambda e: (e.src, e.dst))
        ]
        return {"version": SCHEMA_VERSION, "root": self.root, "nodes": nodes, "edges": edges}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def with_params(self, updates: Mapping[str, Mapping[str, int]]) -> "FlowGraph":
        nodes = dict(self.nodes)
        for nid, params in updates.items():
            n = nodes[nid]
            nodes[nid] = replace(n, params={**n.params, **params})
        return _materialize(replace(self, nodes=nodes))

    def with_hardened(self, ids) -> "FlowGraph":
        ids = set(ids)
        nodes = {k: (replace(n, hardened=True) if k in ids else n) for k, n in self.nodes.items()}
        return replace(self, nodes=nodes)


ConfiguredDesign = FlowGraph


def load_design(text: str, library: ComponentLibrary) -> FlowGraph:
    """Inverse of :meth:`FlowGraph.dumps` (explicit nodes, no templates)."""
    doc = json.loads(text)
    if doc.get("version") != SCHEMA_VERSION:
        raise DesignError("malformed design document: expected version 1")
    nodes = {}
    for d in doc["nodes"]:
        if d["kind"] not in library:
            raise DesignError(f"unknown component kind {d['kind']!r}")
        nodes[d["id"]] = Node(
            id=d["id"],
            kind=d["kind"],
            params=dict(d.get("params", {})),
            hardened=bool(d.get("hardened", False)),
            parent=d.get("parent"),
            ranges={k: (v,) for k, v in d.get("params", {}).items()},
            coord=tuple(d["coord"]) if "coord" in d else None,
        )
    edges = tuple(Edge(e["src"], e["dst"], e.get("bandwidth")) for e in doc["edges"])
    g = FlowGraph(nodes, edges, doc["root"], library)
    _check_edges(g)
    return g


def _node_params(spec: Mapping[str, Any], kind: str, library: ComponentLibrary, where: str):
    comp = library[kind]
    params: dict[str, int] = {}
    ranges: dict[str, tuple[int, ...]] = {}
    given = dict(spec.get("params", {}))
    for p in sorted(set(comp.parameters) | set(given)):
        if p in given:
            v = given[p]
            vals = tuple(v) if isinstance(v, list) else (v,)
            if not vals:
                raise DesignError(f"{where}.{p}: empty parameter range")
        else:
            vals = (comp.default(p),)
        params[p] = vals[0]
        ranges[p] = vals
    return params, ranges


def _replicate(nodes: dict[str, Node], group: Node, library: ComponentLibrary) -> None:
    """(Re)create the children of a replicated group from its template."""
    for nid in [k for k, n in nodes.items() if _is_under(nodes, n, group.id)]:
        del nodes[nid]
    tmpl = group.template
    if tmpl is None:
        return
    rows, cols = group.params.get("rows", 1), group.params.get("cols", 1)
    if rows < 1 or cols < 1:
        raise DesignError(f"{group.id}: replication count must be >= 1 (rows={rows}, cols={cols})")
    kind = tmpl.get("kind", "compute_pe")
    prefix = "pe" if kind == "compute_pe" else "g"
    base = group.coord or (0, 0)
    for r in range(rows):
        for c in range(cols):
            cid = f"{group.id}/{prefix}[{r},{c}]"
            params, ranges = _node_params(tmpl, kind, library, cid)
            child = Node(cid, kind, params, False, group.id, ranges, tmpl.get("replicate"), None)
            if kind == "group":
                sub_r, sub_c = params.get("rows", 1), params.get("cols", 1)
                child = replace(child, coord=(base[0] + r * sub_r, base[1] + c * sub_c))
                nodes[cid] = child
                _replicate(nodes, child, library)
            else:
                child = replace(child, coord=(base[0] + r, base[1] + c))
                nodes[cid] = child


def _is_under(nodes: Mapping[str, Node], n: Node, gid: str) -> bool:
    p = n.parent
    while p is not None:
        if p == gid:
            return True
        p = nodes[p].parent if p in nodes else None
    return False


def _materialize(g: FlowGraph) -> FlowGraph:
    nodes = dict(g.nodes)
    tops = [n for n in nodes.values() if n.kind == "group" and n.template is not None and n.parent is None]
    for grp in tops:
        # templated child params come from the group's pseudo-params "child.<p>"
        tmpl = dict(grp.template)
        child_params = {k[len("child."):]: v for k, v in grp.params.items() if k.startswith("child.")}
        if child_params:
            tmpl["params"] = {**tmpl.get("params", {}), **child_params}
        grp = replace(grp, template=tmpl, coord=(0, 0))
        nodes[grp.id] = grp
        _replicate(nodes, grp, g.library)
    return replace(g, nodes=nodes)


def _check_edges(g: FlowGraph) -> None:
    for e in g.edges:
        for end in (e.src, e.dst):
            if end not in g.nodes:
                raise DesignError(f"dangling edge {e.src}->{e.dst}: no node {end!r}")
    if g.root not in g.nodes:
        raise DesignError(f"root {g.root!r} is not a node")


def build_flow_graph(desc: Mapping[str, Any] | str, library: ComponentLibrary) -> FlowGraph:
    """Build a flow graph from a structural description.

    Groups either list explicit children (nodes with ``parent``) or carry a
    ``replicate`` template instantiated ``rows x cols`` times.
    """
    if isinstance(desc, str):
        desc = json.loads(desc)
    nodes: dict[str, Node] = {}
    for spec in desc["nodes"]:
        nid, kind = spec["id"], spec["kind"]
        if kind not in library:
            raise DesignError(f"unknown component kind {kind!r} (node {nid})")
        if nid in nodes:
            raise DesignError(f"duplicate node id {nid!r}")
        params, ranges = _node_params(spec, kind, library, nid)
        tmpl = spec.get("replicate")
        if tmpl is not None:
            _check_template(tmpl, library, nid)
            for p, v in tmpl.get("params", {}).items():
                vals = tuple(v) if isinstance(v, list) else (v,)
                params[f"child.{p}"] = vals[0]
                ranges[f"child.{p}"] = vals
        nodes[nid] = Node(nid, kind, params, bool(spec.get("hardened", False)), spec.get("parent"), ranges, tmpl)
    for n in nodes.values():
        if n.parent is not None and n.parent not in nodes:
            raise DesignError(f"node {n.id!r} has unknown parent {n.parent!r}")
    edges = []
    for e in desc.get("edges", []):
        if isinstance(e, (list, tuple)):
            e = {"src": e[0], "dst": e[1], **({"bandwidth": e[2]} if len(e) > 2 else {})}
        edges.append(Edge(e["src"], e["dst"], e.get("bandwidth")))
    root = desc.get("root") or next((n.id for n in nodes.values() if n.kind == "dram"), None)
    if root is None:
        raise DesignError("no root memory node")
    g = FlowGraph(nodes, tuple(edges), root, library)
    _check_edges(g)
    return _materialize(g)


def _check_template(tmpl: Mapping[str, Any], library: ComponentLibrary, where: str) -> None:
    kind = tmpl.get("kind", "compute_pe")
    if kind not in library:
        raise DesignError(f"unknown component kind {kind!r} (template of {where})")
    if kind == "group":
        if "replicate" not in tmpl:
            raise DesignError(f"{where}: nested group template needs 'replicate'")
        _check_template(tmpl["replicate"], library, where)


# ------------------------------------------------------------------- rules


@dataclass(frozen=True)
class Rule:
    """Named side-effect-free predicate; ``check`` returns offending ids."""

    name: str
    check: Callable[[FlowGraph], list[str]]
    kind: str = "legality"  # or "pruning"
    scope: str = "config"  # or "topology"
    doc: Mapping[str, Any] | None = None


@dataclass(frozen=True)
class RuleSet:
    legality: tuple[Rule, ...] = ()
    pruning: tuple[Rule, ...] = ()

    def all(self) -> tuple[Rule, ...]:
        return self.legality + self.pruning


_OPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
    ast.FloorDiv: operator.floordiv, ast.Mod: operator.mod, ast.Pow: operator.pow,
    ast.Lt: operator.lt, ast.LtE: operator.le, ast.Gt: operator.gt, ast.GtE: operator.ge,
    ast.Eq: operator.eq, ast.NotEq: operator.ne,
}


class _Missing(Exception):
    pass


def _eval(node: ast.AST, g: FlowGraph, refs: set[str]):
    if isinstance(node, ast.Expression):
        return _eval(node.body, g, refs)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return node.value
    if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name):
        nid = node.value.id
        if nid not in g.nodes:
            raise _Missing
        refs.add(nid)
        n = g.nodes[nid]
        if node.attr not in n.params:
            raise DesignError(f"rule references unknown parameter {nid}.{node.attr}")
        return n.params[node.attr]
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_eval(node.left, g, refs), _eval(node.right, g, refs))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return -_eval(node.operand, g, refs)
    if isinstance(node, ast.BoolOp):
        vals = [_eval(v, g, refs) for v in node.values]
        return all(vals) if isinstance(node.op, ast.And) else any(vals)
    if isinstance(node, ast.Compare):
        left = _eval(node.left, g, refs)
        for op, comp in zip(node.ops, node.comparators):
            right = _eval(comp, g, refs)
            if type(op) not in _OPS or not _OPS[type(op)](left, right):
                return False
            left = right
        return True
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in ("min", "max"):
        args = [_eval(a, g, refs) for a in node.args]
        return min(args) if node.func.id == "min" else max(args)
    raise DesignError(f"unsupported rule expression element: {ast.dump(node)}")


def expression_rule(name: str, expr: str, kind: str = "pruning") -> Rule:
    """Rule from an arithmetic/comparison expression over ``node.param``.

    Rules referencing nodes absent from a topology hold vacuously.
    """
    tree = ast.parse(expr, mode="eval")

    def check(g: FlowGraph) -> list[str]:
        refs: set[str] = set()
        try:
            ok = _eval(tree, g, refs)
        except _Missing:
            return []
        return [] if ok else sorted(refs)

    return Rule(name, check, kind, "config", {"type": "expr", "name": name, "expr": expr})


def uniform_param_rule(name: str, kind_: str, param: str, kind: str = "pruning") -> Rule:
    def check(g: FlowGraph) -> list[str]:
        nodes = sorted((n for n in g.nodes.values() if n.kind == kind_ and param in n.params), key=lambda n: n.id)
        return [n.id for n in nodes] if len({n.params[param] for n in nodes}) > 1 else []

    return Rule(name, check, kind, "config", {"type": "uniform", "name": name, "kind": kind_, "param": param})


def depth_rule(name: str, lo: int, hi: int, kind: str = "pruning") -> Rule:
    """Bounds on the number of on-chip buffer levels between root and array."""

    def check(g: FlowGraph) -> list[str]:
        bufs = [n for n in _chain(g) if g.nodes[n].kind == "buffer"]
        return [] if lo <= len(bufs) <= hi else (bufs or [g.root])

    return Rule(name, check, kind, "topology", {"type": "depth", "name": name, "min": lo, "max": hi})


def forbid_edge_rule(name: str, src_kind: str, dst_kind: str, kind: str = "legality") -> Rule:
    def check(g: FlowGraph) -> list[str]:
        bad = [e for e in g.edges if g.nodes[e.src].kind == src_kind and g.nodes[e.dst].kind == dst_kind]
        return [f"{e.src}->{e.dst}" for e in bad]

    return Rule(name, check, kind, "topology", {"type": "forbid_edge", "name": name, "src": src_kind, "dst": dst_kind})


def rule_from_doc(doc: Mapping[str, Any], kind: str) -> Rule:
    t, name = doc.get("type", "expr"), doc["name"]
    if t == "expr":
        return expression_rule(name, doc["expr"], kind)
    if t == "uniform":
        return uniform_param_rule(name, doc["kind"], doc["param"], kind)
    if t == "depth":
        return depth_rule(name, doc["min"], doc["max"], kind)
    if t == "forbid_edge":
        return forbid_edge_rule(name, doc["src"], doc["dst"], kind)
    raise DesignError(f"unknown rule type {t!r}")


def _reachable(g: FlowGraph) -> set[str]:
    out: dict[str, list[str]] = {}
    for e in g.edges:
        out.setdefault(e.src, []).append(e.dst)
    seen, stack = set(), [g.root]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(out.get(n, []))
        stack.extend(c.id for c in g.children(n))
    return seen


def _builtin_violations(g: FlowGraph, report: ValidationReport) -> None:
    reach = _reachable(g)
    unreachable = sorted(n.id for n in g.nodes.values() if n.kind == "compute_pe" and n.id not in reach)
    if unreachable:
        report.add("reachability", unreachable, "compute nodes unreachable from root memory")
    empty = sorted(n.id for n in g.nodes.values() if n.kind == "group" and not g.children(n.id))
    if empty:
        report.add("non_empty_groups", empty, "group has no members")
    for nid in sorted(g.nodes):
        n = g.nodes[nid]
        comp = g.library[n.kind]
        for p, v in sorted(n.params.items()):
            if p.startswith("child."):
                continue
            if p in comp.parameters and v not in comp.parameters[p]:
                report.add("range_membership", [nid], f"{p}={v} outside library range")
            elif p in n.ranges and v not in n.ranges[p]:
                report.add("range_membership", [nid], f"{p}={v} outside node range {list(n.ranges[p])}")


def check_legality(g: FlowGraph, rules: RuleSet | None = None, scopes=("topology", "config")) -> ValidationReport:
    """Every violated rule by name with its offending ids; empty report means legal."""
    report = ValidationReport()
    _builtin_violations(g, report)
    for r in (rules or RuleSet()).all():
        if r.scope not in scopes:
            continue
        bad = r.check(g)
        if bad:
            report.add(r.name, bad, r.kind)
    return report


# ------------------------------------------------------------ design space


@dataclass(frozen=True)
class DesignSpaceSpec:
    """Skeleton: a root memory, an ordered list of candidate buffer levels
    (outermost first; ``optional`` ones may be dropped), a PE array group,
    rules, and constraint bounds."""

    library: ComponentLibrary
    root: Mapping[str, Any]
    buffers: tuple[Mapping[str, Any], ...]
    array: Mapping[str, Any] | None
    rules: RuleSet = RuleSet()
    depth: tuple[int, int] = (0, 64)
    constraints: Mapping[str, float] = field(default_factory=dict)
    transit: tuple[Mapping[str, Any], ...] = ()
    # mapping-space options used when searching this space (orders, spatial, padded)
    mapping: Mapping[str, Any] = field(default_factory=dict)


def load_design_space(text: str, library: ComponentLibrary) -> DesignSpaceSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DesignError(f"malformed design-space document: {exc}") from None
    if doc.get("version") != SCHEMA_VERSION:
        raise DesignError("malformed design-space document: expected version 1")
    rules = doc.get("rules", {})
    rs = RuleSet(
        legality=tuple(rule_from_doc(r, "legality") for r in rules.get("legality", [])),
        pruning=tuple(rule_from_doc(r, "pruning") for r in rules.get("pruning", [])),
    )
    spec = DesignSpaceSpec(
        library=library,
        root=doc["root"],
        buffers=tuple(doc.get("buffers", [])),
        array=doc.get("array"),
        rules=rs,
        depth=tuple(doc.get("buffer_depth", [0, 64])),
        constraints={k: float(v) for k, v in doc.get("constraints", {}).items()},
        transit=tuple(doc.get("transit", [])),
        mapping=dict(doc.get("mapping", {})),
    )
    _check_spec(spec)
    return spec


def _check_spec(spec: DesignSpaceSpec) -> None:
    for t in (spec.root, *spec.buffers, *([spec.array] if spec.array else []), *spec.transit):
        if t["kind"] not in spec.library:
            raise DesignError(f"design space references unknown kind {t['kind']!r}")
    if spec.array is not None:
        _check_template(spec.array.get("replicate", {"kind": "compute_pe"}), spec.library, spec.array["id"])
        for p in ("rows", "cols"):
            v = spec.array.get("params", {}).get(p, 1)
            if min(v if isinstance(v, list) else [v]) < 1:
                raise DesignError(f"replication bound {p} must be >= 1")


def _topology_desc(spec: DesignSpaceSpec, buffers: tuple[Mapping[str, Any], ...]) -> dict[str, Any]:
    chain = [spec.root, *buffers]
    nodes = [{k: v for k, v in t.items() if k != "optional"} for t in chain]
    nodes += [dict(t) for t in spec.transit]
    edges = [[a["id"], b["id"]] for a, b in zip(chain, chain[1:])]
    if spec.array is not None:
        nodes.append(dict(spec.array))
        edges.append([chain[-1]["id"], spec.array["id"]])
    return {"version": SCHEMA_VERSION, "root": spec.root["id"], "nodes": nodes, "edges": edges}


def enumerate_topologies(spec: DesignSpaceSpec) -> Iterator[FlowGraph]:
    """Legal topologies in canonical (signature) order, each exactly once."""
    if spec.array is None:
        return
    required = [i for i, b in enumerate(spec.buffers) if not b.get("optional", False)]
    optional = [i for i, b in enumerate(spec.buffers) if b.get("optional", False)]
    graphs: dict[str, FlowGraph] = {}
    for mask in itertools.product((False, True), repeat=len(optional)):
        keep = set(required) | {i for i, m in zip(optional, mask) if m}
        bufs = tuple(b for i, b in enumerate(spec.buffers) if i in keep)
        if not spec.depth[0] <= len(bufs) <= spec.depth[1]:
            continue
        g = build_flow_graph(_topology_desc(spec, bufs), spec.library)
        if not check_legality(g, spec.rules, scopes=("topology",)).ok:
            continue
        graphs.setdefault(g.signature(), g)
    for sig in sorted(graphs):
        yield graphs[sig]


def _free_params(g: FlowGraph) -> list[tuple[str, str, tuple[int, ...]]]:
    out = []
    for nid in sorted(g.nodes):
        n = g.nodes[nid]
        if n.parent is not None and g.nodes[n.parent].template is not None:
            continue  # templated children follow their group
        for p in sorted(n.ranges):
            out.append((nid, p, tuple(sorted(n.ranges[p]))))
    return out


def enumerate_hyperparameters(g: FlowGraph, spec: DesignSpaceSpec | RuleSet | None = None) -> Iterator[FlowGraph]:
    """Cartesian product of per-node ranges in lexicographic order, pruned."""
    rules = spec.rules if isinstance(spec, DesignSpaceSpec) else (spec or RuleSet())
    free = _free_params(g)
    for values in itertools.product(*(vals for _, _, vals in free)):
        updates: dict[str, dict[str, int]] = {}
        for (nid, p, _), v in zip(free, values):
            updates.setdefault(nid, {})[p] = v
        try:
            cfg = g.with_params(updates)
        except DesignError:
            continue
        if check_legality(cfg, rules).ok:
            yield cfg


def enumerate_designs(spec: DesignSpaceSpec) -> Iterator[FlowGraph]:
    for topo in enumerate_topologies(spec):
        yield from enumerate_hyperparameters(topo, spec)


# --------------------------------------------------------------- hardening


def node_area(g: FlowGraph, n: Node) -> float:
    c = g.library[n.kind].costs
    a = c.area + c.area_per_word * n.params.get("size", 0)
    return a * (c.harden_area_factor if n.hardened else 1.0)


def total_area(g: FlowGraph) -> float:
    return sum(node_area(g, n) for n in g.nodes.values())


def harden(g: FlowGraph, budget: float, vulnerability: Mapping[str, float]) -> FlowGraph:
    """Greedily harden the most vulnerable nodes while added area fits the budget.

    Nodes are taken in descending score (ties by id) and hardening stops at the
    first node that does not fit, so a larger budget always hardens a superset.
    """
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must lie in [0, 1]")
    if any(v < 0 for v in vulnerability.values()):
        raise ValueError("vulnerability scores must be >= 0")
    if budget == 0:
        return g
    base = sum(node_area(g, replace(n, hardened=False)) for n in g.nodes.values())
    allowance = budget * base
    added = 0.0
    chosen = []
    for nid in sorted(vulnerability, key=lambda k: (-vulnerability[k], k)):
        n = g.nodes[nid]
        if n.hardened:
            continue
        extra = node_area(g, replace(n, hardened=True)) - node_area(g, n)
        if added + extra > allowance * (1 + 1e-12):
            break
        added += extra
        chosen.append(nid)
    return g.with_hardened(chosen)


# ------------------------------------------------------------ architecture


@dataclass(frozen=True)
class Level:
    node: str
    capacity: int | None  # words per operand bank; None = unbounded
    energy: float


@dataclass(frozen=True)
class Boundary:
    """Link feeding level ``index - 1`` (or the PE array) from level ``index``."""

    src: str
    dst: str
    bandwidth: float | None  # words/cycle; None = unconstrained
    transit: tuple[str, ...] = ()
    transit_energy: float = 0.0

    @property
    def id(self) -> str:
        return f"xfer:{self.src}->{self.dst}"


@dataclass(frozen=True)
class ArraySpec:
    node: str
    rows: int
    cols: int
    accumulate_rows: bool
    accumulate_cols: bool
    macs_per_cycle: int
    mac_energy: float
    pes: tuple[tuple[str, int, int], ...]

    def extent(self, axis: str) -> int:
        return self.rows if axis == "rows" else self.cols

    def accumulates(self, axis: str) -> bool:
        return self.accumulate_rows if axis == "rows" else self.accumulate_cols


@dataclass(frozen=True)
class Architecture:
    levels: tuple[Level, ...]  # index 0 innermost, last = root memory
    boundaries: tuple[Boundary, ...]  # boundaries[l] leaves levels[l]
    array: ArraySpec

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _chain(g: FlowGraph) -> list[str]:
    out: dict[str, list[str]] = {}
    for e in g.edges:
        out.setdefault(e.src, []).append(e.dst)
    chain = [g.root]
    cur = g.root
    while g.nodes[cur].kind not in ("group", "compute_pe"):
        nxt = [d for d in out.get(cur, []) if g.nodes[d].kind != "controller"]
        if len(nxt) != 1:
            break
        cur = nxt[0]
        if cur in chain:
            raise DesignError(f"cycle on datapath at {cur}")
        chain.append(cur)
    return chain


def architecture(g: FlowGraph) -> Architecture:
    """The storage hierarchy and PE array reached from the root memory."""
    chain = _chain(g)
    last = g.nodes[chain[-1]]
    if last.kind not in ("group", "compute_pe"):
        raise DesignError(f"datapath from {g.root} does not end in a PE array (stops at {last.id})")
    bw_of = {(e.src, e.dst): g.edge_bandwidth(e) for e in g.edges}
    levels: list[Level] = []
    boundaries: list[Boundary] = []
    seg_src, transit, bws = None, [], []
    for a, b in zip(chain, chain[1:] + [None]):
        node = g.nodes[a]
        if node.kind in STORAGE_KINDS:
            if seg_src is not None:
                boundaries.append(_boundary(g, seg_src, a, transit, bws))
            cap = None if node.kind == "dram" else int(node.params.get("size", 0))
            levels.append(Level(a, cap, g.library[node.kind].costs.energy))
            seg_src, transit, bws = a, [], []
        elif node.kind in TRANSIT_KINDS:
            transit.append(a)
            if "bandwidth" in node.params and node.params["bandwidth"]:
                bws.append(float(node.params["bandwidth"]))
        if b is not None:
            bws.append(bw_of[(a, b)])
    if seg_src is None:
        raise DesignError("no storage level on the datapath")
    boundaries.append(_boundary(g, seg_src, last.id, transit, bws))
    levels.reverse()
    boundaries.reverse()
    return Architecture(tuple(levels), tuple(boundaries), _array_spec(g, last))


def _boundary(g: FlowGraph, src: str, dst: str, transit: list[str], bws: list[float | None]) -> Boundary:
    finite = [b for b in bws if b is not None]
    te = sum(g.library[g.nodes[t].kind].costs.energy for t in transit)
    return Boundary(src, dst, min(finite) if finite else None, tuple(transit), te)


def _array_spec(g: FlowGraph, top: Node) -> ArraySpec:
    if top.kind == "compute_pe":
        pes = [top]
        rows = cols = 1
        coords = {top.id: (0, 0)}
    else:
        pes = [n for n in g.descendants(top.id) if n.kind == "compute_pe"]
        if not pes:
            raise DesignError(f"group {top.id} holds no PEs")
        coords = {}
        for i, n in enumerate(sorted(pes, key=lambda n: n.id)):
            coords[n.id] = n.coord if n.coord is not None else (0, i)
        rows = 1 + max(r for r, _ in coords.values())
        cols = 1 + max(c for _, c in coords.values())
    mpc = min(int(n.params.get("macs_per_cycle", 1)) for n in pes)
    return ArraySpec(
        node=top.id,
        rows=rows,
        cols=cols,
        accumulate_rows=bool(top.params.get("accumulate_rows", 0)),
        accumulate_cols=bool(top.params.get("accumulate_cols", 0)),
        macs_per_cycle=max(mpc, 1),
        mac_energy=g.library["compute_pe"].costs.energy if "compute_pe" in g.library else 0.0,
        pes=tuple(sorted((n.id, *coords[n.id]) for n in pes)),
    )
