"""Command-line entry point: ``npudse {explore,eval,mapspace,faults,report}``.

Exit codes: 0 success, 1 input or usage error, 2 no feasible design.
Every run writes into ``<out>/<name>``, which is overwritten on re-run.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
from collections import Counter
from importlib.resources import files
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost import CSV_COLUMNS, build_cost_graph, evaluate_cost, fmt_float, identify_bottleneck
from .design_space import (
    ComponentLibrary,
    DesignError,
    FlowGraph,
    build_flow_graph,
    load_component_library,
    load_design,
    load_design_space,
)
from .dse import METRICS, Objectives, exhaustive, explore, metric_name, random_search, simulated_annealing
from .mapping import count_schedules, enumerate_schedules, formulate_mapping_space, parse_schedule
from .reliability.experiments import (
    ARRAY_SHAPE,
    CONDITIONS,
    RETRAIN_EPOCHS,
    bundled,
    condition_accuracy,
    rows_to_csv,
    sweep,
)
from .reliability.faults import (
    FaultMap,
    apply_memory_faults,
    chain_wipe_mask,
    exhaustive_min_cost,
    fap_mask,
    fault_aware_map,
    generate_fault_map,
    identity_assignment,
    mapping_cost,
)
from .reliability.mitigations import profile_ranges
from .validation import InvalidScheduleError
from .workload import ModelError, OperatorNest, fuse_operators, lower_graph, parse_model

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2
STRATEGIES = ("guided", "random", "anneal", "exhaustive")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _data(name: str) -> str:
    return files("npudse").joinpath("data", name).read_text()


def _read(path: str | None, default: str) -> str:
    if path is None:
        return _data(default)
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p.read_text()


def _library(args) -> ComponentLibrary:
    return load_component_library(_read(args.library, "library.json"))


def _workload(args) -> list[OperatorNest]:
    nests = lower_graph(fuse_operators(parse_model(_read(args.model, "bench_model.json"))))
    if not nests:
        raise UsageError("model has no conv2d/matmul operators")
    return nests


def _design(path: str, lib: ComponentLibrary) -> FlowGraph:
    doc = json.loads(_read(path, ""))
    if any("replicate" in n for n in doc.get("nodes", [])):
        return build_flow_graph(doc, lib)
    return load_design(json.dumps(doc), lib)


def _pick(nests: list[OperatorNest], op: str | None) -> list[OperatorNest]:
    if op is None:
        return nests
    hit = [n for n in nests if n.name == op]
    if not hit:
        raise UsageError(f"no operator named {op!r}; have {[n.name for n in nests]}")
    return hit


def _run_dir(args, default: str) -> Path:
    d = Path(args.out) / (args.name or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write(d: Path, name: str, text: str) -> None:
    (d / name).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _constraints(items: Sequence[str]) -> dict[str, float]:
    out = {}
    for it in items:
        key, sep, val = it.partition("=")
        if not sep:
            raise UsageError(f"constraint must look like metric=value, got {it!r}")
        try:
            out[metric_name(key.strip())] = float(val)
        except ValueError as exc:
            raise UsageError(f"bad constraint {it!r}: {exc}") from None
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _shape(text: str) -> tuple[int, int]:
    try:
        r, c = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"shape must look like ROWSxCOLS, got {text!r}") from None
    return r, c


# ------------------------------------------------------------------ explore


def cmd_explore(args) -> int:
    if args.budget is not None and args.budget < 1:
        raise UsageError("--budget must be a positive integer")
    if args.strategy == "anneal" and args.budget is None:
        raise UsageError("--strategy anneal needs --budget")
    lib = _library(args)
    spec = load_design_space(_read(args.space, "bench_space.json"), lib)
    nests = _workload(args)
    cons = dict(spec.constraints)
    cons.update(_constraints(args.constraint))
    objectives = tuple(metric_name(o) for o in (args.objective or ["latency"]))
    obj = Objectives(objectives, cons)
    kw = dict(seed=args.seed, jobs=args.jobs)
    if args.strategy == "guided":
        res = explore(spec, nests, obj, budget=args.budget, **kw)
    elif args.strategy == "random":
        res = random_search(spec, nests, obj, budget=args.budget, **kw)
    elif args.strategy == "anneal":
        res = simulated_annealing(spec, nests, obj, budget=args.budget, **kw)
    else:
        res = exhaustive(spec, nests, obj, jobs=args.jobs)

    d = _run_dir(args, "explore")
    _write(d, "front.csv", res.front.to_csv())
    _write(d, "trace.jsonl", res.trace_lines())
    best = res.best()
    summary = {
        "command": "explore",
        "strategy": args.strategy,
        "seed": args.seed,
        "budget": args.budget,
        "objectives": list(objectives),
        "constraints": {k: fmt_float(v) for k, v in sorted(cons.items())},
        "operators": [n.name for n in nests],
        "space_points": res.space_points,
        "evaluations": res.evaluations,
        "front_size": len(res.front),
        "best": None if best is None else {"id": best.id, **{m: fmt_float(best.metrics[m]) for m in METRICS}},
    }
    _write(d, "summary.json", _dump(summary))
    if best is not None:
        _write(d, "best_design.json", best.design.dumps() + "\n")
        _write(d, "best_schedules.json", _dump([s.to_dict() for s in best.schedules]))
    else:
        for f in ("best_design.json", "best_schedules.json"):
            (d / f).unlink(missing_ok=True)

    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(f"run: {d}")
        print(f"evaluations: {res.evaluations} of {res.space_points} points")
        print(f"front size: {len(res.front)}")
        if best is not None:
            print(f"best: {best.id} " + " ".join(f"{m}={fmt_float(best.metrics[m])}" for m in objectives))
    if best is None:
        print("no feasible design under the given constraints", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# --------------------------------------------------------------------- eval


def _schedules_doc(text: str):
    doc = json.loads(text)
    if isinstance(doc, dict) and "schedules" in doc:
        doc = doc["schedules"]
    return doc if isinstance(doc, list) else [doc]


def cmd_eval(args) -> int:
    lib = _library(args)
    design = _design(args.design, lib)
    nests = _pick(_workload(args), args.op)
    scheds = [parse_schedule(s) for s in _schedules_doc(_read(args.schedule, ""))]
    if len(scheds) != len(nests):
        raise UsageError(f"{len(scheds)} schedule(s) for {len(nests)} operator(s)")
    out = []
    for nest, s in zip(nests, scheds):
        r = evaluate_cost(design, s, nest, pe_fault_rate=args.pe_fault_rate)
        diag = identify_bottleneck(build_cost_graph(design, s, nest, r), "latency")
        out.append((nest, r, diag))
    if args.json:
        print(json.dumps({
            "design": design.digest(),
            "reports": [
                {"op": n.name, "cost": r.to_dict(),
                 "bottleneck": {"dominant": g.dominant, "ratio": fmt_float(g.ratio), "explain": g.explain(),
                                "mitigations": [list(m) for m in g.mitigations]}}
                for n, r, g in out
            ],
        }, sort_keys=True))
        return EXIT_OK
    for n, r, g in out:
        print(f"[{n.name}]")
        for c, v in zip(CSV_COLUMNS, r.csv_row()):
            print(f"{c}: {v}")
        for dp, cyc in r.datapaths.items():
            print(f"datapath {dp}: {cyc} cycles")
        print(g.explain())
    return EXIT_OK


# ----------------------------------------------------------------- mapspace


def cmd_mapspace(args) -> int:
    if args.limit < 0:
        raise UsageError("--limit must be >= 0")
    lib = _library(args)
    design = _design(args.design, lib)
    result = []
    for nest in _pick(_workload(args), args.op):
        space = formulate_mapping_space(nest, design, orders=args.orders)
        sample = list(itertools.islice(enumerate_schedules(space), args.limit))
        result.append({"op": nest.name, "count": count_schedules(space), "schedules": [s.to_dict() for s in sample]})
    if args.json:
        print(json.dumps(result, sort_keys=True))
        return EXIT_OK
    for r in result:
        print(f"[{r['op']}] {r['count']} schedules")
        for s in r["schedules"]:
            print(json.dumps(s, sort_keys=True, separators=(",", ":")))
    return EXIT_OK


# ------------------------------------------------------------------- faults


def _fault_map(args, mem: bool = False) -> FaultMap:
    if getattr(args, "fault_map", None):
        return FaultMap.loads(_read(args.fault_map, ""))
    b = bundled()
    return generate_fault_map(
        _shape(args.shape), args.rate,
        args.ber if mem else 0.0,
        word_count=b.q.n_words if mem else 0,
        word_width=b.q.word_width,
        seed=args.seed,
        bit_positions=tuple(int(x) for x in args.bits.split(",")) if mem and args.bits else None,
    )


def cmd_faults_inject(args) -> int:
    fm = _fault_map(args, mem=True)
    b = bundled()
    q, X, y = b.q, b.task.X_test, b.task.y_test
    faulty = q.with_words(apply_memory_faults(q.words(), fm))
    ident = [identity_assignment(c.shape[1], fm.shape[1]) for c in q.codes]
    wipe = [chain_wipe_mask(c.shape[0], a, fm) for c, a in zip(q.codes, ident)]
    fap = [fap_mask(c.shape[0], a, fm) for c, a in zip(q.codes, ident)]
    bounds = profile_ranges(q, b.task.X_train)
    rows = [
        ["clean", q.accuracy(X, y)],
        ["unmitigated", faulty.accuracy(X, y, weight_keep=wipe)],
        ["fap", faulty.accuracy(X, y, weight_keep=fap)],
        ["fap+range", faulty.accuracy(X, y, weight_keep=fap, bounds=bounds)],
    ]
    d = _run_dir(args, "faults-inject")
    _write(d, "fault_map.json", fm.dumps() + "\n")
    text = rows_to_csv(["condition", "accuracy"], rows)
    _write(d, "accuracy.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_faults_map(args) -> int:
    sal = np.asarray(_floats(args.saliency))
    if args.fault_map:
        fm = FaultMap.loads(_read(args.fault_map, ""))
    else:
        pes = []
        for p in args.pe:
            try:
                r, c = (int(x) for x in p.split(","))
            except ValueError:
                raise UsageError(f"--pe must look like ROW,COL, got {p!r}") from None
            pes.append((r, c))
        fm = FaultMap(_shape(args.shape), tuple(sorted(set(pes))))
    if sal.size != fm.shape[1]:
        raise UsageError(f"{sal.size} saliencies for {fm.shape[1]} columns")
    perm = fault_aware_map(sal, fm)
    cost = mapping_cost(perm, sal, fm)
    out = {"permutation": [int(x) for x in perm], "cost": fmt_float(cost)}
    if sal.size <= 8:
        out["optimal_cost"] = fmt_float(exhaustive_min_cost(sal, fm))
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        print("permutation: " + " ".join(str(x) for x in out["permutation"]))
        print(f"cost: {out['cost']}")
    return EXIT_OK


def cmd_faults_retrain(args) -> int:
    fm = _fault_map(args)
    b = bundled()
    rows = [[c, condition_accuracy(b, fm, c, args.seed)] for c in ("fap", "fap+fat")]
    d = _run_dir(args, "faults-retrain")
    _write(d, "fault_map.json", fm.dumps() + "\n")
    text = rows_to_csv(["condition", "accuracy"], rows)
    _write(d, "retrain.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_faults_sweep(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    conds = tuple(args.conditions.split(",")) if args.conditions else CONDITIONS
    bad = [c for c in conds if c not in CONDITIONS]
    if bad:
        raise UsageError(f"unknown condition(s) {bad}; choose from {list(CONDITIONS)}")
    rates = _floats(args.rates)
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise UsageError("rates must lie in [0, 1]")
    rows = sweep(rates, range(args.seed, args.seed + args.seeds), conds, jobs=args.jobs)
    d = _run_dir(args, "faults-sweep")
    text = rows_to_csv(["pe_fault_rate", "seed", *conds], rows)
    _write(d, "sweep.csv", text)
    print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------- report


def cmd_report(args) -> int:
    d = Path(args.run_dir)
    summary_p, front_p, trace_p = d / "summary.json", d / "front.csv", d / "trace.jsonl"
    if not d.is_dir() or not summary_p.is_file() or not front_p.is_file():
        raise UsageError(f"{d} is not an explore run directory (needs summary.json and front.csv)")
    summary = json.loads(summary_p.read_text())
    front = list(csv.DictReader(io.StringIO(front_p.read_text())))
    hist: Counter = Counter()
    if trace_p.is_file():
        for line in trace_p.read_text().splitlines():
            rec = json.loads(line)
            if rec.get("evaluation") is not None and rec.get("dominant"):
                hist[rec["dominant"]] += 1
    best_lat = min((float(r["latency"]) for r in front), default=None)
    lines = [
        f"run: {d.name}",
        f"strategy: {summary.get('strategy')}  seed: {summary.get('seed')}  budget: {summary.get('budget')}",
        f"objectives: {', '.join(summary.get('objectives', []))}",
        f"evaluations: {summary.get('evaluations')} of {summary.get('space_points')} points",
        f"pareto size: {len(front)}",
        f"best latency: {'none' if best_lat is None else fmt_float(best_lat)}",
        "bottleneck histogram (evaluated points):",
    ]
    lines += [f"  {k}: {v}" for k, v in sorted(hist.items(), key=lambda kv: (-kv[1], kv[0]))]
    lines += ["files: front.csv, trace.jsonl, summary.json"
              + (", best_design.json, best_schedules.json" if (d / "best_design.json").is_file() else "")]
    text = "\n".join(lines) + "\n"
    (d / "report.txt").write_text(text)
    if args.json:
        print(json.dumps({"pareto_size": len(front), "best_latency": best_lat, "bottlenecks": dict(sorted(hist.items()))},
                         sort_keys=True))
    else:
        print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, model=True, library=True, json_flag=True) -> None:
    if model:
        p.add_argument("--model", help="model graph JSON (default: bundled benchmark model)")
    if library:
        p.add_argument("--library", help="component library JSON (default: bundled)")
    if json_flag:
        p.add_argument("--json", action="store_true", help="machine-readable output")


def _out(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="runs", help="parent directory for run outputs")
    p.add_argument("--name", help="run directory name under --out")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="npudse", description="NPU design-space exploration and reliability toolkit")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("explore", help="search a design space and write the Pareto front")
    _common(p)
    p.add_argument("--space", help="design-space JSON (default: bundled benchmark space)")
    p.add_argument("--objective", action="append", choices=sorted(set(METRICS) | {"latency_cycles", "total_fit"}))
    p.add_argument("--constraint", action="append", default=[], metavar="METRIC=VALUE")
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--strategy", choices=STRATEGIES, default="guided")
    _out(p)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("eval", help="cost report and bottleneck diagnosis of one design + schedule")
    _common(p)
    p.add_argument("--design", required=True)
    p.add_argument("--schedule", required=True, help="schedule JSON, or a list with one per operator")
    p.add_argument("--op", help="operator name (default: every operator in order)")
    p.add_argument("--pe-fault-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mapspace", help="mapping-space size and sample schedules")
    _common(p)
    p.add_argument("--design", required=True)
    p.add_argument("--op")
    p.add_argument("--orders", choices=("all", "fixed"), default="all")
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(func=cmd_mapspace)

    f = sub.add_parser("faults", help="fault-injection experiments on the bundled TinyNet task")
    fsub = f.add_subparsers(dest="faults_command", required=True, parser_class=_Parser)
    shape = f"{ARRAY_SHAPE[0]}x{ARRAY_SHAPE[1]}"

    p = fsub.add_parser("inject", help="sample a fault map and report accuracy under it")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rate", type=float, default=0.0, help="PE fault rate")
    p.add_argument("--ber", type=float, default=0.0, help="weight-memory stuck-bit rate")
    p.add_argument("--bits", help="restrict stuck bits to these positions, e.g. 7,6")
    p.add_argument("--shape", default=shape)
    _out(p)
    p.set_defaults(func=cmd_faults_inject)

    p = fsub.add_parser("map", help="fault-aware filter-to-column mapping")
    p.add_argument("--saliency", required=True, help="comma-separated saliency per filter")
    p.add_argument("--fault-map")
    p.add_argument("--pe", action="append", default=[], metavar="ROW,COL")
    p.add_argument("--shape", default=shape)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_faults_map)

    p = fsub.add_parser("retrain", help="FAP with and without fault-aware retraining")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rate", type=float, default=0.25)
    p.add_argument("--fault-map")
    p.add_argument("--shape", default=shape)
    _out(p)
    p.set_defaults(func=cmd_faults_retrain)

    p = fsub.add_parser("sweep", help="accuracy per condition over PE fault rates and seeds")
    p.add_argument("--rates", default="0,0.05,0.25")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, required=True, help="first seed")
    p.add_argument("--conditions", help=f"comma-separated subset of {','.join(CONDITIONS)}")
    p.add_argument("--jobs", type=int, default=1)
    _out(p)
    p.set_defaults(func=cmd_faults_sweep)

    p = sub.add_parser("report", help="summarize an explore run directory")
    p.add_argument("run_dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvalidScheduleError as exc:
        print("error: invalid schedule", file=sys.stderr)
        for v in exc.report:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INPUT
    except (ModelError, DesignError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
