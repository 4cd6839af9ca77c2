import json
import sys
from importlib.resources import files
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from npudse.design_space import build_flow_graph, load_component_library  # noqa: E402
from npudse.mapping import formulate_mapping_space, schedule_list  # noqa: E402
from npudse.workload import conv2d_nest, matmul_nest  # noqa: E402


def bundled_text(name: str) -> str:
    return files("npudse").joinpath("data", name).read_text()


@pytest.fixture(scope="session")
def lib():
    return load_component_library(bundled_text("library.json"))


def make_design(lib, rows=2, cols=2, buffers=(), dram_bw=None, mpc=1, acc_rows=1, acc_cols=0):
    """DRAM -> buffers (outermost first, (size, bandwidth)) -> rows x cols array."""
    nodes = [{"id": "dram", "kind": "dram", "params": {"bandwidth": dram_bw or 0}}]
    chain = ["dram"]
    for i, (size, bw) in enumerate(buffers):
        nid = f"buf{i}"
        nodes.append({"id": nid, "kind": "buffer", "params": {"size": size, "bandwidth": bw or 0}})
        chain.append(nid)
    nodes.append({
        "id": "array", "kind": "group",
        "params": {"rows": rows, "cols": cols, "accumulate_rows": acc_rows, "accumulate_cols": acc_cols},
        "replicate": {"kind": "compute_pe", "params": {"macs_per_cycle": mpc}},
    })
    chain.append("array")
    edges = [[a, b] for a, b in zip(chain, chain[1:])]
    return build_flow_graph({"version": 1, "root": "dram", "nodes": nodes, "edges": edges}, lib)


def corpus(lib, n_min=50, seed=0):
    """(design, schedule, nest) triples with at most 10**4 MACs, seeded picks."""
    rng = np.random.default_rng(seed)
    designs = [
        make_design(lib, 1, 1),
        make_design(lib, 2, 2, dram_bw=2),
        make_design(lib, 2, 4, buffers=[(256, 4)], dram_bw=1),
        make_design(lib, 4, 2, buffers=[(64, 0)], dram_bw=8, mpc=2),
        make_design(lib, 2, 2, buffers=[(1024, 8), (64, 2)], dram_bw=4),
        make_design(lib, 4, 4, buffers=[(128, 16), (64, 0)], dram_bw=2, acc_rows=0, acc_cols=1),
    ]
    nests = [
        matmul_nest(2, 2, 2),
        matmul_nest(4, 6, 3),
        matmul_nest(8, 4, 8),
        conv2d_nest(1, 2, 2, 3, 3, 2, 2),
        conv2d_nest(1, 4, 2, 2, 2, 3, 3, stride=2),
    ]
    out = []
    for d in designs:
        for nest in nests:
            for padded in (False, True):
                sl = schedule_list(formulate_mapping_space(nest, d, orders="fixed", padded=padded))
                if not sl:
                    continue
                for j in rng.choice(len(sl), size=min(2, len(sl)), replace=False):
                    out.append((d, sl[int(j)], nest))
    assert len(out) >= n_min
    return out


def random_inputs(nest, seed):
    rng = np.random.default_rng(seed)
    return {op: rng.integers(-8, 8, size=nest.operand_shape(op)) for op in ("input", "weight")}


@pytest.fixture(scope="session")
def triples(lib):
    return corpus(lib)


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
