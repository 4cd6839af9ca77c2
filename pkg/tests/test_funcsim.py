import numpy as np
import pytest

from conftest import make_design, random_inputs
from oracles import naive_conv, naive_matmul
from npudse.funcsim import (
    Faulty,
    Mapped,
    Mitigations,
    Reference,
    load_tensor,
    reference_nest,
    run_inference,
    save_tensor,
    simulate,
    simulate_with_faults,
    weight_stationary_schedule,
)
from npudse.mapping import data_movement_volume, make_schedule, outermost_schedule
from npudse.reliability.experiments import ARRAY_SHAPE, bundled
from npudse.reliability.faults import FaultMap, generate_fault_map
from npudse.validation import InvalidScheduleError
from npudse.workload import matmul_nest


def test_identity_weights(lib):
    d = make_design(lib, 2, 2)
    nest = matmul_nest(2, 2, 2)
    x = np.array([[3, -1], [7, 2]])
    s = make_schedule(nest, [{"K": 2}], spatial=[("rows", "M", 2), ("cols", "N", 2)])
    out = simulate(d, s, nest, {"input": x, "weight": np.eye(2, dtype=int)}).output
    assert np.array_equal(out, x)


def test_corpus_matches_naive(triples):
    for i, (d, s, nest) in enumerate(triples):
        ins = random_inputs(nest, i)
        res = simulate(d, s, nest, ins)
        if nest.kind == "matmul":
            ref = naive_matmul(ins["input"], ins["weight"])
        else:
            stride = nest.operands["input"][2].terms[0][1]
            ref = naive_conv(ins["input"], ins["weight"], stride)
        assert np.array_equal(res.output, ref)
        assert np.array_equal(reference_nest(nest, ins), ref)


def test_counters_equal_volumes(triples):
    for d, s, nest in triples:
        res = simulate(d, s, nest, random_inputs(nest, 0), log_limit=0)
        assert res.counters == data_movement_volume(s, nest, d)
        assert all(v >= 0 for c in res.counters.values() for v in c.values())


def test_errors(lib):
    d = make_design(lib, 2, 2)
    nest = matmul_nest(2, 2, 2)
    s = outermost_schedule(nest, d)
    with pytest.raises(ValueError, match="shape mismatch"):
        simulate(d, s, nest, {"input": np.zeros((3, 2), int), "weight": np.zeros((2, 2), int)})
    bad = make_schedule(nest, [{"K": 2}], spatial=[("rows", "M", 4)])
    with pytest.raises(InvalidScheduleError):
        simulate(d, bad, nest, random_inputs(nest, 0))


def test_event_log_bounded(lib):
    d = make_design(lib, 2, 2, buffers=[(64, 0)])
    nest = matmul_nest(4, 4, 4)
    s = make_schedule(nest, [{"K": 2}, {"M": 4, "N": 4, "K": 2}])
    res = simulate(d, s, nest, random_inputs(nest, 0), log_limit=5)
    assert len(res.log) == 5


def faulty_setup(lib):
    d = make_design(lib, 4, 4, acc_rows=1)
    nest = matmul_nest(3, 8, 8)
    s = weight_stationary_schedule(nest, d)
    ins = random_inputs(nest, 1)
    return d, nest, s, ins


def test_empty_fault_map_is_simulate(lib):
    d, nest, s, ins = faulty_setup(lib)
    a = simulate(d, s, nest, ins)
    b = simulate_with_faults(d, s, nest, ins, FaultMap((4, 4)))
    assert a.fingerprint() == b.fingerprint()


def scalar_oracle(x, w, faulty, fap):
    """Per-product loop: K row k%4 and N column n%4 of a weight-stationary 4x4 array."""
    M, K = x.shape
    N = w.shape[1]
    out = np.zeros((M, N), dtype=np.int64)
    for m in range(M):
        for n in range(N):
            for k in range(K):
                r, c = k % 4, n % 4
                if fap:
                    skip = faulty[r, c]
                else:
                    skip = faulty[r:, c].any()
                if not skip:
                    out[m, n] += int(x[m, k]) * int(w[k, n])
    return out


@pytest.mark.parametrize("fap", [True, False])
def test_stuck_column_scalar_oracle(lib, fap):
    d, nest, s, ins = faulty_setup(lib)
    fm = FaultMap((4, 4), pe_faults=((0, 1), (2, 1), (3, 3)))
    got = simulate_with_faults(d, s, nest, ins, fm, Mitigations(fap=fap)).output
    assert np.array_equal(got, scalar_oracle(ins["input"], ins["weight"], fm.pe_mask(), fap))


def test_explicit_permutation(lib):
    d, nest, s, ins = faulty_setup(lib)
    fm = FaultMap((4, 4), pe_faults=((1, 0),))
    perm = [1, 0, 2, 3]
    got = simulate_with_faults(d, s, nest, ins, fm, Mitigations(fap=True, fault_aware_map=perm)).output
    # logical column 1 lands on the faulty physical column 0
    moved = np.zeros((4, 4), bool)
    moved[1, 1] = True
    assert np.array_equal(got, scalar_oracle(ins["input"], ins["weight"], moved, True))


def test_range_bounds_clamp(lib):
    d, nest, s, ins = faulty_setup(lib)
    res = simulate_with_faults(d, s, nest, ins, FaultMap((4, 4)), Mitigations(range_bounds=(-5, 5)))
    assert res.output.min() >= -5 and res.output.max() <= 5
    with pytest.raises(ValueError):
        simulate_with_faults(d, s, nest, ins, FaultMap((4, 4)), Mitigations(range_bounds=(5, -5)))


def test_fault_sim_deterministic(lib):
    d, nest, s, ins = faulty_setup(lib)
    fm = generate_fault_map((4, 4), 0.25, seed=3)
    m = Mitigations(fap=True, fault_aware_map=True, range_bounds=(-200, 200), te_drop_p=0.1, seed=9)
    a = simulate_with_faults(d, s, nest, ins, fm, m)
    b = simulate_with_faults(d, s, nest, ins, fm, m)
    assert a.fingerprint() == b.fingerprint()


def test_reference_and_mapped_agree(lib):
    b = bundled()
    d = make_design(lib, *ARRAY_SHAPE)
    X, y = b.task.X_test[:64], b.task.y_test[:64]
    assert run_inference(b.q, X, y, Reference()) == run_inference(b.q, X, y, Mapped(d))
    assert run_inference(b.net, X, y) == run_inference(b.net, X, y)
    with pytest.raises(ValueError):
        run_inference(b.q, X[:0], y[:0])


def test_mitigated_not_worse_than_unmitigated(lib):
    b = bundled()
    d = make_design(lib, *ARRAY_SHAPE)
    X, y = b.task.X_test[:128], b.task.y_test[:128]
    plain, mitigated = [], []
    for seed in range(10):
        fm = generate_fault_map(ARRAY_SHAPE, 0.25, seed=seed)
        plain.append(run_inference(b.q, X, y, Faulty(d, fm)))
        mitigated.append(run_inference(b.q, X, y, Faulty(d, fm, Mitigations(fap=True, fault_aware_map=True))))
    assert np.median(mitigated) >= np.median(plain)


def test_tensor_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for a in (rng.integers(-128, 128, (3, 4, 5)).astype(np.int8), rng.normal(size=(7,)), np.arange(6, dtype=np.int64).reshape(2, 3)):
        save_tensor(tmp_path / "t.bin", a, scale=3)
        b, scale = load_tensor(tmp_path / "t.bin")
        assert scale == 3 and b.dtype == a.dtype.newbyteorder("<") and b.tobytes() == a.astype(b.dtype).tobytes()
        assert b.shape == a.shape
