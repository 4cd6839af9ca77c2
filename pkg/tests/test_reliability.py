import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_design, random_inputs
from oracles import permutation_costs
from npudse.funcsim import Mitigations, simulate, simulate_with_faults, weight_stationary_schedule
from npudse.reliability.experiments import bundled, range_restriction_trial, te_drop_trial
from npudse.reliability.faults import (
    FaultMap,
    apply_fap,
    exhaustive_min_cost,
    fault_aware_map,
    generate_fault_map,
    inject_bit_flips,
    mapping_cost,
    magnitude_saliency,
)
from npudse.reliability.mitigations import (
    RangeBounds,
    chain_skip,
    fault_aware_retrain,
    find_vulnerable_bits,
    layer_masks,
    profile_ranges,
    range_restrict,
    te_drop_dot,
    te_drop_sim,
)
from npudse.reliability.tinynet import TinyNet, softmax_xent
from npudse.workload import matmul_nest


# ------------------------------------------------------------- fault maps


def test_fault_map_rates():
    assert generate_fault_map((4, 4), 0.0, seed=1).pe_faults == ()
    assert len(generate_fault_map((4, 4), 1.0, seed=1).pe_faults) == 16
    with pytest.raises(ValueError):
        generate_fault_map((4, 4), 1.2)
    with pytest.raises(ValueError):
        generate_fault_map((4, 4), 0.1, mem_bit_error_rate=-0.1)


def test_fault_map_mean_count():
    counts = [len(generate_fault_map((4, 4), 0.25, seed=s).pe_faults) for s in range(10_000)]
    assert abs(np.mean(counts) - 4.0) <= 0.1


def test_fault_map_deterministic_and_roundtrip():
    a = generate_fault_map((4, 4), 0.3, 0.01, word_count=100, seed=7)
    b = generate_fault_map((4, 4), 0.3, 0.01, word_count=100, seed=7)
    assert a == b and a.dumps() == b.dumps()
    assert FaultMap.loads(a.dumps()) == a
    hi = generate_fault_map((4, 4), 0.0, 0.5, word_count=50, seed=2, bit_positions=(7, 6))
    assert hi.memory_faults and {bit for _, bit, _ in hi.memory_faults} <= {6, 7}


def test_fault_map_invariants():
    with pytest.raises(ValueError):
        FaultMap((2, 2), pe_faults=((2, 0),))
    with pytest.raises(ValueError):
        FaultMap((2, 2), memory_faults=((0, 8, 1),))


# ------------------------------------------------------------------- FAP


def test_fap_empty_map():
    w = np.arange(32).reshape(8, 4)
    assert np.array_equal(apply_fap([0, 1, 2, 3], w, FaultMap((4, 4))), w)


def test_fap_zeroes_exactly_the_mapped_weight():
    w = np.arange(1, 17).reshape(4, 4)
    fm = FaultMap((4, 4), pe_faults=((2, 1),))
    assign = [3, 1, 0, 2]  # filter 1 sits on column 1
    out = apply_fap(assign, w, fm)
    expected = w.copy()
    expected[2, 1] = 0
    assert np.array_equal(out, expected)
    # moving the filter off the faulty column leaves it intact
    out2 = apply_fap([1, 3, 0, 2], w, fm)
    assert out2[2, 1] == w[2, 1] and out2[2, 0] == 0


def test_fap_bad_assignment():
    with pytest.raises(ValueError):
        apply_fap([0, 1, 2, 4], np.ones((4, 4)), FaultMap((4, 4)))


def test_fap_matches_funcsim(lib):
    d = make_design(lib, 4, 4, acc_rows=1)
    nest = matmul_nest(5, 4, 8)
    s = weight_stationary_schedule(nest, d)
    ins = random_inputs(nest, 4)
    fm = FaultMap((4, 4), pe_faults=((0, 0), (1, 3), (3, 3)))
    faulty = simulate_with_faults(d, s, nest, ins, fm, Mitigations(fap=True)).output
    pruned = {**ins, "weight": apply_fap([0, 1, 2, 3], ins["weight"], fm)}
    assert np.array_equal(faulty, simulate(d, s, nest, pruned).output)


# ----------------------------------------------------- fault-aware mapping


def test_fam_one_faulty_column():
    fm = FaultMap((4, 4), pe_faults=tuple((r, 2) for r in range(4)))
    sal = np.array([10.0, 1.0, 5.0, 3.0])
    perm = fault_aware_map(sal, fm)
    assert perm[1] == 2
    costs = permutation_costs(sal, fm.pe_mask())
    assert mapping_cost(perm, sal, fm) == min(costs.values())


def test_fam_identity_ties():
    sal = np.array([4.0, 2.0, 9.0, 1.0])
    assert list(fault_aware_map(sal, FaultMap((4, 4)))) == [0, 1, 2, 3]
    uniform = FaultMap((4, 4), pe_faults=tuple((1, c) for c in range(4)))
    assert list(fault_aware_map(sal, uniform)) == [0, 1, 2, 3]


def test_fam_size_mismatch():
    with pytest.raises(ValueError):
        fault_aware_map(np.ones(3), FaultMap((4, 4)))


@pytest.mark.parametrize("n", [2, 3, 5, 6])
def test_fam_optimal_small(n):
    rng = np.random.default_rng(n)
    for t in range(25):
        fm = generate_fault_map((n, n), 0.3, seed=t)
        sal = rng.random((n, n)) * 10
        perm = fault_aware_map(sal, fm)
        assert sorted(perm) == list(range(n))
        best = min(permutation_costs(sal, fm.pe_mask()).values())
        assert mapping_cost(perm, sal, fm) == pytest.approx(best, abs=1e-9)
        assert exhaustive_min_cost(sal, fm) == pytest.approx(best, abs=1e-9)


def test_fam_greedy_above_limit():
    # with per-filter scalar saliency the greedy pairing is optimal (rearrangement)
    from scipy.optimize import linear_sum_assignment
    rng = np.random.default_rng(0)
    fm = generate_fault_map((10, 10), 0.3, seed=3)
    sal = rng.random(10)
    perm = fault_aware_map(sal, fm)
    assert sorted(perm) == list(range(10))
    cost = sal[:, None] * fm.pe_mask().sum(axis=0)[None, :]
    r, c = linear_sum_assignment(cost)
    assert mapping_cost(perm, sal, fm) == pytest.approx(cost[r, c].sum())


def test_magnitude_saliency_shape():
    w = np.arange(-12, 12).reshape(6, 4)
    sal = magnitude_saliency(w, 4, 4)
    assert sal.shape == (4, 4) and sal.sum() == np.abs(w).sum()


# ----------------------------------------------------------- range bounds


def test_profile_zero_net():
    net = TinyNet([np.zeros((3, 2)), np.zeros((2, 2))], [np.zeros(2), np.zeros(2)])
    b = profile_ranges(net, np.random.default_rng(0).normal(size=(5, 3)))
    assert b.layers == ((0.0, 0.0), (0.0, 0.0))


def test_profile_single_sample_and_coverage():
    q = bundled().q
    x = bundled().task.X_train[:1]
    _, outs = q.forward(x, return_acts=True)
    b = profile_ranges(q, x)
    for i, o in enumerate(outs):
        s = 2.0 ** q.output_scale(i)
        assert b.layers[i] == (o.min() / s, o.max() / s)
    X = bundled().task.X_train
    b = profile_ranges(q, X)
    _, outs = q.forward(X, return_acts=True)
    for i, o in enumerate(outs):
        s = 2.0 ** q.output_scale(i)
        assert b.layers[i][0] * s <= o.min() and o.max() <= b.layers[i][1] * s
    with pytest.raises(ValueError):
        profile_ranges(q, X[:0])


def test_range_restrict_examples():
    assert range_restrict(7.5, (0, 6)) == 6
    assert range_restrict(3, (0, 6)) == 3
    assert range_restrict(-2, (0, 6)) == 0
    out = range_restrict([np.nan, np.inf, -np.inf], (0, 6))
    assert list(out) == [0, 6, 0]
    with pytest.raises(ValueError):
        range_restrict(1.0, (6, 0))
    with pytest.raises(ValueError):
        RangeBounds(((0.0, math.inf),))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 50)), st.floats(-1e6, 1e6), st.floats(0, 1e6))
def test_range_restrict_idempotent(x, lo, width):
    b = (lo, lo + width)
    once = range_restrict(x, b)
    assert np.array_equal(range_restrict(once, b), once)
    inside = np.isfinite(x) & (x >= b[0]) & (x <= b[1])
    assert np.array_equal(once[inside], x[inside])


# ---------------------------------------------------------------- TE-Drop


def test_range_restriction_never_hurts():
    # clamping to the profiled range is not worse than no protection in >= 18 of 20 trials
    trials = [range_restriction_trial(s) for s in range(20)]
    assert sum(prot >= plain for plain, prot in trials) >= 18


def test_te_drop_p0_is_fault_free():
    q = bundled().q
    X = bundled().task.X_test[:50]
    assert np.array_equal(te_drop_sim(q, X, 0.0, seed=3), q.forward(X))
    assert te_drop_dot([1, 2, 3], [4, 5, 6], 0.0) == 32


def test_te_drop_p1_alternates():
    assert te_drop_dot([3, 5], [2, 7], 1.0) == 6
    assert te_drop_dot([1, 1, 1, 1, 1], [1, 2, 4, 8, 16], 1.0) == 1 + 4 + 16
    skip = chain_skip(np.ones((6, 1), bool), 0, chain=3)
    assert skip[:, 0].tolist() == [False, True, False, False, True, False]
    with pytest.raises(ValueError):
        te_drop_dot([1], [1], 1.5)


def test_te_drop_beats_random_zeroing():
    te, rnd = zip(*(te_drop_trial(s) for s in range(20)))
    assert np.median(te) >= np.median(rnd)


# ------------------------------------------------------------- bit flips


def test_bit_flip_examples():
    w = np.array([5, -3, 127, -128])
    assert np.array_equal(inject_bit_flips(w, ber=0.0), w)
    flipped = inject_bit_flips(w, flips=[(0, 7), (1, 7), (2, 7), (3, 7)])
    assert flipped.tolist() == [5 - 128, -3 + 128, -1, 0]
    assert inject_bit_flips(w, flips=[(0, 0)]).tolist() == [4, -3, 127, -128]
    a = inject_bit_flips(np.arange(-50, 50), ber=0.1, seed=5)
    assert np.array_equal(a, inject_bit_flips(np.arange(-50, 50), ber=0.1, seed=5))


def sweep_oracle(q, X, y, cands):
    """Every single-bit flip evaluated independently; (acc, -loss, w, b) minimum."""
    best = None
    words = q.words()
    for w, b in cands:
        flat = words.copy()
        u = int(flat[w]) & 0xFF
        u ^= 1 << b
        flat[w] = u - 256 if u >= 128 else u
        logits = q.with_words(flat).forward(X)
        key = (float(np.mean(logits.argmax(1) == y)), -softmax_xent(logits, y)[0], w, b)
        best = key if best is None or key < best else best
    return best[2], best[3]


def test_vulnerable_bit_k1_matches_sweep():
    b = bundled()
    q = b.q
    X, y = b.task.X_test[:128], b.task.y_test[:128]
    # a dominant weight: its sign bit should be the single most damaging flip
    codes = [c.copy() for c in q.codes]
    codes[1][5, 2] = 127
    q2 = q.with_codes(codes)
    pool = [(w, bit) for w in range(q2.n_words) for bit in range(8)]
    rng = np.random.default_rng(0)
    pick = sorted(rng.choice(len(pool), size=200, replace=False))
    assert find_vulnerable_bits(q2, X, y, 1, pool_size=200, seed=0) == [sweep_oracle(q2, X, y, [pool[i] for i in pick])]
    with pytest.raises(ValueError):
        find_vulnerable_bits(q, X, y, 0)


# ----------------------------------------------------------------- FAT


def test_retrain_empty_map_is_continued_training():
    b = bundled()
    net = fault_aware_retrain(b.net, FaultMap((4, 4)), None, 5, 0, b.task.X_train, b.task.y_train)
    assert abs(net.accuracy(b.task.X_test, b.task.y_test) - b.net.accuracy(b.task.X_test, b.task.y_test)) <= 0.03
    cont = b.net.train(b.task.X_train, b.task.y_train, 5, 0)
    assert all(np.allclose(a, c) for a, c in zip(net.weights, cont.weights))


def test_masked_gradient_zero():
    b = bundled()
    fm = generate_fault_map((4, 4), 0.25, seed=1)
    masks = [m.astype(float) for m in layer_masks(b.net.dims, fm)]
    _, gws, _ = b.net.loss_and_grads(b.task.X_train[:64], b.task.y_train[:64], masks)
    for g, m in zip(gws, masks):
        assert np.all(g[m == 0] == 0)
    net = fault_aware_retrain(b.net, fm, None, 2, 0, b.task.X_train, b.task.y_train)
    for w, m in zip(net.weights, masks):
        assert np.all(w[m == 0] == 0)
    again = fault_aware_retrain(b.net, fm, None, 2, 0, b.task.X_train, b.task.y_train)
    assert all(np.array_equal(a, c) for a, c in zip(net.weights, again.weights))
