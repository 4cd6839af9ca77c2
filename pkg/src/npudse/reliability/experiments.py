"""Seeded fault/mitigation trials on the bundled TinyNet task."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .faults import (
    FaultMap,
    apply_memory_faults,
    chain_wipe_mask,
    fap_mask,
    fault_aware_map,
    generate_fault_map,
    identity_assignment,
    inject_bit_flips,
    magnitude_saliency,
    tiled_assignment,
)
from .mitigations import (
    fault_aware_retrain,
    forced_flips,
    profile_ranges,
    random_drop_keep,
    te_drop_keep,
)
from .tinynet import QuantNet, Task, TinyNet, make_task

ARRAY_SHAPE = (4, 4)
TRAIN_EPOCHS = 60
RETRAIN_EPOCHS = 10
CONDITIONS = ("unmitigated", "fap", "fap+fam", "fap+fat")


@dataclass(frozen=True)
class Bundle:
    task: Task
    net: TinyNet
    q: QuantNet


@lru_cache(maxsize=4)
def bundled(seed: int = 0) -> Bundle:
    """The bundled task and its trained baseline (deterministic)."""
    task = make_task(seed)
    net = TinyNet.init(seed=seed).train(task.X_train, task.y_train, TRAIN_EPOCHS, seed)
    return Bundle(task, net, net.quantize())


def identity_assignments(q: QuantNet, cols: int) -> list[np.ndarray]:
    return [identity_assignment(c.shape[1], cols) for c in q.codes]


def fam_assignments(q: QuantNet, fm: FaultMap) -> list[np.ndarray]:
    rows, cols = fm.shape
    out = []
    for c in q.codes:
        perm = fault_aware_map(magnitude_saliency(c, rows, cols), fm)
        out.append(tiled_assignment(perm, c.shape[1]))
    return out


def condition_accuracy(b: Bundle, fm: FaultMap, condition: str, seed: int) -> float:
    """Test accuracy of the baseline deployed on a PE-faulty array under ``condition``."""
    task, q = b.task, b.q
    ident = identity_assignments(q, fm.shape[1])
    if condition == "unmitigated":
        keep = [chain_wipe_mask(c.shape[0], a, fm) for c, a in zip(q.codes, ident)]
    elif condition == "fap":
        keep = [fap_mask(c.shape[0], a, fm) for c, a in zip(q.codes, ident)]
    elif condition == "fap+fam":
        keep = [fap_mask(c.shape[0], a, fm) for c, a in zip(q.codes, fam_assignments(q, fm))]
    elif condition == "fap+fat":
        if not fm.pe_faults:
            return q.accuracy(task.X_test, task.y_test)  # nothing to retrain around
        net = fault_aware_retrain(b.net, fm, None, RETRAIN_EPOCHS, seed, task.X_train, task.y_train)
        q = net.quantize()
        keep = [fap_mask(c.shape[0], a, fm) for c, a in zip(q.codes, ident)]
    else:
        raise ValueError(f"unknown condition {condition!r}")
    return q.accuracy(task.X_test, task.y_test, weight_keep=keep)


def _sweep_row(args):
    rate, seed, conditions = args
    b = bundled()
    fm = generate_fault_map(ARRAY_SHAPE, rate, seed=seed)
    return [rate, seed] + [condition_accuracy(b, fm, c, seed) for c in conditions]


def sweep(
    rates: Sequence[float],
    seeds: int | Sequence[int],
    conditions: Sequence[str] = CONDITIONS,
    jobs: int = 1,
) -> list[list]:
    """Rows ``[rate, seed, acc(condition)...]`` for every (rate, seed)."""
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    work = [(r, s, tuple(conditions)) for r in rates for s in seed_list]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_sweep_row, work))
    return [_sweep_row(w) for w in work]


def rows_to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


# --------------------------------------------------------- single trials

HIGH_ORDER_BITS = (7, 6)


def range_restriction_trial(seed: int, ber: float = 0.01) -> tuple[float, float]:
    """(unprotected, range-restricted) accuracy under stuck high-order weight bits."""
    b = bundled()
    q = b.q
    fm = generate_fault_map(
        ARRAY_SHAPE, 0.0, ber, word_count=q.n_words, word_width=q.word_width, seed=seed,
        bit_positions=HIGH_ORDER_BITS,
    )
    faulty = q.with_words(apply_memory_faults(q.words(), fm))
    bounds = profile_ranges(q, b.task.X_train)
    X, y = b.task.X_test, b.task.y_test
    return faulty.accuracy(X, y), faulty.accuracy(X, y, bounds=bounds)


def flip_asymmetry_trial(seed: int, n_flips: int = 8) -> tuple[float, float]:
    """(drop from forced 0->1 flips, drop from forced 1->0 flips)."""
    b = bundled()
    q = b.q
    X, y = b.task.X_test, b.task.y_test
    base = q.accuracy(X, y)
    drops = []
    for to in (1, 0):
        flips = forced_flips(q, n_flips, to, seed)
        drops.append(base - q.with_words(inject_bit_flips(q.words(), flips)).accuracy(X, y))
    return drops[0], drops[1]


def te_drop_trial(seed: int, p: float = 0.01) -> tuple[float, float]:
    """(TE-Drop accuracy, accuracy with the same fraction of products zeroed at random)."""
    b = bundled()
    q = b.q
    X, y = b.task.X_test, b.task.y_test
    te = q.accuracy(X, y, product_keep=te_drop_keep(q, len(X), p, seed, ARRAY_SHAPE[0]))
    rnd = q.accuracy(X, y, product_keep=random_drop_keep(q, len(X), p, seed))
    return te, rnd
