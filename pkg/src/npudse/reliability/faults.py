"""Fault maps, fault-aware pruning and saliency-driven fault-aware mapping."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

EXACT_MAPPING_LIMIT = 8


@dataclass(frozen=True)
class FaultMap:
    shape: tuple[int, int]
    pe_faults: tuple[tuple[int, int], ...] = ()
    memory_faults: tuple[tuple[int, int, int], ...] = ()  # (word, bit, stuck value)
    word_width: int = 8
    seed: int | None = None
    params: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        rows, cols = self.shape
        for r, c in self.pe_faults:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(f"PE fault ({r},{c}) outside {rows}x{cols} array")
        for w, b, v in self.memory_faults:
            if w < 0 or not 0 <= b < self.word_width or v not in (0, 1):
                raise ValueError(f"bad memory fault {(w, b, v)}")

    def pe_mask(self) -> np.ndarray:
        """Boolean (rows, cols) array, True where the PE is faulty."""
        m = np.zeros(self.shape, dtype=bool)
        for r, c in self.pe_faults:
            m[r, c] = True
        return m

    def column_fault_counts(self) -> np.ndarray:
        return self.pe_mask().sum(axis=0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "shape": list(self.shape),
            "pe_faults": [[r, c, "stuck_mac_zero"] for r, c in self.pe_faults],
            "memory_faults": [list(f) for f in self.memory_faults],
            "word_width": self.word_width,
            "seed": self.seed,
            "params": self.params,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def loads(cls, text: str) -> "FaultMap":
        d = json.loads(text)
        return cls(
            shape=tuple(d["shape"]),
            pe_faults=tuple((r, c) for r, c, *_ in d.get("pe_faults", [])),
            memory_faults=tuple(tuple(f) for f in d.get("memory_faults", [])),
            word_width=d.get("word_width", 8),
            seed=d.get("seed"),
            params=d.get("params", {}),
        )


def _check_rate(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


def generate_fault_map(
    shape: tuple[int, int],
    pe_fault_rate: float,
    mem_bit_error_rate: float = 0.0,
    word_count: int = 0,
    word_width: int = 8,
    seed: int = 0,
    bit_positions: Sequence[int] | None = None,
) -> FaultMap:
    """Independent Bernoulli PE faults and stuck memory bits, reproducible per seed.

    ``bit_positions`` restricts memory faults to those bits (e.g. high-order ones).
    """
    _check_rate("pe_fault_rate", pe_fault_rate)
    _check_rate("mem_bit_error_rate", mem_bit_error_rate)
    rng = np.random.default_rng(seed)
    faulty = rng.random(shape) < pe_fault_rate
    pe = tuple((int(r), int(c)) for r, c in zip(*np.nonzero(faulty)))
    bits = list(range(word_width)) if bit_positions is None else list(bit_positions)
    hit = rng.random((word_count, len(bits))) < mem_bit_error_rate
    values = rng.integers(0, 2, size=(word_count, len(bits)))
    mem = tuple((int(w), int(bits[j]), int(values[w, j])) for w, j in zip(*np.nonzero(hit)))
    params = {
        "pe_fault_rate": pe_fault_rate,
        "mem_bit_error_rate": mem_bit_error_rate,
        "word_count": word_count,
        "bit_positions": bits,
    }
    return FaultMap(tuple(shape), pe, mem, word_width, seed, params)


# ------------------------------------------------------------- bit level


def to_unsigned(words: np.ndarray, width: int) -> np.ndarray:
    return np.asarray(words, dtype=np.int64) & ((1 << width) - 1)


def to_signed(u: np.ndarray, width: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.int64)
    return np.where(u >= 1 << (width - 1), u - (1 << width), u)


def inject_bit_flips(
    words: np.ndarray,
    flips: Iterable[tuple[int, int]] | None = None,
    ber: float | None = None,
    seed: int = 0,
    word_width: int = 8,
) -> np.ndarray:
    """Invert exactly ``flips`` (word, bit) or, with ``ber``, each bit with that probability."""
    flat = to_unsigned(np.asarray(words).ravel(), word_width).copy()
    if flips is not None:
        for w, b in flips:
            flat[w] ^= 1 << b
    if ber is not None:
        _check_rate("ber", ber)
        hit = np.random.default_rng(seed).random((flat.size, word_width)) < ber
        mask = (hit * (1 << np.arange(word_width))).sum(axis=1)
        flat ^= mask
    return to_signed(flat, word_width).reshape(np.shape(words))


def apply_memory_faults(words: np.ndarray, fm: FaultMap, offset: int = 0) -> np.ndarray:
    """Force stuck bits of ``fm`` onto words ``offset .. offset + size``."""
    flat = to_unsigned(np.asarray(words).ravel(), fm.word_width).copy()
    for w, b, v in fm.memory_faults:
        i = w - offset
        if 0 <= i < flat.size:
            flat[i] = flat[i] | (1 << b) if v else flat[i] & ~(1 << b)
    return to_signed(flat, fm.word_width).reshape(np.shape(words))


# ------------------------------------------------------------ PE faults


def fap_mask(n_rows: int, assignment: Sequence[int], fm: FaultMap) -> np.ndarray:
    """Keep-mask for a (n_rows, n_filters) weight matrix held weight-stationary.

    Weight ``(i, j)`` sits on PE ``(i % rows, assignment[j])``.
    """
    rows, cols = fm.shape
    assignment = np.asarray(assignment, dtype=int)
    if assignment.size and (assignment.min() < 0 or assignment.max() >= cols):
        raise ValueError(f"assignment references a column outside the {rows}x{cols} array")
    faulty = fm.pe_mask()
    return ~faulty[np.arange(n_rows)[:, None] % rows, assignment[None, :]]


def chain_wipe_mask(n_rows: int, assignment: Sequence[int], fm: FaultMap) -> np.ndarray:
    """Keep-mask when faulty MACs are *not* bypassed: the partial sum leaving a
    faulty PE is stuck at zero, losing every product accumulated above it in
    its column for that row chunk."""
    rows, _ = fm.shape
    faulty = fm.pe_mask()
    # deepest faulty row per column, -1 if none
    deepest = np.where(faulty.any(axis=0), rows - 1 - np.argmax(faulty[::-1], axis=0), -1)
    assignment = np.asarray(assignment, dtype=int)
    r = np.arange(n_rows)[:, None] % rows
    return r > deepest[assignment][None, :]


def apply_fap(assignment: Sequence[int], weights: np.ndarray, fm: FaultMap) -> np.ndarray:
    """Zero every weight that lands on a faulty MAC; others are returned unchanged."""
    w = np.asarray(weights)
    return np.where(fap_mask(w.shape[0], assignment, fm), w, 0).astype(w.dtype)


def identity_assignment(n_filters: int, cols: int) -> np.ndarray:
    return np.arange(n_filters) % cols


def tiled_assignment(perm: Sequence[int], n_filters: int) -> np.ndarray:
    """Filter ``j`` goes to column ``perm[j % cols]``."""
    perm = np.asarray(perm, dtype=int)
    return perm[np.arange(n_filters) % perm.size]


# ------------------------------------------------------ fault-aware mapping


def magnitude_saliency(weights: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """(cols, rows) saliency: summed |w| of the weights each column slot would
    place on each array row, for filters tiled ``j % cols``."""
    w = np.abs(np.asarray(weights, dtype=float))
    sal = np.zeros((cols, rows))
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            sal[j % cols, i % rows] += w[i, j]
    return sal


def mapping_cost_matrix(sal: np.ndarray, fm: FaultMap) -> np.ndarray:
    """cost[j, c]: saliency lost when filter ``j`` is placed on column ``c``."""
    faulty = fm.pe_mask().astype(float)
    sal = np.asarray(sal, dtype=float)
    if sal.ndim == 1:
        return sal[:, None] * faulty.sum(axis=0)[None, :]
    return sal @ faulty


def mapping_cost(perm: Sequence[int], sal: np.ndarray, fm: FaultMap) -> float:
    cost = mapping_cost_matrix(sal, fm)
    return float(sum(cost[j, c] for j, c in enumerate(perm)))


def _lsa_value(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def fault_aware_map(sal: np.ndarray, fm: FaultMap) -> np.ndarray:
    """Filter -> column permutation placing the least salient weights on faulty PEs.

    Up to ``EXACT_MAPPING_LIMIT`` filters the result is optimal and, among
    optima, lexicographically smallest (so fault-free or uniformly faulty
    arrays give the identity). Larger instances use a greedy ordering.
    """
    sal = np.asarray(sal, dtype=float)
    n = sal.shape[0]
    if n != fm.shape[1]:
        raise ValueError(f"{n} filters for {fm.shape[1]} columns")
    if not np.all(np.isfinite(sal)) or np.any(sal < 0):
        raise ValueError("saliency must be finite and non-negative")
    cost = mapping_cost_matrix(sal, fm)
    if n > EXACT_MAPPING_LIMIT:
        per_filter = sal if sal.ndim == 1 else sal.sum(axis=1)
        filters = sorted(range(n), key=lambda j: (per_filter[j], j))
        counts = fm.column_fault_counts()
        columns = sorted(range(n), key=lambda c: (-counts[c], c))
        perm = np.empty(n, dtype=int)
        for j, c in zip(filters, columns):
            perm[j] = c
        return perm
    best = _lsa_value(cost)
    tol = 1e-12 * max(1.0, abs(best))
    perm = np.empty(n, dtype=int)
    free_rows, free_cols = list(range(n)), list(range(n))
    fixed = 0.0
    for j in range(n):
        free_rows.remove(j)
        for c in sorted(free_cols):
            rest = [x for x in free_cols if x != c]
            val = fixed + cost[j, c] + _lsa_value(cost[np.ix_(free_rows, rest)])
            if val <= best + tol:
                perm[j] = c
                fixed += cost[j, c]
                free_cols = rest
                break
    return perm


def exhaustive_min_cost(sal: np.ndarray, fm: FaultMap) -> float:
    cost = mapping_cost_matrix(sal, fm)
    n = cost.shape[0]
    return min(float(sum(cost[j, p[j]] for j in range(n))) for p in itertools.permutations(range(n)))
