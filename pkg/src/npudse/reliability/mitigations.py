"""Range restriction, timing-error bypass, bit-flip search and fault-aware retraining."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .faults import FaultMap, fap_mask, identity_assignment, inject_bit_flips
from .tinynet import QuantNet, TinyNet, softmax_xent


@dataclass(frozen=True)
class RangeBounds:
    layers: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for lo, hi in self.layers:
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"invalid bounds ({lo}, {hi})")

    def dumps(self) -> str:
        return json.dumps({"layers": [list(b) for b in self.layers]})


def profile_ranges(net: TinyNet | QuantNet, calibration: np.ndarray) -> RangeBounds:
    """Per-layer (min, max) of the deployed net's layer outputs."""
    calibration = np.asarray(calibration)
    if calibration.ndim != 2 or calibration.shape[0] == 0:
        raise ValueError("empty calibration set")
    q = net.quantize() if isinstance(net, TinyNet) else net
    _, outs = q.forward(calibration, return_acts=True)
    layers = []
    for i, o in enumerate(outs):
        s = 2.0 ** q.output_scale(i)
        layers.append((float(o.min()) / s, float(o.max()) / s))
    return RangeBounds(tuple(layers))


def range_restrict(x, bounds: tuple[float, float]) -> np.ndarray:
    """Clamp into [low, high]. +inf/-inf go to the matching bound, NaN to ``low``."""
    lo, hi = bounds
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ValueError(f"invalid bounds ({lo}, {hi})")
    x = np.asarray(x, dtype=float)
    return np.where(np.isnan(x), lo, np.clip(x, lo, hi))


# ---------------------------------------------------------------- TE-Drop


def _check_p(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"error probability must lie in [0, 1], got {p}")


def chain_skip(err: np.ndarray, axis: int, chain: int | None = None) -> np.ndarray:
    """Skipped-MAC mask for timing errors along ``axis``.

    An erroneous MAC recomputes its own update by stealing the next cycle, so
    the next MAC in the chain is skipped. A skipped MAC does not compute and so
    cannot err. Chains restart every ``chain`` positions.
    """
    err = np.moveaxis(np.asarray(err, dtype=bool), axis, 0)
    skipped = np.zeros_like(err)
    n = err.shape[0]
    chain = n if chain is None else chain
    for i in range(1, n):
        if i % chain:
            skipped[i] = err[i - 1] & ~skipped[i - 1]
    return np.moveaxis(skipped, 0, axis)


def te_drop_dot(x: Sequence[float], w: Sequence[float], p: float, seed: int = 0) -> float:
    """A single dot product evaluated on a MAC chain with timing errors."""
    _check_p(p)
    x, w = np.asarray(x), np.asarray(w)
    err = np.random.default_rng(seed).random(x.size) < p
    keep = ~chain_skip(err, 0)
    return float(np.sum(x * w * keep))


def te_drop_keep(q: QuantNet, m: int, p: float, seed: int, rows: int) -> list[np.ndarray]:
    """Product keep-masks for every layer; the input index runs down the array rows."""
    _check_p(p)
    rng = np.random.default_rng(seed)
    out = []
    for c in q.codes:
        err = rng.random((m, *c.shape)) < p
        out.append(~chain_skip(err, 1, rows))
    return out


def random_drop_keep(q: QuantNet, m: int, p: float, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.random((m, *c.shape)) >= p for c in q.codes]


def te_drop_sim(net: TinyNet | QuantNet, X: np.ndarray, p: float, seed: int, rows: int = 4) -> np.ndarray:
    """Logits of ``net`` on ``X`` when every MAC errs with probability ``p``."""
    q = net.quantize() if isinstance(net, TinyNet) else net
    return q.forward(X, product_keep=te_drop_keep(q, len(X), p, seed, rows))


# ---------------------------------------------------------- bit-flip search


def _rank_key(acc: float, loss: float, w: int, b: int):
    return (acc, -loss, w, b)


def find_vulnerable_bits(
    q: QuantNet,
    X: np.ndarray,
    y: np.ndarray,
    k: int,
    pool_size: int | None = None,
    seed: int = 0,
) -> list[tuple[int, int]]:
    """Progressive greedy search for the ``k`` most damaging weight-bit flips.

    Each step tries every remaining candidate and keeps the one giving the
    lowest accuracy (ties: highest loss, then lowest word, then lowest bit).
    The candidate pool is every bit, or a seeded sample of ``pool_size``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cands = [(w, b) for w in range(q.n_words) for b in range(q.word_width)]
    if pool_size is not None and pool_size < len(cands):
        pick = np.random.default_rng(seed).choice(len(cands), size=pool_size, replace=False)
        cands = [cands[i] for i in sorted(pick)]
    words = q.words()
    chosen: list[tuple[int, int]] = []
    for _ in range(min(k, len(cands))):
        best = None
        for w, b in cands:
            if (w, b) in chosen:
                continue
            trial = q.with_words(inject_bit_flips(words, [(w, b)], word_width=q.word_width))
            logits = trial.forward(X)
            acc = float(np.mean(logits.argmax(axis=1) == y))
            key = _rank_key(acc, softmax_xent(logits, y)[0], w, b)
            if best is None or key < best:
                best = key
        w, b = best[2], best[3]
        chosen.append((w, b))
        words = inject_bit_flips(words, [(w, b)], word_width=q.word_width)
    return chosen


def random_flips(q: QuantNet, k: int, seed: int) -> list[tuple[int, int]]:
    rng = np.random.default_rng(seed)
    idx = rng.choice(q.n_words * q.word_width, size=k, replace=False)
    return [(int(i) // q.word_width, int(i) % q.word_width) for i in idx]


def forced_flips(q: QuantNet, n: int, to_value: int, seed: int) -> list[tuple[int, int]]:
    """``n`` random bits currently holding ``1 - to_value``."""
    u = q.words() & ((1 << q.word_width) - 1)
    bits = (u[:, None] >> np.arange(q.word_width)) & 1
    w, b = np.nonzero(bits == 1 - to_value)
    pick = np.random.default_rng(seed).choice(w.size, size=min(n, w.size), replace=False)
    return [(int(w[i]), int(b[i])) for i in sorted(pick)]


# ------------------------------------------------------ fault-aware retrain


def layer_masks(
    dims: Sequence[int], fm: FaultMap, assignments: Sequence[Sequence[int]] | None = None
) -> list[np.ndarray]:
    """FAP keep-masks for every layer of an MLP mapped weight-stationary on ``fm``'s array."""
    cols = fm.shape[1]
    out = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        assign = identity_assignment(b, cols) if assignments is None else assignments[i]
        out.append(fap_mask(a, assign, fm))
    return out


def fault_aware_retrain(
    net: TinyNet,
    fm: FaultMap,
    assignments: Sequence[Sequence[int]] | None,
    epochs: int,
    seed: int,
    X: np.ndarray,
    y: np.ndarray,
    lr: float | None = None,
) -> TinyNet:
    """Continue training with faulty positions masked in both passes."""
    masks = [m.astype(float) for m in layer_masks(net.dims, fm, assignments)]
    return net.train(X, y, epochs, seed, masks=masks, lr=lr)
