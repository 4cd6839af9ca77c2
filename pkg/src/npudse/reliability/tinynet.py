"""A tiny ReLU MLP with float training and bit-exact fixed-point inference.

Weights are stored as signed ``word_width``-bit codes with a per-tensor
power-of-two scale. Activations are carried as wide fixed-point integers
(``act_frac_bits`` fractional bits) so that only the weight words are subject
to bit-level faults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class Task:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int


def make_task(
    seed: int = 0,
    n_train: int = 512,
    n_test: int = 512,
    dims: int = 16,
    n_classes: int = 4,
    clusters_per_class: int = 2,
    separation: float = 0.9,
) -> Task:
    """Seeded Gaussian-cluster classification (several clusters per class)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(n_classes * clusters_per_class, dims))
    owner = np.repeat(np.arange(n_classes), clusters_per_class)

    def draw(n):
        k = rng.integers(0, centers.shape[0], size=n)
        return centers[k] + rng.normal(size=(n, dims)), owner[k]

    Xtr, ytr = draw(n_train)
    Xte, yte = draw(n_test)
    return Task(Xtr, ytr, Xte, yte, n_classes)


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = y.shape[0]
    loss = -np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean()
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return float(loss), g / n


@dataclass
class TinyNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    word_width: int = 8
    act_frac_bits: int = 8
    lr: float = 0.1
    batch_size: int = 32
    activation: str = "relu"

    def __post_init__(self):
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("inconsistent layer dims")
        for w in self.weights:
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite weights")

    @classmethod
    def init(cls, dims: Sequence[int] = (16, 32, 4), seed: int = 0, **hp) -> "TinyNet":
        rng = np.random.default_rng(seed)
        ws = [rng.normal(0, math.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims, dims[1:])]
        bs = [np.zeros(b) for b in dims[1:]]
        return cls(ws, bs, **hp)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def copy(self) -> "TinyNet":
        return replace(self, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases])

    def _eff(self, masks):
        if masks is None:
            return self.weights
        return [w if m is None else w * m for w, m in zip(self.weights, masks)]

    def forward(self, X: np.ndarray, masks=None) -> np.ndarray:
        a = X
        ws = self._eff(masks)
        for i, (w, b) in enumerate(zip(ws, self.biases)):
            a = a @ w + b
            if i < len(ws) - 1:
                a = np.maximum(a, 0.0)
        return a

    def loss(self, X, y, masks=None) -> float:
        return softmax_xent(self.forward(X, masks), y)[0]

    def loss_and_grads(self, X, y, masks=None):
        ws = self._eff(masks)
        acts = [X]
        a = X
        for i, (w, b) in enumerate(zip(ws, self.biases)):
            a = a @ w + b
            if i < len(ws) - 1:
                a = np.maximum(a, 0.0)
            acts.append(a)
        loss, g = softmax_xent(a, y)
        gws, gbs = [None] * len(ws), [None] * len(ws)
        for i in range(len(ws) - 1, -1, -1):
            if i < len(ws) - 1:
                g = g * (acts[i + 1] > 0)
            gws[i] = acts[i].T @ g
            gbs[i] = g.sum(axis=0)
            if masks is not None and masks[i] is not None:
                gws[i] = gws[i] * masks[i]
            g = g @ ws[i].T
        return loss, gws, gbs

    def train(self, X, y, epochs: int, seed: int, masks=None, lr: float | None = None) -> "TinyNet":
        """Seeded mini-batch SGD; returns a new net."""
        net = self.copy()
        lr = self.lr if lr is None else lr
        rng = np.random.default_rng(seed)
        n = X.shape[0]
        for _ in range(epochs):
            order = rng.permutation(n)
            for s in range(0, n, self.batch_size):
                idx = order[s : s + self.batch_size]
                _, gws, gbs = net.loss_and_grads(X[idx], y[idx], masks)
                for w, gw in zip(net.weights, gws):
                    w -= lr * gw
                for b, gb in zip(net.biases, gbs):
                    b -= lr * gb
        if masks is not None:
            for w, m in zip(net.weights, masks):
                if m is not None:
                    w *= m
        return net

    def accuracy(self, X, y, masks=None) -> float:
        return float(np.mean(self.forward(X, masks).argmax(axis=1) == y))

    def quantize(self) -> "QuantNet":
        codes, fracs, biases = [], [], []
        qmax = (1 << (self.word_width - 1)) - 1
        fa = self.act_frac_bits
        for w, b in zip(self.weights, self.biases):
            m = float(np.max(np.abs(w)))
            f = int(math.floor(math.log2(qmax / m))) if m > 0 else self.word_width - 1
            codes.append(np.clip(np.round(w * 2.0**f), -qmax - 1, qmax).astype(np.int64))
            fracs.append(f)
            biases.append(np.round(b * 2.0 ** (fa + f)).astype(np.int64))
        return QuantNet(codes, fracs, biases, fa, self.word_width)


def shift_round(x: np.ndarray, shift: int) -> np.ndarray:
    """x / 2**shift, rounded half up, in integers."""
    if shift <= 0:
        return x << -shift
    return (x + (1 << (shift - 1))) >> shift


MatmulHook = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class QuantNet:
    codes: list[np.ndarray]
    w_frac: list[int]
    biases: list[np.ndarray]
    act_frac_bits: int = 8
    word_width: int = 8
    _offsets: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._offsets = [int(x) for x in np.cumsum([0] + [c.size for c in self.codes])]

    @property
    def n_layers(self) -> int:
        return len(self.codes)

    @property
    def n_words(self) -> int:
        return self._offsets[-1]

    def words(self) -> np.ndarray:
        return np.concatenate([c.ravel() for c in self.codes])

    def offset(self, layer: int) -> int:
        return self._offsets[layer]

    def with_words(self, flat: np.ndarray) -> "QuantNet":
        flat = np.asarray(flat, dtype=np.int64)
        codes = [flat[a:b].reshape(c.shape).copy() for a, b, c in zip(self._offsets, self._offsets[1:], self.codes)]
        return replace(self, codes=codes)

    def with_codes(self, codes: list[np.ndarray]) -> "QuantNet":
        return replace(self, codes=[np.asarray(c, dtype=np.int64) for c in codes])

    def output_scale(self, layer: int) -> int:
        """Fractional bits of layer ``layer``'s output."""
        if layer < self.n_layers - 1:
            return self.act_frac_bits
        return self.act_frac_bits + self.w_frac[layer]

    def input_codes(self, X: np.ndarray) -> np.ndarray:
        return np.round(np.asarray(X, dtype=float) * 2.0**self.act_frac_bits).astype(np.int64)

    def forward(
        self,
        X: np.ndarray,
        weight_keep: Sequence[np.ndarray | None] | None = None,
        product_keep: Sequence[np.ndarray | None] | None = None,
        bounds=None,
        matmul: MatmulHook | None = None,
        return_acts: bool = False,
    ):
        """Integer inference; returns float logits (and per-layer output codes)."""
        a = self.input_codes(X)
        outs = []
        for i, (w, b) in enumerate(zip(self.codes, self.biases)):
            if weight_keep is not None and weight_keep[i] is not None:
                w = w * weight_keep[i]
            if product_keep is not None and product_keep[i] is not None:
                acc = np.einsum("mi,ij,mij->mj", a, w, product_keep[i].astype(np.int64))
            elif matmul is not None:
                acc = matmul(i, a, w)
            else:
                acc = a @ w
            acc = acc + b
            if i < self.n_layers - 1:
                acc = shift_round(np.maximum(acc, 0), self.w_frac[i])
            if bounds is not None:
                lo, hi = bounds.layers[i]
                s = 2.0 ** self.output_scale(i)
                acc = np.clip(acc, math.ceil(lo * s), math.floor(hi * s))
            outs.append(acc)
            a = acc
        logits = a / 2.0 ** self.output_scale(self.n_layers - 1)
        return (logits, outs) if return_acts else logits

    def accuracy(self, X, y, **kw) -> float:
        if len(y) == 0:
            raise ValueError("empty dataset")
        return float(np.mean(self.forward(X, **kw).argmax(axis=1) == y))

    def loss(self, X, y, **kw) -> float:
        return softmax_xent(self.forward(X, **kw), y)[0]
