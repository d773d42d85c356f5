"""Classical anomaly detectors: Isolation Forest, LOF, and an autoencoder.

All three are trained once on source-product data and never updated, which
is the point — static detectors treat every later product change as an
anomaly burst.  Scores are calibrated to a common threshold rule: the
(1 - contamination) quantile of the training scores; ``classify`` flags
strictly above the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import SegmentDescriptor
from .tinynn import Adam, Network, NetworkSpec, OptimizerConfig

__all__ = [
    "IsolationForest",
    "LocalOutlierFactor",
    "AutoencoderDetector",
    "SegmentEvaluation",
    "evaluate_on_stream",
]

DEFAULT_CONTAMINATION = 0.085


def _average_path_length(n: np.ndarray | float) -> np.ndarray | float:
    """Expected unsuccessful-search path length c(n) of a binary search tree."""

    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    two = n == 2
    big = n > 2
    out[two] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + np.euler_gamma) - 2.0 * (nb - 1.0) / nb
    return out


class _IsolationTree:
    """Flat-array isolation tree; vectorised batch traversal."""

    __slots__ = ("feature", "threshold", "left", "right", "size", "depth", "_next")

    def __init__(self, x: np.ndarray, rng: np.random.Generator, max_depth: int) -> None:
        cap = 2 * x.shape[0] + 1
        self.feature = np.full(cap, -1, dtype=int)
        self.threshold = np.zeros(cap)
        self.left = np.full(cap, -1, dtype=int)
        self.right = np.full(cap, -1, dtype=int)
        self.size = np.zeros(cap, dtype=int)
        self.depth = np.zeros(cap, dtype=int)
        self._next = 0
        self._build(x, rng, 0, max_depth)

    def _new_node(self, depth: int, size: int) -> int:
        node = self._next
        self._next += 1
        self.depth[node] = depth
        self.size[node] = size
        return node

    def _build(self, x: np.ndarray, rng: np.random.Generator, depth: int, max_depth: int) -> int:
        node = self._new_node(depth, x.shape[0])
        if x.shape[0] <= 1 or depth >= max_depth:
            return node
        spans = x.max(axis=0) - x.min(axis=0)
        usable = np.flatnonzero(spans > 0)
        if usable.size == 0:
            return node
        feature = int(rng.choice(usable))
        lo, hi = x[:, feature].min(), x[:, feature].max()
        split = float(rng.uniform(lo, hi))
        mask = x[:, feature] < split
        self.feature[node] = feature
        self.threshold[node] = split
        self.left[node] = self._build(x[mask], rng, depth + 1, max_depth)
        self.right[node] = self._build(x[~mask], rng, depth + 1, max_depth)
        return node

    def path_lengths(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            cur = node[idx]
            go_left = x[idx, self.feature[cur]] < self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active[idx] = self.feature[node[idx]] >= 0
        return self.depth[node] + _average_path_length(self.size[node])


class IsolationForest:
    """Random isolation trees with the standard path-length normalisation."""

    def __init__(
        self,
        n_trees: int = 100,
        subsample: int = 256,
        contamination: float = DEFAULT_CONTAMINATION,
        seed: int = 0,
    ) -> None:
        if n_trees < 1 or subsample < 1:
            raise ValueError("n_trees and subsample must be >= 1")
        if not 0.0 < contamination < 1.0:
            raise ValueError("contamination must lie in (0, 1)")
        self.n_trees = n_trees
        self.subsample = subsample
        self.contamination = contamination
        self.seed = seed
        self._trees: list[_IsolationTree] = []
        self._c_norm = 1.0
        self.threshold: float | None = None

    def fit(self, x: np.ndarray) -> "IsolationForest":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 0:
            raise ValueError("training set must be non-empty")
        rng = np.random.default_rng(self.seed)
        psi = min(self.subsample, x.shape[0])
        max_depth = max(1, math.ceil(math.log2(max(psi, 2))))
        self._trees = []
        for _ in range(self.n_trees):
            rows = rng.choice(x.shape[0], size=psi, replace=False)
            self._trees.append(_IsolationTree(x[rows], rng, max_depth))
        self._c_norm = float(_average_path_length(np.array([psi]))[0]) or 1.0
        self.threshold = float(
            np.quantile(self.score(x), 1.0 - self.contamination)
        )
        return self

    def score(self, x: np.ndarray) -> np.ndarray:
        if not self._trees:
            raise RuntimeError("detector is not fitted")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        depths = np.zeros(x.shape[0])
        for tree in self._trees:
            depths += tree.path_lengths(x)
        mean_depth = depths / len(self._trees)
        return np.asarray(2.0 ** (-mean_depth / self._c_norm))

    def classify(self, x: np.ndarray) -> np.ndarray:
        if self.threshold is None:
            raise RuntimeError("detector is not fitted")
        return (self.score(x) > self.threshold).astype(int)


class LocalOutlierFactor:
    """Brute-force LOF with novelty scoring against the fitted set."""

    def __init__(
        self,
        k: int = 20,
        contamination: float = DEFAULT_CONTAMINATION,
        chunk: int = 512,
    ) -> None:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < contamination < 1.0:
            raise ValueError("contamination must lie in (0, 1)")
        self.k = k
        self.contamination = contamination
        self.chunk = chunk
        self._x: np.ndarray | None = None
        self._k_dist: np.ndarray | None = None
        self._lrd: np.ndarray | None = None
        self.threshold: float | None = None

    def _neighbours(
        self, rows: np.ndarray, exclude_self: bool
    ) -> tuple[np.ndarray, np.ndarray]:
        """k nearest fitted points per row: (indices, distances)."""

        assert self._x is not None
        k = min(self.k, self._x.shape[0] - (1 if exclude_self else 0))
        k = max(k, 1)
        idx = np.empty((rows.shape[0], k), dtype=int)
        dist = np.empty((rows.shape[0], k))
        for lo in range(0, rows.shape[0], self.chunk):
            hi = min(lo + self.chunk, rows.shape[0])
            diff = rows[lo:hi, None, :] - self._x[None, :, :]
            d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
            if exclude_self:
                span = np.arange(lo, hi)
                d[span - lo, span] = np.inf
            part = np.argpartition(d, k - 1, axis=1)[:, :k]
            pd = np.take_along_axis(d, part, axis=1)
            order = np.argsort(pd, axis=1)
            idx[lo:hi] = np.take_along_axis(part, order, axis=1)
            dist[lo:hi] = np.take_along_axis(pd, order, axis=1)
        return idx, dist

    def fit(self, x: np.ndarray) -> "LocalOutlierFactor":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] < 2:
            raise ValueError("LOF needs at least 2 training samples")
        self._x = x
        idx, dist = self._neighbours(x, exclude_self=True)
        self._k_dist = dist[:, -1]
        reach = np.maximum(dist, self._k_dist[idx])
        mean_reach = reach.mean(axis=1)
        # All-identical training points give zero reach distances; a uniform
        # floor keeps every score finite and equal in that degenerate case.
        self._lrd = 1.0 / np.maximum(mean_reach, 1e-12)
        train_scores = self._lof_from_neighbours(idx, dist)
        self.threshold = float(np.quantile(train_scores, 1.0 - self.contamination))
        return self

    def _lof_from_neighbours(self, idx: np.ndarray, dist: np.ndarray) -> np.ndarray:
        assert self._k_dist is not None and self._lrd is not None
        reach = np.maximum(dist, self._k_dist[idx])
        mean_reach = reach.mean(axis=1)
        lrd_q = 1.0 / np.maximum(mean_reach, 1e-12)
        return self._lrd[idx].mean(axis=1) / lrd_q

    def score(self, x: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("detector is not fitted")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx, dist = self._neighbours(x, exclude_self=False)
        reach = np.maximum(dist, self._k_dist[idx])
        mean_reach = reach.mean(axis=1)
        lrd_q = 1.0 / np.maximum(mean_reach, 1e-12)
        return self._lrd[idx].mean(axis=1) / lrd_q

    def classify(self, x: np.ndarray) -> np.ndarray:
        if self.threshold is None:
            raise RuntimeError("detector is not fitted")
        return (self.score(x) > self.threshold).astype(int)


class AutoencoderDetector:
    """Reconstruction-error detector on z-scored inputs."""

    def __init__(
        self,
        hidden: int = 8,
        epochs: int = 500,
        learning_rate: float = 1e-3,
        contamination: float = DEFAULT_CONTAMINATION,
        seed: int = 0,
        max_train_rows: int = 4000,
    ) -> None:
        if not 0.0 < contamination < 1.0:
            raise ValueError("contamination must lie in (0, 1)")
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.contamination = contamination
        self.seed = seed
        self.max_train_rows = max_train_rows
        self._net: Network | None = None
        self._mean: np.ndarray | None = None
        self._std: np.ndarray | None = None
        self.threshold: float | None = None

    def fit(self, x: np.ndarray) -> "AutoencoderDetector":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 0:
            raise ValueError("training set must be non-empty")
        self._mean = x.mean(axis=0)
        std = x.std(axis=0)
        self._std = np.where(std > 1e-9, std, 1.0)
        z = (x - self._mean) / self._std
        if z.shape[0] > self.max_train_rows:
            rng = np.random.default_rng(self.seed)
            z_train = z[rng.choice(z.shape[0], size=self.max_train_rows, replace=False)]
        else:
            z_train = z
        n = z.shape[1]
        spec = NetworkSpec((n, self.hidden, n), "tanh", "linear", seed=self.seed)
        self._net = Network(spec)
        optimizer = Adam(OptimizerConfig(kind="adam", learning_rate=self.learning_rate))
        rows = z_train.shape[0]
        for _ in range(self.epochs):
            out, cache = self._net.forward(z_train)
            grad = 2.0 * (out - z_train) / (rows * n)
            grads, _ = self._net.backward(cache, grad)
            optimizer.step(self._net.params, grads)
        self.threshold = float(np.quantile(self.score(x), 1.0 - self.contamination))
        return self

    def score(self, x: np.ndarray) -> np.ndarray:
        if self._net is None:
            raise RuntimeError("detector is not fitted")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = (x - self._mean) / self._std
        out, _ = self._net.forward(z)
        return np.mean((out - z) ** 2, axis=1)

    def classify(self, x: np.ndarray) -> np.ndarray:
        if self.threshold is None:
            raise RuntimeError("detector is not fitted")
        return (self.score(x) > self.threshold).astype(int)


@dataclass(frozen=True)
class SegmentEvaluation:
    segment_id: int
    kind: str
    start: int
    end: int
    flagged_rate: float
    precision: float
    recall: float


def evaluate_on_stream(
    detector,
    x: np.ndarray,
    labels: np.ndarray,
    segments: Sequence[SegmentDescriptor],
) -> list[SegmentEvaluation]:
    """Per-segment flag rate, precision, and recall of a fitted detector."""

    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("labels must match the evaluated rows")
    for seg in segments:
        if seg.end > x.shape[0]:
            raise ValueError(f"segment {seg.segment_id} extends past the stream")
    flags = detector.classify(x)
    out = []
    for seg in segments:
        f = flags[seg.start : seg.end]
        y = labels[seg.start : seg.end]
        flagged = float(f.mean()) if f.size else 0.0
        tp = int(np.sum((f == 1) & (y == 1)))
        precision = tp / max(int(f.sum()), 1) if f.sum() else 0.0
        recall = tp / max(int(y.sum()), 1) if y.sum() else 0.0
        out.append(
            SegmentEvaluation(
                seg.segment_id, seg.kind.value, seg.start, seg.end, flagged, precision, recall
            )
        )
    return out
