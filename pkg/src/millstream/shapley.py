"""Shapley-value attributions of a scalar score function.

The value of a feature subset is the interventional (marginal) expectation:
features in the subset take the explained instance's values, the rest are
drawn from a background sample, and the mean background score is subtracted,
so the empty subset is worth exactly zero and the full subset is worth
``f(x) - E[f]``.

Two estimators are provided: exact subset enumeration (feasible up to 15
features) and permutation sampling, where each random feature ordering
contributes one telescoping chain of marginal contributions.  Sampled
attributions distribute any leftover efficiency residual proportionally to
the per-feature standard errors, so both modes satisfy
``sum(phi) = f(x) - E[f]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

__all__ = ["Attribution", "ShapleyExplainer"]

ScoreFn = Callable[[np.ndarray], np.ndarray]

EXACT_FEATURE_LIMIT = 15


@dataclass(frozen=True)
class Attribution:
    """Per-feature Shapley values for one explained instance."""

    values: tuple[float, ...]
    base_value: float
    score: float
    standard_errors: tuple[float, ...] | None = None

    @property
    def efficiency_gap(self) -> float:
        return self.score - self.base_value - sum(self.values)


class ShapleyExplainer:
    """Attribution engine bound to a score function and a background set."""

    def __init__(
        self,
        score_fn: ScoreFn,
        background: np.ndarray,
        mode: Literal["exact", "permutation"] = "permutation",
        permutations: int = 500,
        seed: int = 0,
    ) -> None:
        background = np.atleast_2d(np.asarray(background, dtype=float))
        if background.shape[0] == 0:
            raise ValueError("background set must be non-empty")
        if mode not in ("exact", "permutation"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "exact" and background.shape[1] > EXACT_FEATURE_LIMIT:
            raise ValueError(
                f"exact mode supports at most {EXACT_FEATURE_LIMIT} features, "
                f"got {background.shape[1]}"
            )
        if permutations < 1:
            raise ValueError("permutations must be >= 1")
        self.score_fn = score_fn
        self.background = background
        self.mode = mode
        self.permutations = permutations
        self.seed = seed
        self._base_value = float(np.mean(self._evaluate(background)))

    @property
    def n_features(self) -> int:
        return self.background.shape[1]

    @property
    def base_value(self) -> float:
        return self._base_value

    def _evaluate(self, rows: np.ndarray) -> np.ndarray:
        out = np.asarray(self.score_fn(rows), dtype=float).reshape(-1)
        if out.shape[0] != rows.shape[0]:
            raise ValueError("score function must return one value per row")
        return out

    def value_function(self, x: np.ndarray, subset: Sequence[int]) -> float:
        """Worth of a feature subset for instance ``x``.

        Background rows are overwritten with the instance's values on the
        subset coordinates; the mean score minus the background mean is the
        subset's value.
        """

        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.n_features:
            raise ValueError(f"instance has {x.shape[0]} features, expected {self.n_features}")
        idx = np.asarray(sorted(set(int(i) for i in subset)), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_features):
            raise ValueError(f"subset indices out of range: {idx.tolist()}")
        if idx.size == 0:
            return 0.0
        composite = self.background.copy()
        composite[:, idx] = x[idx]
        return float(np.mean(self._evaluate(composite)) - self._base_value)

    def explain(self, x: np.ndarray) -> Attribution:
        if self.mode == "exact":
            return self.shapley_exact(x)
        return self.shapley_sampled(x)

    def shapley_exact(self, x: np.ndarray) -> Attribution:
        """Exact attribution by enumerating all feature subsets."""

        n = self.n_features
        if n > EXACT_FEATURE_LIMIT:
            raise ValueError(f"exact mode supports at most {EXACT_FEATURE_LIMIT} features")
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != n:
            raise ValueError(f"instance has {x.shape[0]} features, expected {n}")

        b = self.background
        values = np.empty(1 << n)
        values[0] = 0.0
        for mask in range(1, 1 << n):
            idx = [j for j in range(n) if mask >> j & 1]
            composite = b.copy()
            composite[:, idx] = x[idx]
            values[mask] = np.mean(self._evaluate(composite)) - self._base_value

        fact = [math.factorial(i) for i in range(n + 1)]
        weights = [fact[size] * fact[n - size - 1] / fact[n] for size in range(n)]
        phi = np.zeros(n)
        for mask in range(1 << n):
            size = bin(mask).count("1")
            for j in range(n):
                if mask >> j & 1:
                    continue
                phi[j] += weights[size] * (values[mask | (1 << j)] - values[mask])

        score = float(np.mean(self._evaluate(x[None, :])))
        return Attribution(tuple(phi), self._base_value, score)

    def shapley_sampled(self, x: np.ndarray) -> Attribution:
        """Monte-Carlo attribution over random feature orderings.

        For each permutation the background is morphed into the instance one
        feature at a time; the score increments along the chain are the
        marginal contributions.  One score call evaluates a whole permutation
        (all prefix stages stacked).
        """

        n = self.n_features
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != n:
            raise ValueError(f"instance has {x.shape[0]} features, expected {n}")
        rng = np.random.default_rng(self.seed)
        b = self.background
        rows = b.shape[0]
        orders = [rng.permutation(n) for _ in range(self.permutations)]
        contributions = np.empty((self.permutations, n))
        # One score call covers a chunk of permutations (all prefix stages
        # stacked); keeps the per-call overhead off the critical path.
        chunk = max(1, 131_072 // max(n * rows, 1))
        for lo in range(0, self.permutations, chunk):
            batch = orders[lo : lo + chunk]
            stages = np.empty((len(batch), n, rows, n))
            for i, order in enumerate(batch):
                composite = b.copy()
                for step, j in enumerate(order):
                    composite[:, j] = x[j]
                    stages[i, step] = composite
            means = (
                self._evaluate(stages.reshape(len(batch) * n * rows, n))
                .reshape(len(batch), n, rows)
                .mean(axis=2)
            )
            vals = means - self._base_value
            prev = np.concatenate([np.zeros((len(batch), 1)), vals[:, :-1]], axis=1)
            marginals = vals - prev
            for i, order in enumerate(batch):
                contributions[lo + i, order] = marginals[i]

        phi = contributions.mean(axis=0)
        if self.permutations > 1:
            se = contributions.std(axis=0, ddof=1) / math.sqrt(self.permutations)
        else:
            se = np.zeros(n)
        score = float(np.mean(self._evaluate(x[None, :])))
        residual = (score - self._base_value) - float(phi.sum())
        weights = se if se.sum() > 0 else np.full(n, 1.0)
        phi = phi + residual * weights / weights.sum()
        return Attribution(tuple(phi), self._base_value, score, tuple(se))
