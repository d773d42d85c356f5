"""k-NN Kullback-Leibler divergence estimation between two sample sets.

Two closely related estimator forms are provided:

* ``as-printed`` — the divergence written as
  (n/m) * sum_i log(r_k(x_i) / s_k(x_i)) + log(1/(m-1)),
  where the sum runs over all m reference points, r_k is the Euclidean
  distance from x_i to its k-th nearest neighbour within the reference set
  (excluding x_i itself) and s_k the distance to its k-th nearest neighbour
  in the approximate set.

* ``wang-standard`` — the classical k-NN divergence estimator
  (n/m) * sum_i log(s_k(x_i) / r_k(x_i)) + log(|X_approx|/(m-1)),
  which is consistent for D(P||Q) and rises when incoming samples sit far
  from the reference cloud.

The two differ in the orientation of the distance ratio and in the additive
constant; both are exposed because downstream consumers need the rising form
for one-sided drift alarms while the printed form serves as the fidelity
reference.

Distances below ``distance_floor`` are clamped before taking logarithms so
duplicate sensor readings cannot produce infinities.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .core import InsufficientDataError, Sample, SchemaError, as_matrix

__all__ = ["KlForm", "KlEstimatorConfig", "knn_distance", "estimate_kl"]


class KlForm(str, Enum):
    AS_PRINTED = "as-printed"
    WANG_STANDARD = "wang-standard"


@dataclass(frozen=True)
class KlEstimatorConfig:
    """Neighbour order, estimator form, and the distance clamp."""

    k_nn: int = 1
    form: KlForm = KlForm.AS_PRINTED
    distance_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.k_nn < 1:
            raise ValueError(f"k_nn must be >= 1, got {self.k_nn}")
        if not self.distance_floor > 0:
            raise ValueError(f"distance_floor must be > 0, got {self.distance_floor}")


def _coerce_row(point: Sample | Sequence[float]) -> np.ndarray:
    if isinstance(point, Sample):
        return point.as_array()
    return np.asarray(point, dtype=float).reshape(-1)


def knn_distance(
    query: Sample | Sequence[float],
    points: Iterable[Sample | Sequence[float]] | np.ndarray,
    k: int,
    exclude_exact_self: bool = False,
) -> float:
    """Euclidean distance from ``query`` to its k-th nearest neighbour.

    With ``exclude_exact_self`` one zero-distance match (the query itself,
    when it is a member of ``points``) is removed before ranking.
    """

    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = _coerce_row(query)
    mat = points if isinstance(points, np.ndarray) else as_matrix(points)
    if mat.size == 0:
        raise InsufficientDataError("empty point set")
    if mat.shape[1] != q.shape[0]:
        raise SchemaError(f"query has dimension {q.shape[0]}, points have {mat.shape[1]}")
    dists = np.sqrt(np.sum((mat - q) ** 2, axis=1))
    if exclude_exact_self:
        zero = np.flatnonzero(dists == 0.0)
        if zero.size:
            dists = np.delete(dists, zero[0])
    if dists.shape[0] < k:
        raise InsufficientDataError(
            f"need at least {k} candidate points, have {dists.shape[0]}"
        )
    return float(np.partition(dists, k - 1)[k - 1])


def pairwise_distances(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact Euclidean distance matrix, computed from coordinate differences.

    Chunked over rows of ``a`` to bound the intermediate (rows, cols, dim)
    tensor; the difference-based form avoids the cancellation error of the
    Gram-matrix trick for near-duplicate points.
    """

    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        hi = min(lo + chunk, a.shape[0])
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def _kth_cross_distances(x_ref: np.ndarray, x_approx: np.ndarray, k: int) -> np.ndarray:
    """Distance from each reference row to its k-th nearest approx row."""

    d = pairwise_distances(x_ref, x_approx)
    if k == 1:
        return d.min(axis=1)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _kth_self_distances(x_ref: np.ndarray, k: int) -> np.ndarray:
    """Distance from each reference row to its k-th neighbour among the others."""

    d = pairwise_distances(x_ref, x_ref)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def estimate_kl(
    x_ref: Iterable[Sample | Sequence[float]] | np.ndarray,
    x_approx: Iterable[Sample | Sequence[float]] | np.ndarray,
    config: KlEstimatorConfig = KlEstimatorConfig(),
) -> float:
    """Estimate the divergence of the reference set from the approximate set.

    The sum runs over all reference points.  The neighbour order applied to
    the approximate set is clamped to its size, so a single-sample approx
    window is always usable.
    """

    ref = x_ref if isinstance(x_ref, np.ndarray) else as_matrix(x_ref)
    approx = x_approx if isinstance(x_approx, np.ndarray) else as_matrix(x_approx)
    if approx.size == 0:
        raise InsufficientDataError("empty approximate set")
    m = ref.shape[0]
    if m < max(2, config.k_nn + 1):
        raise InsufficientDataError(
            f"reference set needs at least {max(2, config.k_nn + 1)} samples, has {m}"
        )
    if ref.shape[1] != approx.shape[1]:
        raise SchemaError(
            f"dimension mismatch: reference {ref.shape[1]}, approximate {approx.shape[1]}"
        )
    n = ref.shape[1]
    k_s = min(config.k_nn, approx.shape[0])
    r = _kth_self_distances(ref, config.k_nn)
    s = _kth_cross_distances(ref, approx, k_s)
    eps = config.distance_floor
    log_ratio = np.log(np.maximum(r, eps)) - np.log(np.maximum(s, eps))
    if config.form is KlForm.AS_PRINTED:
        return float(n / m * np.sum(log_ratio) + np.log(1.0 / (m - 1)))
    return float(n / m * np.sum(-log_ratio) + np.log(approx.shape[0] / (m - 1)))
