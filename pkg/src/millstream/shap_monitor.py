"""Batchwise aggregation and drift monitoring of Shapley attributions.

Each training batch's per-feature attribution values are compressed into a
five-number summary (min, first quartile, median, third quartile, max) using
the Hazen quantile convention — linear interpolation between order statistics
at positions n*p + 1/2, which reproduces the usual boxplot hinges (e.g.
values {1,2,3,4} give q1=1.5, median=2.5, q3=3.5).

Per-feature median series are watched by a two-sided Page-Hinkley detector
(mirrored increase and decrease arms) because the fault signature of interest
is a median that drops below zero, while healthy product shifts move medians
both ways.  Detector thresholds are calibrated per feature from the first
batches the series observes (the first healthy target segment in the
orchestrated pipeline).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .changepoint import PageHinkley, PageHinkleyConfig, calibrate_page_hinkley
from .shapley import Attribution

__all__ = [
    "FiveNumber",
    "ShapleyBatchStats",
    "summarize_batch",
    "MedianAlarm",
    "MedianSeries",
    "MedianDriftMonitor",
    "segment_median_profile",
    "stats_to_records",
]


def _hazen(values: np.ndarray, q: float) -> float:
    return float(np.quantile(values, q, method="hazen"))


@dataclass(frozen=True)
class FiveNumber:
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float

    def __post_init__(self) -> None:
        ordered = (self.minimum, self.q1, self.median, self.q3, self.maximum)
        if any(a > b + 1e-12 for a, b in zip(ordered, ordered[1:])):
            raise ValueError(f"five-number summary out of order: {ordered}")

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.minimum, self.q1, self.median, self.q3, self.maximum)


@dataclass(frozen=True)
class ShapleyBatchStats:
    batch_index: int
    features: tuple[str, ...]
    summaries: tuple[FiveNumber, ...]

    def summary_for(self, feature: str) -> FiveNumber:
        try:
            return self.summaries[self.features.index(feature)]
        except ValueError:
            raise KeyError(f"no stats for feature {feature!r}") from None


def summarize_batch(
    attributions: Sequence[Attribution],
    batch_index: int,
    feature_names: Sequence[str],
) -> ShapleyBatchStats:
    """Five-number summary of each feature's attribution values in one batch."""

    if not attributions:
        raise ValueError("cannot summarise an empty batch")
    matrix = np.array([a.values for a in attributions], dtype=float)
    if matrix.shape[1] != len(feature_names):
        raise ValueError(
            f"attributions have {matrix.shape[1]} features, names give {len(feature_names)}"
        )
    summaries = []
    for col in matrix.T:
        summaries.append(
            FiveNumber(
                float(col.min()),
                _hazen(col, 0.25),
                _hazen(col, 0.5),
                _hazen(col, 0.75),
                float(col.max()),
            )
        )
    return ShapleyBatchStats(batch_index, tuple(feature_names), tuple(summaries))


@dataclass(frozen=True)
class MedianAlarm:
    feature: str
    batch_index: int
    direction: str  # "increase" | "decrease"


class MedianSeries:
    """One feature's batch-median history with a two-sided drift detector.

    The first ``calibration_batches`` medians calibrate both arms; until then
    no alarm can fire.  An explicit ``ph`` config skips calibration.
    """

    def __init__(
        self,
        feature: str,
        calibration_batches: int = 8,
        ph: PageHinkleyConfig | None = None,
        min_instances: int = 3,
    ) -> None:
        self.feature = feature
        self.points: list[tuple[int, float]] = []
        self.calibration_batches = calibration_batches
        self.min_instances = min_instances
        self._fixed = ph
        self._armed = ph is not None
        self._up = PageHinkley(ph) if ph else None
        self._down = PageHinkley(ph) if ph else None
        self.alarms: list[MedianAlarm] = []

    def _calibrate(self) -> None:
        medians = np.array([m for _, m in self.points])
        cfg = calibrate_page_hinkley(medians, min_instances=self.min_instances)
        self._up = PageHinkley(cfg)
        self._down = PageHinkley(cfg)
        for _, median in self.points:
            self._up.update(median)
            self._down.update(-median)
        self._armed = True

    def update(self, batch_index: int, median: float) -> MedianAlarm | None:
        if self.points and batch_index <= self.points[-1][0]:
            raise ValueError(
                f"batch indices must be strictly increasing, got {batch_index} "
                f"after {self.points[-1][0]}"
            )
        self.points.append((batch_index, median))
        if not self._armed:
            if len(self.points) >= self.calibration_batches:
                self._calibrate()
            return None
        up = self._up.update(median)
        down = self._down.update(-median)
        direction = "increase" if up.alarm else ("decrease" if down.alarm else None)
        if direction is None:
            return None
        self._up.reset()
        self._down.reset()
        alarm = MedianAlarm(self.feature, batch_index, direction)
        self.alarms.append(alarm)
        return alarm


class MedianDriftMonitor:
    """Median tracking across all features of a stats stream."""

    def __init__(
        self,
        calibration_batches: int = 8,
        ph: PageHinkleyConfig | None = None,
        min_instances: int = 3,
    ) -> None:
        self.calibration_batches = calibration_batches
        self.ph = ph
        self.min_instances = min_instances
        self.series: dict[str, MedianSeries] = {}

    def update(self, stats: ShapleyBatchStats) -> list[MedianAlarm]:
        alarms = []
        for feature, summary in zip(stats.features, stats.summaries):
            series = self.series.get(feature)
            if series is None:
                series = MedianSeries(
                    feature, self.calibration_batches, self.ph, self.min_instances
                )
                self.series[feature] = series
            alarm = series.update(stats.batch_index, summary.median)
            if alarm:
                alarms.append(alarm)
        return alarms

    def alarms_for(self, feature: str) -> list[MedianAlarm]:
        series = self.series.get(feature)
        return list(series.alarms) if series else []


def segment_median_profile(
    grouped: Mapping[object, Sequence[Attribution]],
    feature_names: Sequence[str],
) -> dict[object, tuple[float, ...]]:
    """Per-feature median attribution for each group of instances."""

    profiles: dict[object, tuple[float, ...]] = {}
    for key, attributions in grouped.items():
        if not attributions:
            raise ValueError(f"group {key!r} is empty")
        matrix = np.array([a.values for a in attributions], dtype=float)
        profiles[key] = tuple(_hazen(col, 0.5) for col in matrix.T)
    return profiles


def stats_to_records(
    stats: Iterable[ShapleyBatchStats],
    alarms: Iterable[MedianAlarm] = (),
) -> list[dict[str, object]]:
    """Flatten stats into export records (one row per batch x feature)."""

    alarm_keys = {(a.feature, a.batch_index) for a in alarms}
    records = []
    for entry in stats:
        for feature, summary in zip(entry.features, entry.summaries):
            records.append(
                {
                    "batch": entry.batch_index,
                    "feature": feature,
                    "min": summary.minimum,
                    "q1": summary.q1,
                    "median": summary.median,
                    "q3": summary.q3,
                    "max": summary.maximum,
                    "iqr": summary.iqr,
                    "alarm": (feature, entry.batch_index) in alarm_keys,
                }
            )
    return records
