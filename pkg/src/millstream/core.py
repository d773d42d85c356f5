"""Shared domain types for multivariate sensor streams.

Every other module works in terms of these values: a feature schema, plain
samples, labeled samples, segment descriptors, and the pipeline event record.
All containers here are immutable; they can be shared freely between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "SchemaError",
    "StreamFormatError",
    "InsufficientDataError",
    "FeatureSchema",
    "Sample",
    "LabeledSample",
    "SegmentKind",
    "SegmentDescriptor",
    "PipelineEvent",
    "KlPoint",
    "ChangepointDetected",
    "BatchPredicted",
    "BatchExplained",
    "VerdictApplied",
    "AlarmRaised",
    "project",
    "as_matrix",
    "format_csv_header",
    "format_csv_row",
    "parse_csv_header",
    "parse_csv_row",
]


class SchemaError(ValueError):
    """Unknown feature name or sample/schema dimension mismatch."""


class StreamFormatError(ValueError):
    """Malformed stream file (bad header, unparseable row, empty file)."""


class InsufficientDataError(ValueError):
    """An operation received fewer samples than it needs."""


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names for one stream, with optional unit tags."""

    names: tuple[str, ...]
    units: Mapping[str, str] | None = None

    def __post_init__(self) -> None:
        if len(self.names) < 1:
            raise SchemaError("schema needs at least one feature")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")
        object.__setattr__(self, "names", tuple(self.names))
        if self.units is not None:
            unknown = set(self.units) - set(self.names)
            if unknown:
                raise SchemaError(f"units given for unknown features: {sorted(unknown)}")

    @property
    def dimension(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def indices_of(self, subset: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.index_of(name) for name in subset)

    def subset(self, names: Sequence[str]) -> "FeatureSchema":
        units = None
        if self.units is not None:
            units = {n: self.units[n] for n in names if n in self.units}
        self.indices_of(names)
        return FeatureSchema(tuple(names), units)


@dataclass(frozen=True)
class Sample:
    """One time step of the n-dimensional sensor vector."""

    index: int
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"stream index must be non-negative, got {self.index}")
        values = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"sample {self.index} contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def dimension(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class LabeledSample:
    """Sample plus its binary anomaly label (0 normal, 1 anomaly)."""

    sample: Sample
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


class SegmentKind(str, Enum):
    SOURCE_PRODUCT = "source-product"
    TARGET_PRODUCT = "target-product"
    FAILURE = "failure"


@dataclass(frozen=True)
class SegmentDescriptor:
    """Half-open [start, end) slice of the stream with one product regime."""

    start: int
    end: int
    kind: SegmentKind
    ithick: float
    othick: float
    width: float
    segment_id: int = 0

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError(f"segment start {self.start} must precede end {self.end}")

    def contains(self, index: int) -> bool:
        return self.start <= index < self.end

    def __len__(self) -> int:
        return self.end - self.start


# --- pipeline event payloads -------------------------------------------------


@dataclass(frozen=True)
class KlPoint:
    kl: float
    statistic: float


@dataclass(frozen=True)
class ChangepointDetected:
    changepoint_id: int
    reference_size: int


@dataclass(frozen=True)
class BatchPredicted:
    batch_index: int
    start_index: int
    end_index: int
    predicted_labels: tuple[int, ...]
    scores: tuple[float, ...]
    model: str  # "source" | "adapted"


@dataclass(frozen=True)
class BatchExplained:
    batch_index: int
    start_index: int
    end_index: int
    train_loss: float
    train_epochs: int
    stats: Mapping[str, tuple[float, float, float, float, float]]
    alarms: tuple[tuple[str, str], ...] = ()  # (feature, direction)


@dataclass(frozen=True)
class VerdictApplied:
    changepoint_id: int
    verdict: str


@dataclass(frozen=True)
class AlarmRaised:
    changepoint_id: int


Payload = (
    KlPoint
    | ChangepointDetected
    | BatchPredicted
    | BatchExplained
    | VerdictApplied
    | AlarmRaised
)

_KIND_BY_TYPE = {
    KlPoint: "kl_point",
    ChangepointDetected: "changepoint_detected",
    BatchPredicted: "batch_predicted",
    BatchExplained: "batch_explained",
    VerdictApplied: "verdict_applied",
    AlarmRaised: "alarm_raised",
}


@dataclass(frozen=True)
class PipelineEvent:
    """One entry of the ordered pipeline log.

    ``index`` is the stream position at emission time; events for one stream
    are appended in non-decreasing index order.
    """

    index: int
    payload: Payload

    @property
    def kind(self) -> str:
        return _KIND_BY_TYPE[type(self.payload)]

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {}
        for key, value in vars(self.payload).items():
            if isinstance(value, tuple):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            elif isinstance(value, Mapping):
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in value.items()}
            payload[key] = value
        return {"index": self.index, "kind": self.kind, "payload": payload}


# --- operations ---------------------------------------------------------------


def project(sample: Sample, subset: Sequence[str], schema: FeatureSchema) -> Sample:
    """Restrict ``sample`` to the named features, in subset order."""

    if len(sample.values) != schema.dimension:
        raise SchemaError(
            f"sample has {len(sample.values)} values, schema expects {schema.dimension}"
        )
    idx = schema.indices_of(subset)
    return Sample(sample.index, tuple(sample.values[i] for i in idx))


def as_matrix(samples: Iterable[Sample | Sequence[float]]) -> np.ndarray:
    """Stack samples (or plain float rows) into a 2-D float array."""

    rows = []
    for s in samples:
        rows.append(s.as_array() if isinstance(s, Sample) else np.asarray(s, dtype=float))
    if not rows:
        return np.empty((0, 0))
    return np.vstack(rows)


# --- CSV row format -----------------------------------------------------------
#
# Header line with feature names (plus an optional trailing ``label`` column),
# one sample per line, plain decimal numbers.  ``repr`` round-trips doubles
# bit-exactly, which covers decimal representations of <= 15 significant
# digits and then some.

LABEL_COLUMN = "label"


def format_csv_header(schema: FeatureSchema, labeled: bool) -> str:
    names = list(schema.names)
    if labeled:
        names.append(LABEL_COLUMN)
    return ",".join(names)


def format_csv_row(sample: Sample, label: int | None = None) -> str:
    cells = [repr(v) for v in sample.values]
    if label is not None:
        cells.append(str(label))
    return ",".join(cells)


def parse_csv_header(
    line: str, name_mapping: Mapping[str, str] | None = None
) -> tuple[FeatureSchema, bool]:
    """Parse the header line; returns (schema, has_label_column).

    ``name_mapping`` translates on-disk column names to canonical feature
    names (the published dataset's exact column naming is not pinned down).
    """

    raw = [c.strip() for c in line.strip().split(",")]
    if not raw or raw == [""]:
        raise StreamFormatError("empty header line")
    if name_mapping:
        raw = [name_mapping.get(c, c) for c in raw]
    labeled = bool(raw) and raw[-1] == LABEL_COLUMN
    names = raw[:-1] if labeled else raw
    if not names:
        raise StreamFormatError("header contains no feature columns")
    try:
        return FeatureSchema(tuple(names)), labeled
    except SchemaError as exc:
        raise StreamFormatError(f"bad header: {exc}") from exc


def parse_csv_row(
    line: str, index: int, dimension: int, labeled: bool, line_number: int
) -> tuple[Sample, int | None]:
    cells = line.strip().split(",")
    expected = dimension + (1 if labeled else 0)
    if len(cells) != expected:
        raise StreamFormatError(
            f"line {line_number}: expected {expected} columns, found {len(cells)}"
        )
    try:
        values = tuple(float(c) for c in cells[:dimension])
    except ValueError as exc:
        raise StreamFormatError(f"line {line_number}: {exc}") from exc
    label: int | None = None
    if labeled:
        cell = cells[-1].strip()
        if cell not in ("0", "1"):
            raise StreamFormatError(f"line {line_number}: label must be 0 or 1, got {cell!r}")
        label = int(cell)
    try:
        return Sample(index, values), label
    except ValueError as exc:
        raise StreamFormatError(f"line {line_number}: {exc}") from exc
