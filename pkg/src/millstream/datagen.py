"""Synthetic cold-rolling streams and CSV ingestion.

The generator produces streams with the production-mix structure the monitor
is built for: a long source-product stretch followed by short target-product
segments, one of which carries a persistent stand-level fault signature.
Signals follow a simple physical surrogate — per-product constant baselines
derived from the coil parameters (entry/exit thickness, width) plus Gaussian
noise.  Labeled anomalies are transient pulses on one stand's current and
torque; the failure segment additionally shifts and inflates stand-2 current
and torque for its whole duration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    FeatureSchema,
    LabeledSample,
    Sample,
    SegmentDescriptor,
    SegmentKind,
    StreamFormatError,
    format_csv_header,
    format_csv_row,
    parse_csv_header,
    parse_csv_row,
)

__all__ = [
    "N_STANDS",
    "GLOBAL_SIGNALS",
    "STAND_SIGNALS",
    "mill_schema",
    "stand_feature",
    "FailureMode",
    "ProductSpec",
    "StreamRecipe",
    "GeneratedStream",
    "product_baselines",
    "generate_stream",
    "paper_recipe",
    "write_csv",
    "load_csv",
]

N_STANDS = 4

GLOBAL_SIGNALS: tuple[tuple[str, str], ...] = (
    ("ithick", "mm"),
    ("othick", "mm"),
    ("width", "mm"),
    ("ys0", "MPa"),
    ("ys1", "MPa"),
    ("work_roll_diam", "mm"),
    ("work_roll_mileage", "mm"),
)

STAND_SIGNALS: tuple[tuple[str, str], ...] = (
    ("reduction", "%"),
    ("tension", "kN"),
    ("roll_speed", "m/s"),
    ("force", "kN"),
    ("torque", "N·m"),
    ("gap", "mm"),
    ("current", "A"),
)


def stand_feature(signal: str, stand: int) -> str:
    return f"{signal}_{stand}"


def mill_schema() -> FeatureSchema:
    names: list[str] = []
    units: dict[str, str] = {}
    for name, unit in GLOBAL_SIGNALS:
        names.append(name)
        units[name] = unit
    for stand in range(1, N_STANDS + 1):
        for name, unit in STAND_SIGNALS:
            feature = stand_feature(name, stand)
            names.append(feature)
            units[feature] = unit
    return FeatureSchema(tuple(names), units)


@dataclass(frozen=True)
class FailureMode:
    """Persistent per-stand shift applied on top of the product baseline."""

    stand: int = 2
    signals: tuple[str, ...] = ("current", "torque")
    offset_scales: float = 3.0
    variance_inflation: float = 1.5

    def __post_init__(self) -> None:
        if not 1 <= self.stand <= N_STANDS:
            raise ValueError(f"stand must be in 1..{N_STANDS}, got {self.stand}")


@dataclass(frozen=True)
class ProductSpec:
    """One stream segment: product parameters, length, and anomaly content."""

    ithick: float
    othick: float
    width: float
    length: int
    anomaly_rate: float
    failure: FailureMode | None = None
    noise_level: float = 1.0

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError(f"segment length must be >= 1, got {self.length}")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValueError(f"anomaly rate must lie in [0, 1], got {self.anomaly_rate}")
        if not 0 < self.othick < self.ithick:
            raise ValueError("need 0 < othick < ithick")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


@dataclass(frozen=True)
class StreamRecipe:
    products: tuple[ProductSpec, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.products:
            raise ValueError("recipe needs at least one product segment")

    @property
    def total_length(self) -> int:
        return sum(p.length for p in self.products)


@dataclass(frozen=True)
class GeneratedStream:
    samples: tuple[LabeledSample, ...]
    segments: tuple[SegmentDescriptor, ...]
    schema: FeatureSchema


def product_baselines(ithick: float, othick: float, width: float) -> dict[str, float]:
    """Constant per-signal operating point derived from the coil parameters.

    A crude mass-flow surrogate: thickness is reduced geometrically across the
    four stands, exit speed is fixed, and force/torque/current follow the
    per-stand draft and strip width.  The exact constants are arbitrary; what
    matters is that distinct products land on distinct operating points for
    every stand's signals.
    """

    ys0 = 180.0 + 52.0 * ithick + 0.045 * width
    total_reduction = 1.0 - othick / ithick
    ys1 = ys0 * (1.0 + 0.9 * total_reduction)
    base: dict[str, float] = {
        "ithick": ithick,
        "othick": othick,
        "width": width,
        "ys0": ys0,
        "ys1": ys1,
        "work_roll_diam": 420.0,
        "work_roll_mileage": 60_000.0,
    }
    exit_speed = 9.0
    ratio = (othick / ithick) ** (1.0 / N_STANDS)
    thickness = ithick
    for stand in range(1, N_STANDS + 1):
        entry, exit_ = thickness, thickness * ratio
        draft = entry - exit_
        reduction = 100.0 * (1.0 - exit_ / entry)
        speed = exit_speed * othick / exit_
        ys_mid = ys0 + (ys1 - ys0) * (stand - 0.5) / N_STANDS
        force = 0.0042 * width * draft * ys_mid
        torque = 14.0 * force * math.sqrt(draft)
        current = 0.38 * torque * speed / 40.0
        tension = 0.00045 * width * exit_ * ys_mid
        base[stand_feature("reduction", stand)] = reduction
        base[stand_feature("tension", stand)] = tension
        base[stand_feature("roll_speed", stand)] = speed
        base[stand_feature("force", stand)] = force
        base[stand_feature("torque", stand)] = torque
        base[stand_feature("gap", stand)] = exit_ * 0.96
        base[stand_feature("current", stand)] = current
        thickness = exit_
    return base


def _noise_scales(baselines: Mapping[str, float], level: float) -> dict[str, float]:
    return {name: level * max(0.02 * abs(value), 1e-3) for name, value in baselines.items()}


def _pulse_units(baselines: Mapping[str, float], scales: Mapping[str, float]) -> dict[str, float]:
    # Anomaly pulse unit: the noise scale, with a floor so zero-noise streams
    # still show labeled deviations.
    return {
        name: scales[name] if scales[name] > 0 else max(0.01 * abs(baselines[name]), 1.0)
        for name in baselines
    }


def generate_stream(recipe: StreamRecipe) -> GeneratedStream:
    """Render the recipe into a labeled stream plus its segment descriptors.

    Anomaly counts are realised exactly (round(rate * length) indices drawn
    without replacement) so the per-segment label rate sits within a fraction
    of a percentage point of the spec.
    """

    schema = mill_schema()
    rng = np.random.default_rng(recipe.seed)
    samples: list[LabeledSample] = []
    segments: list[SegmentDescriptor] = []
    index = 0
    for seg_id, product in enumerate(recipe.products):
        base_map = product_baselines(product.ithick, product.othick, product.width)
        scales_map = _noise_scales(base_map, product.noise_level)
        pulse_map = _pulse_units(base_map, scales_map)
        base = np.array([base_map[n] for n in schema.names])
        scales = np.array([scales_map[n] for n in schema.names])
        pulse_units = np.array([pulse_map[n] for n in schema.names])

        if product.failure is not None:
            fail_idx = [
                schema.index_of(stand_feature(sig, product.failure.stand))
                for sig in product.failure.signals
            ]
            base = base.copy()
            scales = scales.copy()
            for i in fail_idx:
                base[i] += product.failure.offset_scales * pulse_units[i]
                scales[i] *= product.failure.variance_inflation

        values = base[None, :] + scales[None, :] * rng.standard_normal(
            (product.length, schema.dimension)
        )

        n_anomalies = int(round(product.anomaly_rate * product.length))
        labels = np.zeros(product.length, dtype=int)
        if n_anomalies:
            anomaly_rows = rng.choice(product.length, size=n_anomalies, replace=False)
            labels[anomaly_rows] = 1
            if product.failure is not None:
                # Bearing-fault pulses push the stand's current/torque upward.
                stands = np.full(n_anomalies, product.failure.stand)
                signs = np.ones(n_anomalies)
            else:
                stands = rng.integers(1, N_STANDS + 1, size=n_anomalies)
                signs = rng.choice((-1.0, 1.0), size=n_anomalies)
            magnitudes = rng.uniform(2.0, 4.0, size=n_anomalies)
            for row, stand, mag, sign in zip(anomaly_rows, stands, magnitudes, signs):
                for sig in ("current", "torque"):
                    col = schema.index_of(stand_feature(sig, int(stand)))
                    values[row, col] += sign * mag * pulse_units[col]

        for offset in range(product.length):
            samples.append(
                LabeledSample(Sample(index + offset, tuple(values[offset])), int(labels[offset]))
            )
        kind = (
            SegmentKind.FAILURE
            if product.failure is not None
            else (SegmentKind.SOURCE_PRODUCT if seg_id == 0 else SegmentKind.TARGET_PRODUCT)
        )
        segments.append(
            SegmentDescriptor(
                start=index,
                end=index + product.length,
                kind=kind,
                ithick=product.ithick,
                othick=product.othick,
                width=product.width,
                segment_id=seg_id,
            )
        )
        index += product.length

    return GeneratedStream(tuple(samples), tuple(segments), schema)


def paper_recipe(seed: int = 0, total_length: int = 10_000) -> StreamRecipe:
    """The published-dataset composition: one dominant source product, three
    rare target products, and a failure stretch on the second product with a
    stand-2 bearing signature."""

    if total_length < 20:
        raise ValueError("total_length too small for the 80/5/5/5/5 split")
    source_len = int(round(total_length * 0.8))
    minor_len = int(round(total_length * 0.05))
    lengths = [source_len, minor_len, minor_len, minor_len]
    lengths.append(total_length - sum(lengths))
    products = (
        ProductSpec(3.4, 1.61, 918.67, lengths[0], 0.085),
        ProductSpec(3.0, 1.11, 1082.43, lengths[1], 0.108),
        ProductSpec(3.0, 1.11, 1082.43, lengths[2], 0.774, failure=FailureMode(stand=2)),
        ProductSpec(2.8, 0.82, 918.58, lengths[3], 0.06),
        ProductSpec(3.5, 1.44, 1080.20, lengths[4], 0.126),
    )
    return StreamRecipe(products, seed=seed)


def write_csv(path: str | Path, stream: Sequence[LabeledSample], schema: FeatureSchema) -> None:
    path = Path(path)
    lines = [format_csv_header(schema, labeled=True)]
    for item in stream:
        lines.append(format_csv_row(item.sample, item.label))
    path.write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class LoadedStream:
    samples: tuple[LabeledSample, ...] | tuple[Sample, ...]
    schema: FeatureSchema
    labeled: bool


def load_csv(path: str | Path, name_mapping: Mapping[str, str] | None = None) -> LoadedStream:
    """Parse a stream CSV; the trailing ``label`` column is optional.

    Malformed rows raise with their line number; an empty file is an explicit
    error rather than an empty stream.
    """

    path = Path(path)
    with path.open() as handle:
        lines = [line.rstrip("\n") for line in handle if line.strip()]
    if not lines:
        raise StreamFormatError(f"{path}: empty stream file")
    schema, labeled = parse_csv_header(lines[0], name_mapping)
    samples: list[LabeledSample] | list[Sample] = []
    for i, line in enumerate(lines[1:]):
        sample, label = parse_csv_row(line, i, schema.dimension, labeled, line_number=i + 2)
        if labeled:
            samples.append(LabeledSample(sample, label))  # type: ignore[arg-type]
        else:
            samples.append(sample)  # type: ignore[arg-type]
    if not samples:
        raise StreamFormatError(f"{path}: no data rows")
    return LoadedStream(tuple(samples), schema, labeled)
