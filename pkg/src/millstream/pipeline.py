"""End-to-end stream orchestration.

One pipeline instance owns the changepoint monitor, the adaptation session,
and the explanation machinery, and drives them sample by sample:

* warm-up region: build the detection reference and the labeled source set,
  then pretrain the source classifier;
* monitored region: score every sample for divergence (one KL event per
  sample), accumulate prediction batches, and on each detected changepoint
  restart the adaptation session;
* per completed batch: predict it with the parameters trained on the
  previous batch, expand the target buffer, train on it (unless the session
  is frozen by a failure verdict), explain the training batch, and feed the
  per-feature Shapley medians to the drift monitor.

Operator verdicts arrive through a command queue and take effect at batch
boundaries: a failure verdict freezes training, reverts the model to the
source snapshot, raises the alarm flag, and emits an AlarmRaised event.

All state reads (snapshots, event slices) are safe from other threads; the
stepping itself is single-writer.
"""

from __future__ import annotations

import dataclasses
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ccsa import AdaptationSession, CcsaConfig
from .changepoint import ChangepointMonitor, MonitorConfig, PageHinkleyConfig
from .config import RunConfig
from .core import (
    AlarmRaised,
    BatchExplained,
    BatchPredicted,
    ChangepointDetected,
    FeatureSchema,
    KlPoint,
    LabeledSample,
    PipelineEvent,
    SegmentDescriptor,
    VerdictApplied,
)
from .divergence import KlEstimatorConfig, KlForm
from .shap_monitor import (
    MedianAlarm,
    MedianDriftMonitor,
    ShapleyBatchStats,
    segment_median_profile,
    stats_to_records,
    summarize_batch,
)
from .shapley import Attribution, ShapleyExplainer

__all__ = [
    "ChangepointRecord",
    "SessionSnapshot",
    "PipelineState",
    "Pipeline",
    "ReplayReport",
    "aggregate_report",
    "run_replay",
    "build_stream",
]

PENDING = "pending"
HEALTHY = "healthy"
FAILURE = "failure"


class VerdictError(ValueError):
    """Unknown changepoint id or verdict conflict."""


@dataclass
class ChangepointRecord:
    changepoint_id: int
    index: int
    kl_context: tuple[tuple[int, float], ...]
    verdict: str = PENDING
    verdict_index: int | None = None
    verdict_source: str | None = None

    def to_dict(self) -> dict:
        return {
            "changepoint_id": self.changepoint_id,
            "index": self.index,
            "kl_context": [list(p) for p in self.kl_context],
            "verdict": self.verdict,
            "verdict_index": self.verdict_index,
            "verdict_source": self.verdict_source,
        }


@dataclass(frozen=True)
class SessionSnapshot:
    active: bool
    frozen: bool
    target_size: int
    trained_batches: int
    cursor: int
    model_digest: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PipelineState:
    mode: str
    processed: int
    finished: bool
    current_segment: int | None
    reference_size: int
    ph_statistic: float
    changepoint_count: int
    pending_verdicts: int
    alarm: bool
    event_cursor: int
    backpressure: int
    session: SessionSnapshot | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Pipeline:
    """Single-writer stream processor with thread-safe read surface."""

    def __init__(
        self,
        config: RunConfig,
        schema: FeatureSchema,
        stream_length: int,
        segments: Sequence[SegmentDescriptor] | None = None,
        mode: str = "replay",
    ) -> None:
        self.config = config
        self.schema = schema
        self.segments = tuple(segments) if segments else ()
        self.mode = mode
        self.stream_length = stream_length
        self.warmup = config.warmup_for(stream_length)
        if self.warmup < 2:
            raise ValueError("warm-up region must contain at least 2 samples")

        features = config.features or schema.names
        missing = [f for f in features if f not in schema.names]
        if missing:
            raise ValueError(f"detection features not in schema: {missing}")
        ph = None
        if config.ph_lambda is not None:
            ph = PageHinkleyConfig(
                delta=config.ph_delta if config.ph_delta is not None else 0.005,
                threshold=config.ph_lambda,
                min_instances=config.ph_min_instances,
            )
        self.monitor = ChangepointMonitor(
            schema,
            MonitorConfig(
                feature_subset=tuple(features),
                kl=KlEstimatorConfig(k_nn=config.k_nn, form=KlForm(config.kl_form)),
                ph=ph,
                min_ref_size=self.warmup,
                post_reset_min=min(config.post_reset_min, max(self.warmup // 2, 2)),
            ),
        )

        self._ccsa_config = CcsaConfig(
            embedding_dim=config.ccsa_embedding_dim,
            hidden_sizes=config.ccsa_hidden_sizes,
            alpha=config.ccsa_alpha,
            margin=config.ccsa_margin,
            threshold=config.ccsa_threshold,
            epochs=config.ccsa_epochs,
            pairs_per_kind=config.ccsa_pairs_per_kind,
            learning_rate=config.ccsa_learning_rate,
            pretrain_epochs=config.pretrain_epochs,
            batch_size=config.batch_size,
            label_mode=config.label_mode,  # type: ignore[arg-type]
            seed=config.seed,
        )
        self.session: AdaptationSession | None = None
        self.median_monitor = MedianDriftMonitor(
            calibration_batches=config.median_calibration_batches
        )

        self._lock = threading.Lock()
        self._events: list[PipelineEvent] = []
        self._event_ready = threading.Condition(self._lock)
        self._records: list[ChangepointRecord] = []
        self._commands: list[tuple[int, str]] = []
        self._alarm = False
        self._frozen = False
        self._finished = False
        self._processed = -1

        self._model_digest = ""
        self._warm_rows: list[np.ndarray] = []
        self._warm_labels: list[int] = []
        self._batch_rows: list[np.ndarray] = []
        self._batch_labels: list[int] = []
        self._batch_start: int | None = None
        self._batch_counter = 0
        self._first_changepoint: int | None = None
        self.shap_stats: list[ShapleyBatchStats] = []
        self.median_alarms: list[MedianAlarm] = []
        self._batch_attributions: list[tuple[int, int, list[Attribution]]] = []
        self.train_history: list[dict] = []

    # -- event plumbing ---------------------------------------------------------

    def _emit(self, index: int, payload) -> None:
        with self._event_ready:
            self._events.append(PipelineEvent(index, payload))
            self._event_ready.notify_all()

    def events_since(self, cursor: int) -> tuple[list[PipelineEvent], int]:
        if cursor < 0:
            raise ValueError(f"cursor must be >= 0, got {cursor}")
        with self._lock:
            if cursor > len(self._events):
                raise ValueError(
                    f"cursor {cursor} beyond event log length {len(self._events)}"
                )
            chunk = list(self._events[cursor:])
        return chunk, cursor + len(chunk)

    def wait_for_events(self, cursor: int, timeout: float = 1.0) -> tuple[list[PipelineEvent], int]:
        with self._event_ready:
            if cursor < len(self._events):
                chunk = list(self._events[cursor:])
                return chunk, cursor + len(chunk)
            self._event_ready.wait(timeout)
            chunk = list(self._events[cursor:])
            return chunk, cursor + len(chunk)

    @property
    def events(self) -> list[PipelineEvent]:
        with self._lock:
            return list(self._events)

    def changepoint_records(self) -> list[ChangepointRecord]:
        with self._lock:
            return [replace(r) for r in self._records]

    # -- verdicts ----------------------------------------------------------------

    def submit_verdict(self, changepoint_id: int, verdict: str) -> ChangepointRecord:
        """Record an operator verdict; model effects apply at the next batch
        boundary (immediately when the stream is already finished)."""

        if verdict not in (HEALTHY, FAILURE):
            raise VerdictError(f"verdict must be healthy or failure, got {verdict!r}")
        with self._lock:
            record = next(
                (r for r in self._records if r.changepoint_id == changepoint_id), None
            )
            if record is None:
                raise VerdictError(f"unknown changepoint id {changepoint_id}")
            if record.verdict != PENDING:
                raise VerdictError(
                    f"changepoint {changepoint_id} already decided: {record.verdict}"
                )
            record.verdict = verdict
            record.verdict_index = self._processed
            record.verdict_source = "operator"
            self._commands.append((changepoint_id, verdict))
            finished = self._finished
            result = replace(record)
        if finished:
            self.drain_commands()
        return result

    def drain_commands(self) -> None:
        """Apply queued verdicts; called at batch boundaries and when idle."""

        with self._lock:
            commands = self._commands
            self._commands = []
        for changepoint_id, verdict in commands:
            self._emit(max(self._processed, 0), VerdictApplied(changepoint_id, verdict))
            if verdict == FAILURE:
                self._frozen = True
                self._alarm = True
                if self.session is not None:
                    self.session.model.restore(self.session.pretrained_snapshot)
                    self._model_digest = self.session.model.parameter_digest()
                self._emit(max(self._processed, 0), AlarmRaised(changepoint_id))

    # -- state -------------------------------------------------------------------

    def state_snapshot(self) -> PipelineState:
        with self._lock:
            session = None
            if self.session is not None:
                session = SessionSnapshot(
                    active=self._first_changepoint is not None,
                    frozen=self._frozen,
                    target_size=len(self.session.targets),
                    trained_batches=self.session.trained_batches,
                    cursor=self.session.cursor,
                    model_digest=self._model_digest,
                )
            current_segment = None
            for seg in self.segments:
                if seg.contains(max(self._processed, 0)):
                    current_segment = seg.segment_id
                    break
            return PipelineState(
                mode=self.mode,
                processed=self._processed,
                finished=self._finished,
                current_segment=current_segment,
                reference_size=self.monitor.reference_size,
                ph_statistic=self.monitor.statistic,
                changepoint_count=len(self._records),
                pending_verdicts=sum(1 for r in self._records if r.verdict == PENDING),
                alarm=self._alarm,
                event_cursor=len(self._events),
                backpressure=0,
                session=session,
            )

    # -- stepping ----------------------------------------------------------------

    def step_sample(self, item: LabeledSample) -> None:
        sample = item.sample
        index = sample.index
        self._processed = index

        if index < self.warmup:
            self.monitor.step(sample)
            self._warm_rows.append(sample.as_array())
            self._warm_labels.append(item.label)
            if index == self.warmup - 1:
                self._pretrain_source()
            return

        step = self.monitor.step(sample)

        if step.changepoint is not None:
            self._flush_batch(train=False)
            self.drain_commands()
            self._emit(index, KlPoint(kl=step.kl, statistic=step.statistic))
            self._register_changepoint(step.changepoint)
            self._batch_start = index
            self._batch_rows = [sample.as_array()]
            self._batch_labels = [item.label]
            return

        self._emit(index, KlPoint(kl=step.kl, statistic=step.statistic))
        if self._batch_start is None:
            self._batch_start = index
        self._batch_rows.append(sample.as_array())
        self._batch_labels.append(item.label)
        if len(self._batch_rows) == self.config.batch_size:
            self._flush_batch(train=True)
            self.drain_commands()

    def finish(self) -> None:
        """Flush the trailing partial batch and mark the run complete."""

        if self._finished:
            return
        self._flush_batch(train=True)
        self.drain_commands()
        with self._event_ready:
            self._finished = True
            self._event_ready.notify_all()

    def run(self, stream: Iterable[LabeledSample]) -> None:
        for item in stream:
            self.step_sample(item)
        self.finish()

    # -- internals ----------------------------------------------------------------

    def _pretrain_source(self) -> None:
        x = np.vstack(self._warm_rows)
        y = np.asarray(self._warm_labels, dtype=int)
        cap = self.config.source_train_cap
        if cap and x.shape[0] > cap:
            rng = np.random.default_rng(self.config.seed)
            rows = rng.choice(x.shape[0], size=cap, replace=False)
            x_train, y_train = x[rows], y[rows]
        else:
            x_train, y_train = x, y
        self.session = AdaptationSession(x_train, y_train, self._ccsa_config)
        self.session.pretrain_source()
        self._model_digest = self.session.model.parameter_digest()

    def _register_changepoint(self, index: int) -> None:
        with self._lock:
            record = ChangepointRecord(
                changepoint_id=len(self._records),
                index=index,
                kl_context=tuple(self.monitor.recent_scores()),
            )
            self._records.append(record)
        self._emit(index, ChangepointDetected(record.changepoint_id, self.monitor.reference_size))
        assert self.session is not None
        self.session.restart(index)
        self._model_digest = self.session.model.parameter_digest()
        self._frozen = False
        self._alarm = False
        if self._first_changepoint is None:
            self._first_changepoint = index

    def _flush_batch(self, train: bool) -> None:
        if not self._batch_rows:
            return
        rows = np.vstack(self._batch_rows)
        labels = np.asarray(self._batch_labels, dtype=int)
        start = self._batch_start
        assert start is not None
        self._predict_and_train(rows, labels, start, train=train)
        self._batch_rows = []
        self._batch_labels = []
        self._batch_start = None

    def _predict_and_train(
        self, rows: np.ndarray, labels: np.ndarray, start: int, train: bool
    ) -> None:
        assert self.session is not None
        end = start + rows.shape[0]
        batch_index = self._batch_counter
        self._batch_counter += 1
        adapting = self._first_changepoint is not None and not self._frozen

        if adapting:
            predicted, scores = self.session.predict_batch(rows)
            model_tag = "adapted" if self.session.trained_batches else "source"
        else:
            scores = self.session.score_batch(rows)
            predicted = (scores > self._ccsa_config.threshold).astype(int)
            model_tag = "source"
        self._emit(
            end - 1,
            BatchPredicted(
                batch_index=batch_index,
                start_index=start,
                end_index=end,
                predicted_labels=tuple(int(v) for v in predicted),
                scores=tuple(float(v) for v in scores),
                model=model_tag,
            ),
        )

        if not (adapting and train):
            return
        train_labels = labels if self.config.label_mode == "true-labels" else predicted
        label_source = "true" if self.config.label_mode == "true-labels" else "pseudo"
        metrics = self.session.train_on_batch(rows, train_labels, label_source)
        self._model_digest = self.session.model.parameter_digest()
        self.train_history.append(
            {
                "batch_index": batch_index,
                "start": start,
                "end": end,
                "loss": metrics.final_loss,
                "epochs": metrics.epochs_run,
            }
        )
        stats, alarms = self._explain_batch(rows, batch_index, start)
        self._emit(
            end - 1,
            BatchExplained(
                batch_index=batch_index,
                start_index=start,
                end_index=end,
                train_loss=metrics.final_loss,
                train_epochs=metrics.epochs_run,
                stats={
                    f: s.as_tuple()
                    for f, s in zip(stats.features, stats.summaries)
                },
                alarms=tuple((a.feature, a.direction) for a in alarms),
            ),
        )

    def _explain_batch(
        self, rows: np.ndarray, batch_index: int, start: int
    ) -> tuple[ShapleyBatchStats, list[MedianAlarm]]:
        assert self.session is not None
        cfg = self.config
        z = self.session.scaler.transform(rows)
        rng = np.random.default_rng(cfg.explainer_seed + batch_index)
        bg = z
        if z.shape[0] > cfg.background_size:
            bg = z[rng.choice(z.shape[0], size=cfg.background_size, replace=False)]
        instances = z
        if z.shape[0] > cfg.explain_instances:
            instances = z[rng.choice(z.shape[0], size=cfg.explain_instances, replace=False)]
        explainer = ShapleyExplainer(
            self.session.model.score,
            bg,
            mode=cfg.explainer_mode,  # type: ignore[arg-type]
            permutations=cfg.explainer_permutations,
            seed=cfg.explainer_seed + batch_index,
        )
        attributions = [explainer.explain(row) for row in instances]
        stats = summarize_batch(attributions, batch_index, self.schema.names)
        alarms = self.median_monitor.update(stats)
        self.shap_stats.append(stats)
        self.median_alarms.extend(alarms)
        self._batch_attributions.append((batch_index, start, attributions))
        return stats, alarms

    # -- reporting ----------------------------------------------------------------

    def segment_attribution_groups(self) -> dict[int, list[Attribution]]:
        """Attributions grouped by the segment containing each batch start.

        Without segment descriptors, batches group by changepoint ordinal.
        """

        groups: dict[int, list[Attribution]] = {}
        boundaries = [r.index for r in self._records]
        for batch_index, start, atts in self._batch_attributions:
            if self.segments:
                seg_id = next(
                    (s.segment_id for s in self.segments if s.contains(start)), -1
                )
            else:
                seg_id = sum(1 for b in boundaries if b <= start)
            groups.setdefault(seg_id, []).extend(atts)
        return groups

    def report(self, labels: Sequence[int] | None = None) -> "ReplayReport":
        return aggregate_report(
            self.events,
            self.config,
            self.schema,
            self.segments,
            labels,
            self.changepoint_records(),
            self.segment_attribution_groups(),
        )


# --- report --------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentMetrics:
    segment_id: int
    kind: str
    start: int
    end: int
    predicted: int
    flagged_rate: float
    false_positive_rate: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ReplayReport:
    stream_length: int
    warmup: int
    changepoints: tuple[dict, ...]
    detection: dict
    kl_series: tuple[tuple[int, float], ...]
    shap_records: tuple[dict, ...]
    median_alarms: tuple[dict, ...]
    segment_metrics: tuple[dict, ...]
    segment_profiles: dict[str, dict[str, float]]
    train_batches: int

    def to_dict(self) -> dict:
        return {
            "stream_length": self.stream_length,
            "warmup": self.warmup,
            "changepoints": list(self.changepoints),
            "detection": self.detection,
            "kl_series": [list(p) for p in self.kl_series],
            "shap_records": list(self.shap_records),
            "median_alarms": list(self.median_alarms),
            "segment_metrics": list(self.segment_metrics),
            "segment_profiles": self.segment_profiles,
            "train_batches": self.train_batches,
        }


def aggregate_report(
    events: Sequence[PipelineEvent],
    config: RunConfig,
    schema: FeatureSchema,
    segments: Sequence[SegmentDescriptor],
    labels: Sequence[int] | None,
    records: Sequence[ChangepointRecord],
    attribution_groups: Mapping[int, Sequence[Attribution]] | None = None,
    detection_tolerance: int = 100,
) -> ReplayReport:
    """Fold an ordered event log into the run report.

    This is a pure function of the log (plus ground truth), so a live service
    run and an offline replay of the same stream produce the same report.
    """

    kl_series = [
        (e.index, e.payload.kl) for e in events if isinstance(e.payload, KlPoint)
    ]
    detected = [r.index for r in records]

    detection: dict = {"detected": detected}
    if segments:
        true_boundaries = [s.start for s in segments[1:]]
        delays = {}
        matched = set()
        for boundary in true_boundaries:
            hit = next(
                (d for d in detected if boundary <= d <= boundary + detection_tolerance),
                None,
            )
            delays[str(boundary)] = None if hit is None else hit - boundary
            if hit is not None:
                matched.add(hit)
        spurious = [d for d in detected if d not in matched]
        per_segment_spurious = {
            str(s.segment_id): sum(1 for d in spurious if s.contains(d)) for s in segments
        }
        detection.update(
            {
                "true_boundaries": true_boundaries,
                "delays": delays,
                "missed": [int(b) for b, d in delays.items() if d is None],
                "spurious": spurious,
                "spurious_per_segment": per_segment_spurious,
            }
        )

    predictions: dict[int, int] = {}
    for e in events:
        if isinstance(e.payload, BatchPredicted):
            p = e.payload
            for offset, label in enumerate(p.predicted_labels):
                predictions[p.start_index + offset] = int(label)

    segment_metrics: list[dict] = []
    if segments and labels is not None:
        labels_arr = np.asarray(labels, dtype=int)
        for seg in segments:
            idx = [i for i in range(seg.start, seg.end) if i in predictions]
            if not idx:
                segment_metrics.append(
                    SegmentMetrics(
                        seg.segment_id, seg.kind.value, seg.start, seg.end,
                        0, 0.0, 0.0, 0.0, 0.0,
                    ).to_dict()
                )
                continue
            pred = np.array([predictions[i] for i in idx])
            true = labels_arr[idx]
            flagged = float(pred.mean())
            normals = true == 0
            fp_rate = float(pred[normals].mean()) if normals.any() else 0.0
            tp = int(np.sum((pred == 1) & (true == 1)))
            precision = tp / max(int(pred.sum()), 1) if pred.sum() else 0.0
            recall = tp / max(int(true.sum()), 1) if true.sum() else 0.0
            segment_metrics.append(
                SegmentMetrics(
                    seg.segment_id, seg.kind.value, seg.start, seg.end,
                    len(idx), flagged, fp_rate, precision, recall,
                ).to_dict()
            )

    shap_records: list[dict] = []
    median_alarms: list[dict] = []
    for e in events:
        if isinstance(e.payload, BatchExplained):
            p = e.payload
            for feature, summary in p.stats.items():
                mn, q1, med, q3, mx = summary
                shap_records.append(
                    {
                        "batch": p.batch_index,
                        "start": p.start_index,
                        "feature": feature,
                        "min": mn,
                        "q1": q1,
                        "median": med,
                        "q3": q3,
                        "max": mx,
                        "alarm": any(a[0] == feature for a in p.alarms),
                    }
                )
            for feature, direction in p.alarms:
                median_alarms.append(
                    {
                        "feature": feature,
                        "batch": p.batch_index,
                        "start": p.start_index,
                        "direction": direction,
                    }
                )

    profiles: dict[str, dict[str, float]] = {}
    if attribution_groups:
        raw = segment_median_profile(
            {k: v for k, v in attribution_groups.items() if v}, schema.names
        )
        profiles = {
            str(seg_id): dict(zip(schema.names, medians))
            for seg_id, medians in raw.items()
        }

    return ReplayReport(
        stream_length=config.stream_length,
        warmup=config.warmup_for(config.stream_length),
        changepoints=tuple(r.to_dict() for r in records),
        detection=detection,
        kl_series=tuple(kl_series),
        shap_records=tuple(shap_records),
        median_alarms=tuple(median_alarms),
        segment_metrics=tuple(segment_metrics),
        segment_profiles=profiles,
        train_batches=sum(1 for e in events if isinstance(e.payload, BatchExplained)),
    )


# --- entry points ----------------------------------------------------------------


def build_stream(config: RunConfig):
    """Materialise the configured stream source.

    Returns (samples, schema, segments); segments are empty for CSV sources.
    """

    from .datagen import generate_stream, load_csv, paper_recipe

    if config.stream_csv:
        loaded = load_csv(config.stream_csv, config.name_mapping or None)
        if not loaded.labeled:
            raise ValueError(
                "replay needs a labeled stream (trailing 'label' column)"
            )
        return loaded.samples, loaded.schema, ()
    if config.recipe != "paper":
        raise ValueError(f"unknown recipe {config.recipe!r}")
    gen = generate_stream(paper_recipe(seed=config.seed, total_length=config.stream_length))
    return gen.samples, gen.schema, gen.segments


def run_replay(
    config: RunConfig, samples_override: Sequence[LabeledSample] | None = None
) -> tuple[ReplayReport, Pipeline | None]:
    """Replay the configured stream end to end and aggregate the report.

    An empty stream yields an empty report (and no pipeline).
    """

    if samples_override is not None:
        samples, schema, segments = samples_override, None, ()
        if samples:
            from .datagen import mill_schema

            schema = mill_schema()
    else:
        samples, schema, segments = build_stream(config)
    if not samples:
        empty = replace(config, stream_length=0)
        return (
            ReplayReport(
                stream_length=0,
                warmup=0,
                changepoints=(),
                detection={"detected": []},
                kl_series=(),
                shap_records=(),
                median_alarms=(),
                segment_metrics=(),
                segment_profiles={},
                train_batches=0,
            ),
            None,
        )
    config = replace(config, stream_length=len(samples))
    pipeline = Pipeline(config, schema, len(samples), segments, mode="replay")
    pipeline.run(samples)
    labels = [s.label for s in samples]
    report = pipeline.report(labels)
    return report, pipeline
