import json

import numpy as np
import pytest

from conftest import mini_config
from millstream.config import RunConfig, load_config, ConfigError
from millstream.core import BatchExplained, BatchPredicted, ChangepointDetected, KlPoint
from millstream.pipeline import (
    Pipeline,
    VerdictError,
    aggregate_report,
    build_stream,
    run_replay,
)


def build_pipeline(config):
    samples, schema, segments = build_stream(config)
    return Pipeline(config, schema, len(samples), segments), samples


def test_replay_detects_recipe_changepoints(mini_replay):
    report, pipeline = mini_replay
    detection = report.detection
    assert detection["delays"]["1600"] is not None
    assert len(detection["spurious"]) <= 1
    assert report.train_batches > 0


def test_event_indexes_non_decreasing(mini_replay):
    _, pipeline = mini_replay
    indexes = [e.index for e in pipeline.events]
    assert indexes == sorted(indexes)


def test_event_log_completeness(mini_replay):
    _, pipeline = mini_replay
    predicted = [e.payload.batch_index for e in pipeline.events if isinstance(e.payload, BatchPredicted)]
    assert len(predicted) == len(set(predicted))
    explained = [e.payload.batch_index for e in pipeline.events if isinstance(e.payload, BatchExplained)]
    assert len(explained) == len(set(explained))
    assert set(explained) <= set(predicted)
    changepoints = [e.payload.changepoint_id for e in pipeline.events if isinstance(e.payload, ChangepointDetected)]
    assert changepoints == sorted(set(changepoints))
    # every monitored sample produced exactly one KL event
    kl_indexes = [e.index for e in pipeline.events if isinstance(e.payload, KlPoint)]
    warmup = pipeline.warmup
    assert kl_indexes == list(range(warmup, pipeline.stream_length))


def test_replay_determinism():
    cfg = mini_config(stream_length=1200, warmup_fraction=0.5)
    report_a, pipe_a = run_replay(cfg)
    report_b, pipe_b = run_replay(cfg)
    assert [e.to_dict() for e in pipe_a.events] == [e.to_dict() for e in pipe_b.events]
    assert report_a.to_dict() == report_b.to_dict()


def test_events_since_cursor():
    cfg = mini_config(stream_length=1200, warmup_fraction=0.5)
    _, pipeline = run_replay(cfg)
    full, cursor = pipeline.events_since(0)
    assert cursor == len(full)
    tail, cursor2 = pipeline.events_since(cursor - 5)
    assert len(tail) == 5
    assert cursor2 == cursor
    with pytest.raises(ValueError):
        pipeline.events_since(cursor + 1)
    with pytest.raises(ValueError):
        pipeline.events_since(-1)


def test_empty_stream_empty_report():
    cfg = mini_config()
    report, pipeline = run_replay(cfg, samples_override=[])
    assert report.kl_series == ()
    assert report.changepoints == ()
    assert pipeline is None or not pipeline.events


def test_verdict_flow_failure_freezes_and_reverts():
    cfg = mini_config()
    samples, schema, segments = build_stream(cfg)
    pipeline = Pipeline(cfg, schema, len(samples), segments)
    frozen_digest = None
    verdict_done = False
    for item in samples:
        pipeline.step_sample(item)
        records = pipeline.changepoint_records()
        if records and not verdict_done:
            pipeline.submit_verdict(records[0].changepoint_id, "failure")
            verdict_done = True
            source_digest = pipeline.session.source_model_digest()
    pipeline.finish()
    assert verdict_done
    events = pipeline.events
    kinds = [e.kind for e in events]
    assert "verdict_applied" in kinds
    assert "alarm_raised" in kinds
    # after the alarm, until the next changepoint, no training happens
    alarm_pos = kinds.index("alarm_raised")
    next_cp = next(
        (i for i in range(alarm_pos, len(events)) if kinds[i] == "changepoint_detected"),
        len(events),
    )
    between = kinds[alarm_pos:next_cp]
    assert "batch_explained" not in between
    # predictions in the frozen stretch come from the source model
    frozen_preds = [
        e.payload
        for e in events[alarm_pos:next_cp]
        if isinstance(e.payload, BatchPredicted)
    ]
    assert all(p.model == "source" for p in frozen_preds)
    record = pipeline.changepoint_records()[0]
    assert record.verdict == "failure"


def test_verdict_healthy_keeps_training():
    cfg = mini_config()
    samples, schema, segments = build_stream(cfg)
    pipeline = Pipeline(cfg, schema, len(samples), segments)
    verdict_done = False
    trained_after = 0
    for item in samples:
        pipeline.step_sample(item)
        records = pipeline.changepoint_records()
        if records and not verdict_done:
            pipeline.submit_verdict(records[0].changepoint_id, "healthy")
            verdict_done = True
            baseline = len([e for e in pipeline.events if e.kind == "batch_explained"])
    pipeline.finish()
    assert verdict_done
    explained = len([e for e in pipeline.events if e.kind == "batch_explained"])
    assert explained > baseline  # training metrics recorded after the verdict


def test_verdict_errors():
    cfg = mini_config()
    samples, schema, segments = build_stream(cfg)
    pipeline = Pipeline(cfg, schema, len(samples), segments)
    with pytest.raises(VerdictError):
        pipeline.submit_verdict(0, "healthy")
    for item in samples:
        pipeline.step_sample(item)
        if pipeline.changepoint_records():
            break
    cp = pipeline.changepoint_records()[0].changepoint_id
    with pytest.raises(VerdictError):
        pipeline.submit_verdict(cp, "sideways")
    pipeline.submit_verdict(cp, "healthy")
    with pytest.raises(VerdictError):
        pipeline.submit_verdict(cp, "failure")


def test_snapshot_after_changepoint_has_empty_target():
    cfg = mini_config()
    samples, schema, segments = build_stream(cfg)
    pipeline = Pipeline(cfg, schema, len(samples), segments)
    for item in samples:
        pipeline.step_sample(item)
        if pipeline.changepoint_records():
            break
    snap = pipeline.state_snapshot()
    assert snap.session is not None
    assert snap.session.target_size == 0
    assert snap.changepoint_count == 1
    assert snap.pending_verdicts == 1
    assert snap.session.active


def test_report_is_pure_function_of_events(mini_replay):
    report, pipeline = mini_replay
    samples, schema, segments = build_stream(mini_config())
    labels = [s.label for s in samples]
    again = aggregate_report(
        pipeline.events,
        pipeline.config,
        schema,
        segments,
        labels,
        pipeline.changepoint_records(),
        pipeline.segment_attribution_groups(),
    )
    assert again.to_dict() == report.to_dict()


def test_report_segment_metrics_cover_predicted_samples(mini_replay):
    report, _ = mini_replay
    for metrics in report.segment_metrics:
        assert 0.0 <= metrics["flagged_rate"] <= 1.0
        assert 0.0 <= metrics["false_positive_rate"] <= 1.0


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"batch_size": 40, "seed": 3}))
    cfg = load_config(path, seed=9, warmup_fraction=None)
    assert cfg.batch_size == 40
    assert cfg.seed == 9  # flag overrides file
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(bad)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"no_such_key": 1}))
    with pytest.raises(ConfigError):
        load_config(unknown)


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(warmup_fraction=1.5)
    with pytest.raises(ConfigError):
        RunConfig(kl_form="nope")
    with pytest.raises(ConfigError):
        RunConfig(label_mode="guess")
    assert RunConfig(listen="0.0.0.0:9000").listen_address() == ("0.0.0.0", 9000)
    with pytest.raises(ConfigError):
        RunConfig(listen="bare").listen_address()


def test_pseudo_label_mode_runs():
    cfg = mini_config(stream_length=1500, warmup_fraction=0.5, label_mode="pseudo-labels")
    report, pipeline = run_replay(cfg)
    assert report.train_batches > 0
    assert pipeline.session is not None
    # pseudo-mode target records carry the pseudo flag
    flags = {t.label_source for t in pipeline.session.targets}
    assert flags <= {"pseudo"}
