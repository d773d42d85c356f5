"""HTTP/JSON service surface over a running pipeline.

A background thread replays the configured stream through a Pipeline; the
FastAPI app exposes read endpoints (state, events, changepoints, SHAP stats,
raw signals), the operator verdict endpoint, and a server-sent-events feed of
the live event log.  All reads go through the pipeline's thread-safe
snapshot/cursor surface, so the UI can reconnect and backfill without gaps.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import replace
from typing import Iterator

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import StreamingResponse

from .config import RunConfig
from .core import BatchPredicted
from .pipeline import FAILURE, HEALTHY, Pipeline, VerdictError, build_stream

__all__ = ["PipelineService", "create_app", "serve"]


class PipelineService:
    """Owns the pipeline and the replay thread."""

    def __init__(self, config: RunConfig) -> None:
        samples, schema, segments = build_stream(config)
        config = replace(config, stream_length=len(samples))
        self.config = config
        self.samples = samples
        self.schema = schema
        self.segments = segments
        self.pipeline = Pipeline(config, schema, len(samples), segments, mode="live")
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, name="pipeline", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        delay = self.config.replay_delay_ms / 1000.0
        for item in self.samples:
            if self._stop.is_set():
                break
            self.pipeline.step_sample(item)
            if delay:
                time.sleep(delay)
        self.pipeline.finish()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10.0)

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def labels(self) -> list[int]:
        return [s.label for s in self.samples]


def create_app(service: PipelineService) -> FastAPI:
    app = FastAPI(title="millstream pipeline service")
    pipeline = service.pipeline

    @app.get("/api/state")
    def state() -> dict:
        return pipeline.state_snapshot().to_dict()

    @app.get("/api/events")
    def events(since: int = Query(0, ge=0)) -> dict:
        try:
            chunk, cursor = pipeline.events_since(since)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"events": [e.to_dict() for e in chunk], "next_cursor": cursor}

    @app.get("/api/changepoints")
    def changepoints() -> dict:
        return {"changepoints": [r.to_dict() for r in pipeline.changepoint_records()]}

    @app.get("/api/shap/batches")
    def shap_batches(feature: str) -> dict:
        if feature not in service.schema.names:
            raise HTTPException(status_code=404, detail=f"unknown feature {feature!r}")
        alarm_keys = {(a.feature, a.batch_index) for a in pipeline.median_alarms}
        batches = []
        for stats in pipeline.shap_stats:
            summary = stats.summary_for(feature)
            batches.append(
                {
                    "batch_index": stats.batch_index,
                    "min": summary.minimum,
                    "q1": summary.q1,
                    "median": summary.median,
                    "q3": summary.q3,
                    "max": summary.maximum,
                    "alarm": (feature, stats.batch_index) in alarm_keys,
                }
            )
        return {"feature": feature, "batches": batches}

    @app.get("/api/shap/segments")
    def shap_segments() -> dict:
        groups = pipeline.segment_attribution_groups()
        from .shap_monitor import segment_median_profile

        nonempty = {k: v for k, v in groups.items() if v}
        profiles = segment_median_profile(nonempty, service.schema.names)
        out = []
        for seg_id, medians in sorted(profiles.items(), key=lambda p: str(p[0])):
            descriptor = next(
                (s for s in service.segments if s.segment_id == seg_id), None
            )
            out.append(
                {
                    "segment_id": seg_id,
                    "kind": descriptor.kind.value if descriptor else "interval",
                    "start": descriptor.start if descriptor else None,
                    "end": descriptor.end if descriptor else None,
                    "medians": dict(zip(service.schema.names, medians)),
                }
            )
        return {"segments": out}

    @app.get("/api/signals")
    def signals(
        feature: str,
        start: int = Query(0, alias="from", ge=0),
        to: int | None = Query(None),
    ) -> dict:
        if feature not in service.schema.names:
            raise HTTPException(status_code=404, detail=f"unknown feature {feature!r}")
        col = service.schema.index_of(feature)
        end = len(service.samples) if to is None else min(to, len(service.samples))
        processed = pipeline.state_snapshot().processed
        end = min(end, processed + 1)
        values = [float(service.samples[i].sample.values[col]) for i in range(start, end)]
        labels = [service.samples[i].label for i in range(start, end)]
        predicted: dict[int, int] = {}
        for event in pipeline.events:
            if isinstance(event.payload, BatchPredicted):
                p = event.payload
                for offset, label in enumerate(p.predicted_labels):
                    idx = p.start_index + offset
                    if start <= idx < end:
                        predicted[idx] = int(label)
        return {
            "feature": feature,
            "from": start,
            "to": end,
            "values": values,
            "labels": labels,
            "predicted": [predicted.get(i) for i in range(start, end)],
            "changepoints": [
                r.index for r in pipeline.changepoint_records() if start <= r.index < end
            ],
            "segments": [
                {"segment_id": s.segment_id, "start": s.start, "end": s.end, "kind": s.kind.value}
                for s in service.segments
                if s.start < end and s.end > start
            ],
        }

    @app.post("/api/verdict")
    def verdict(body: dict) -> dict:
        if not isinstance(body, dict) or "id" not in body or "verdict" not in body:
            raise HTTPException(status_code=400, detail="body needs {id, verdict}")
        choice = str(body["verdict"])
        if choice not in (HEALTHY, FAILURE):
            raise HTTPException(status_code=400, detail=f"bad verdict {choice!r}")
        try:
            record = pipeline.submit_verdict(int(body["id"]), choice)
        except VerdictError as exc:
            status = 404 if "unknown" in str(exc) else 409
            raise HTTPException(status_code=status, detail=str(exc))
        return record.to_dict()

    @app.get("/api/stream")
    def stream(since: int = Query(0, ge=0)) -> StreamingResponse:
        def feed() -> Iterator[str]:
            cursor = since
            idle = 0.0
            while True:
                chunk, cursor = pipeline.wait_for_events(cursor, timeout=0.5)
                for offset, event in enumerate(chunk, start=cursor - len(chunk) + 1):
                    yield f"id: {offset}\ndata: {json.dumps(event.to_dict())}\n\n"
                if chunk:
                    idle = 0.0
                    continue
                idle += 0.5
                state = pipeline.state_snapshot()
                if state.finished and cursor >= state.event_cursor:
                    yield "event: done\ndata: {}\n\n"
                    return
                if idle >= 15.0:
                    yield ": keepalive\n\n"
                    idle = 0.0

        return StreamingResponse(feed(), media_type="text/event-stream")

    @app.get("/api/report")
    def report() -> dict:
        return pipeline.report(service.labels()).to_dict()

    return app


def serve(config: RunConfig) -> None:
    """Run the replay service until the process is interrupted."""

    import uvicorn

    service = PipelineService(config)
    service.start()
    host, port = config.listen_address()
    uvicorn.run(create_app(service), host=host, port=port, log_level="warning")
