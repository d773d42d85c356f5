import json
import time

import pytest
from fastapi.testclient import TestClient

from conftest import mini_config
from millstream.pipeline import run_replay
from millstream.service import PipelineService, create_app


@pytest.fixture(scope="module")
def finished_service():
    service = PipelineService(mini_config())
    service.start()
    service.join(timeout=120)
    assert service.pipeline.state_snapshot().finished
    client = TestClient(create_app(service))
    return service, client


def test_state_endpoint(finished_service):
    service, client = finished_service
    state = client.get("/api/state").json()
    assert state["finished"] is True
    assert state["mode"] == "live"
    assert state["changepoint_count"] >= 1
    assert state["backpressure"] == 0


def test_events_backfill_gap_free(finished_service):
    _, client = finished_service
    full = client.get("/api/events", params={"since": 0}).json()
    cursor = full["next_cursor"]
    assert cursor == len(full["events"])
    # resume from a mid-cursor: the concatenation equals the full log
    mid = cursor // 2
    tail = client.get("/api/events", params={"since": mid}).json()
    assert full["events"][mid:] == tail["events"]
    assert tail["next_cursor"] == cursor
    bad = client.get("/api/events", params={"since": cursor + 10})
    assert bad.status_code == 400


def test_changepoints_endpoint(finished_service):
    _, client = finished_service
    body = client.get("/api/changepoints").json()
    assert body["changepoints"]
    first = body["changepoints"][0]
    assert {"changepoint_id", "index", "verdict", "kl_context"} <= set(first)


def test_shap_batches_match_pipeline_stats(finished_service):
    service, client = finished_service
    body = client.get("/api/shap/batches", params={"feature": "current_2"}).json()
    assert body["feature"] == "current_2"
    assert body["batches"]
    stats_by_batch = {s.batch_index: s for s in service.pipeline.shap_stats}
    for row in body["batches"]:
        summary = stats_by_batch[row["batch_index"]].summary_for("current_2")
        assert (row["min"], row["q1"], row["median"], row["q3"], row["max"]) == summary.as_tuple()
    missing = client.get("/api/shap/batches", params={"feature": "nope"})
    assert missing.status_code == 404


def test_shap_segments_endpoint(finished_service):
    _, client = finished_service
    body = client.get("/api/shap/segments").json()
    assert body["segments"]
    for seg in body["segments"]:
        assert "medians" in seg and "current_2" in seg["medians"]


def test_signals_endpoint(finished_service):
    service, client = finished_service
    body = client.get(
        "/api/signals", params={"feature": "current_2", "from": 100, "to": 160}
    ).json()
    assert body["from"] == 100 and body["to"] == 160
    assert len(body["values"]) == 60
    assert len(body["labels"]) == 60
    col = service.schema.index_of("current_2")
    assert body["values"][0] == service.samples[100].sample.values[col]
    assert client.get("/api/signals", params={"feature": "zz"}).status_code == 404


def test_sse_stream_replays_log(finished_service):
    _, client = finished_service
    got = []
    with client.stream("GET", "/api/stream", params={"since": 0}) as response:
        assert response.headers["content-type"].startswith("text/event-stream")
        for line in response.iter_lines():
            if line.startswith("data: "):
                got.append(json.loads(line[6:]))
            if line.startswith("event: done"):
                break
            if len(got) >= 5:
                break
    assert len(got) >= 5
    assert got[0]["kind"] in {"kl_point", "changepoint_detected"}


def test_report_endpoint_matches_offline_replay(finished_service):
    service, client = finished_service
    served = client.get("/api/report").json()
    offline, _ = run_replay(mini_config())
    assert served == offline.to_dict()


def test_verdict_round_trip_and_conflict(finished_service):
    service, client = finished_service
    cp = client.get("/api/changepoints").json()["changepoints"]
    pending = next(r for r in cp if r["verdict"] == "pending")
    cursor_before = client.get("/api/state").json()["event_cursor"]
    resp = client.post("/api/verdict", json={"id": pending["changepoint_id"], "verdict": "failure"})
    assert resp.status_code == 200
    assert resp.json()["verdict"] == "failure"
    # idle pipeline applies immediately: alarm event + frozen session snapshot
    state = client.get("/api/state").json()
    assert state["alarm"] is True
    assert state["session"]["frozen"] is True
    tail = client.get("/api/events", params={"since": cursor_before}).json()["events"]
    kinds = [e["kind"] for e in tail]
    assert "verdict_applied" in kinds and "alarm_raised" in kinds
    again = client.post("/api/verdict", json={"id": pending["changepoint_id"], "verdict": "healthy"})
    assert again.status_code == 409
    missing = client.post("/api/verdict", json={"id": 999, "verdict": "healthy"})
    assert missing.status_code == 404
    malformed = client.post("/api/verdict", json={"id": 0})
    assert malformed.status_code == 400
