import csv
import json

import pytest

from millstream.cli import main


def test_generate_then_detect(tmp_path, capsys):
    out = tmp_path / "gen"
    assert main([
        "generate", "--length", "1500", "--seed", "4", "--out", str(out),
    ]) == 0
    captured = capsys.readouterr()
    assert "stream.csv" in captured.out
    stream = out / "stream.csv"
    assert stream.exists()
    segments = json.loads((out / "segments.json").read_text())
    assert segments[0]["kind"] == "source-product"

    assert main([
        "detect", "--stream", str(stream), "--warmup", "0.4", "--seed", "4",
    ]) == 0
    captured = capsys.readouterr()
    detected = [int(line) for line in captured.out.splitlines() if line.strip()]
    assert any(1200 <= d <= 1300 for d in detected)


def test_generate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["generate", "--length", "600", "--seed", "7", "--out", str(a)])
    main(["generate", "--length", "600", "--seed", "7", "--out", str(b)])
    assert (a / "stream.csv").read_bytes() == (b / "stream.csv").read_bytes()


def test_replay_and_report(tmp_path, capsys):
    run_dir = tmp_path / "run"
    code = main([
        "replay",
        "--length", "1500",
        "--warmup", "0.5",
        "--seed", "0",
        "--config", str(_mini_config_file(tmp_path)),
        "--out", str(run_dir),
    ])
    assert code == 0
    report = json.loads((run_dir / "report.json").read_text())
    assert report["stream_length"] == 1500
    assert (run_dir / "events.jsonl").exists()

    assert main(["report", str(run_dir)]) == 0
    with (run_dir / "shap_batches.csv").open() as handle:
        header = next(csv.reader(handle))
    assert header == ["batch", "start", "feature", "min", "q1", "median", "q3", "max", "alarm"]
    with (run_dir / "kl_series.csv").open() as handle:
        header = next(csv.reader(handle))
    assert header == ["index", "kl"]
    assert (run_dir / "segment_medians.csv").exists()
    assert (run_dir / "segment_metrics.csv").exists()
    assert (run_dir / "changepoints.csv").exists()


def _mini_config_file(tmp_path):
    path = tmp_path / "mini.json"
    path.write_text(json.dumps({
        "post_reset_min": 60,
        "ph_min_instances": 20,
        "batch_size": 25,
        "ccsa_epochs": 10,
        "ccsa_pairs_per_kind": 16,
        "pretrain_epochs": 50,
        "source_train_cap": 300,
        "explainer_permutations": 8,
        "explain_instances": 4,
        "background_size": 8,
        "median_calibration_batches": 3,
    }))
    return path


def test_bench_baselines(tmp_path, capsys):
    out = tmp_path / "bench"
    code = main([
        "bench-baselines", "--length", "1200", "--seed", "1", "--out", str(out),
    ])
    assert code == 0
    with (out / "baseline_evaluation.csv").open() as handle:
        rows = list(csv.DictReader(handle))
    detectors = {r["detector"] for r in rows}
    assert detectors == {"isolation-forest", "lof", "autoencoder"}
    assert all(0.0 <= float(r["flagged_rate"]) <= 1.0 for r in rows)


def test_usage_errors(tmp_path, capsys):
    code = main(["report", str(tmp_path / "missing")])
    captured = capsys.readouterr()
    assert code == 2
    assert "report.json" in captured.err

    bad_config = tmp_path / "bad.json"
    bad_config.write_text("{broken")
    code = main(["detect", "--config", str(bad_config)])
    captured = capsys.readouterr()
    assert code == 2
    assert "config error" in captured.err

    code = main(["detect", "--stream", str(tmp_path / "nope.csv")])
    assert code == 1


def test_report_command_idempotent(tmp_path):
    run_dir = tmp_path / "run"
    main([
        "replay", "--length", "1200", "--warmup", "0.5", "--seed", "2",
        "--config", str(_mini_config_file(tmp_path)), "--out", str(run_dir),
    ])
    main(["report", str(run_dir)])
    first = (run_dir / "shap_batches.csv").read_bytes()
    main(["report", str(run_dir)])
    assert (run_dir / "shap_batches.csv").read_bytes() == first
