"""Command-line front end.

Subcommands: generate (synthetic stream to CSV), detect (changepoints only),
replay (full pipeline, writes a run directory), serve (HTTP service),
bench-baselines (static detectors on a stream), report (figure-data CSVs
from a run directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

__all__ = ["main", "build_parser"]


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--stream", dest="stream_csv", help="stream CSV path")
    parser.add_argument("--recipe", help="synthetic recipe name (paper)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--knn", dest="k_nn", type=int)
    parser.add_argument("--ph-delta", dest="ph_delta", type=float)
    parser.add_argument("--ph-lambda", dest="ph_lambda", type=float)
    parser.add_argument(
        "--warmup", dest="warmup_fraction", type=float, help="warm-up fraction of the stream"
    )
    parser.add_argument(
        "--features", help="comma-separated detection feature subset"
    )
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--listen", help="host:port for serve")
    parser.add_argument("--length", dest="stream_length", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="millstream")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "write a synthetic stream CSV"),
        ("detect", "changepoint detection only"),
        ("replay", "full pipeline replay; writes report and events"),
        ("serve", "run the HTTP service over a replay"),
        ("bench-baselines", "evaluate IF/LOF/AE on the stream"),
        ("report", "emit figure-data CSVs from a replay run directory"),
    ):
        p = sub.add_parser(name, help=help_text)
        if name == "report":
            p.add_argument("run_dir", help="directory written by replay")
            p.add_argument("--out", dest="out_dir")
        else:
            _common_flags(p)
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "stream_csv",
            "recipe",
            "seed",
            "batch_size",
            "k_nn",
            "ph_delta",
            "ph_lambda",
            "warmup_fraction",
            "out_dir",
            "listen",
            "stream_length",
        )
    }
    features = getattr(args, "features", None)
    if features:
        overrides["features"] = tuple(f.strip() for f in features.split(",") if f.strip())
    return load_config(getattr(args, "config", None), **overrides)


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c) for c in columns})


def cmd_generate(config: RunConfig) -> int:
    from .datagen import generate_stream, paper_recipe, write_csv

    out_dir = Path(config.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    gen = generate_stream(paper_recipe(seed=config.seed, total_length=config.stream_length))
    stream_path = out_dir / "stream.csv"
    write_csv(stream_path, gen.samples, gen.schema)
    segments_path = out_dir / "segments.json"
    segments_path.write_text(
        json.dumps(
            [
                {
                    "segment_id": s.segment_id,
                    "start": s.start,
                    "end": s.end,
                    "kind": s.kind.value,
                    "ithick": s.ithick,
                    "othick": s.othick,
                    "width": s.width,
                }
                for s in gen.segments
            ],
            indent=2,
        )
    )
    print(f"wrote {stream_path} ({len(gen.samples)} samples) and {segments_path}")
    return 0


def cmd_detect(config: RunConfig) -> int:
    from .changepoint import ChangepointMonitor, MonitorConfig, PageHinkleyConfig
    from .divergence import KlEstimatorConfig, KlForm
    from .pipeline import build_stream

    samples, schema, _ = build_stream(config)
    warmup = config.warmup_for(len(samples))
    ph = None
    if config.ph_lambda is not None:
        ph = PageHinkleyConfig(
            delta=config.ph_delta if config.ph_delta is not None else 0.005,
            threshold=config.ph_lambda,
            min_instances=config.ph_min_instances,
        )
    monitor = ChangepointMonitor(
        schema,
        MonitorConfig(
            feature_subset=config.features or None,
            kl=KlEstimatorConfig(k_nn=config.k_nn, form=KlForm(config.kl_form)),
            ph=ph,
            min_ref_size=warmup,
            post_reset_min=min(config.post_reset_min, max(warmup // 2, 2)),
        ),
    )
    for item in samples:
        monitor.step(item.sample)
    for index in monitor.changepoints:
        print(index)
    if not monitor.changepoints:
        print("no changepoints detected", file=sys.stderr)
    return 0


def cmd_replay(config: RunConfig) -> int:
    from .pipeline import run_replay

    report, pipeline = run_replay(config)
    out_dir = Path(config.out_dir or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with (out_dir / "events.jsonl").open("w") as handle:
        for event in pipeline.events:
            handle.write(json.dumps(event.to_dict()) + "\n")
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    detected = report.detection.get("detected", [])
    print(f"replayed {report.stream_length} samples; changepoints at {detected}")
    print(f"wrote {out_dir}/report.json and {out_dir}/events.jsonl")
    return 0


def cmd_serve(config: RunConfig) -> int:
    from .service import serve

    serve(config)
    return 0


def cmd_bench_baselines(config: RunConfig) -> int:
    import numpy as np

    from .baselines import (
        AutoencoderDetector,
        IsolationForest,
        LocalOutlierFactor,
        evaluate_on_stream,
    )
    from .pipeline import build_stream

    samples, schema, segments = build_stream(config)
    if not segments:
        print("bench-baselines needs a recipe stream with segments", file=sys.stderr)
        return 2
    x = np.array([s.sample.values for s in samples])
    y = np.array([s.label for s in samples])
    source = segments[0]
    train = x[source.start : source.end]
    detectors = {
        "isolation-forest": IsolationForest(
            contamination=config.contamination, seed=config.seed
        ),
        "lof": LocalOutlierFactor(contamination=config.contamination),
        "autoencoder": AutoencoderDetector(
            contamination=config.contamination, seed=config.seed
        ),
    }
    rows = []
    for name, detector in detectors.items():
        detector.fit(train)
        for ev in evaluate_on_stream(detector, x, y, segments):
            rows.append(
                {
                    "detector": name,
                    "segment": ev.segment_id,
                    "kind": ev.kind,
                    "start": ev.start,
                    "end": ev.end,
                    "flagged_rate": round(ev.flagged_rate, 4),
                    "precision": round(ev.precision, 4),
                    "recall": round(ev.recall, 4),
                }
            )
        print(name, "done")
    out_dir = Path(config.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "baseline_evaluation.csv"
    _write_csv(
        path,
        rows,
        ["detector", "segment", "kind", "start", "end", "flagged_rate", "precision", "recall"],
    )
    print(f"wrote {path}")
    return 0


def cmd_report(run_dir: str, out_dir: str | None) -> int:
    run_path = Path(run_dir)
    report_path = run_path / "report.json"
    if not report_path.exists():
        print(f"no report.json in {run_dir}", file=sys.stderr)
        return 2
    report = json.loads(report_path.read_text())
    out_path = Path(out_dir or run_path)
    out_path.mkdir(parents=True, exist_ok=True)

    _write_csv(
        out_path / "kl_series.csv",
        [{"index": i, "kl": v} for i, v in report["kl_series"]],
        ["index", "kl"],
    )
    _write_csv(
        out_path / "shap_batches.csv",
        report["shap_records"],
        ["batch", "start", "feature", "min", "q1", "median", "q3", "max", "alarm"],
    )
    profile_rows = [
        {"segment": seg, "feature": feature, "median": value}
        for seg, medians in report["segment_profiles"].items()
        for feature, value in medians.items()
    ]
    _write_csv(
        out_path / "segment_medians.csv", profile_rows, ["segment", "feature", "median"]
    )
    _write_csv(
        out_path / "segment_metrics.csv",
        report["segment_metrics"],
        [
            "segment_id",
            "kind",
            "start",
            "end",
            "predicted",
            "flagged_rate",
            "false_positive_rate",
            "precision",
            "recall",
        ],
    )
    _write_csv(
        out_path / "changepoints.csv",
        report["changepoints"],
        ["changepoint_id", "index", "verdict", "verdict_index", "verdict_source"],
    )
    print(f"wrote figure data to {out_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir, args.out_dir)
        config = _config_from_args(args)
        handler = {
            "generate": cmd_generate,
            "detect": cmd_detect,
            "replay": cmd_replay,
            "serve": cmd_serve,
            "bench-baselines": cmd_bench_baselines,
        }[args.command]
        return handler(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
