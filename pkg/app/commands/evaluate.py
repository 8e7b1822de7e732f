# app/commands/evaluate.py
import argparse
import logging
from pathlib import Path
from typing import Optional

import pandas as pd

from app.errors import DataError
from app.schemas import MetricsReport
from app.services.evaluation import feature_columns, pearson_matrix, report_frame, run_protocol
from app.services.radiomics import SSL_PREFIX, read_class_names, read_features
from app.commands.common import ensure_out_dir, write_config_echo

logger = logging.getLogger(__name__)

METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
PEARSON_CSV = "pearson_hist.csv"
PEARSON_COMPARE_CSV = "pearson_compare.csv"


def resolve_class(value: Optional[str], class_names) -> Optional[int]:
    if value is None:
        return None
    if value in class_names:
        return class_names.index(value)
    try:
        return int(value)
    except ValueError:
        raise DataError(f"unknown class {value!r}; known: {class_names}")


def pearson_block(frame: pd.DataFrame):
    """SSL columns when present, otherwise every feature column."""
    ssl = [c for c in frame.columns if c.startswith(SSL_PREFIX)]
    cols = ssl or [c for c in frame.columns if c not in ("id", "label")]
    return pearson_matrix(frame[cols].to_numpy(dtype=float), cols)


def run(features: Path, out_dir: Path, feature_set: str = "concat", folds: int = 5,
        label_budget: float = 1.0, seed: int = 0, minor_class: Optional[str] = None,
        compare_features: Optional[Path] = None) -> MetricsReport:
    frame = read_features(features)
    class_names = read_class_names(features)
    labels = sorted(int(v) for v in frame["label"].unique())
    names = {c: class_names[c] if c < len(class_names) else str(c) for c in labels}
    feature_columns(frame, feature_set)

    report = run_protocol(frame, feature_set, folds=folds, label_budget=label_budget, seed=seed,
                          minor_class=resolve_class(minor_class, class_names), class_names=names)
    (out_dir / METRICS_JSON).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    report_frame(report).to_csv(out_dir / METRICS_CSV, index=False, float_format="%.6f")

    hist = pearson_block(frame).histogram
    hist.to_csv(out_dir / PEARSON_CSV, index=False, float_format="%.6f")
    if compare_features:
        other = pearson_block(read_features(compare_features)).histogram
        both = hist[["bin_left", "bin_right"]].copy()
        both["density_a"] = hist["density"]
        both["density_b"] = other["density"]
        both.to_csv(out_dir / PEARSON_COMPARE_CSV, index=False, float_format="%.6f")
    return report


def handle(args, recorder) -> int:
    out = ensure_out_dir(args.out)
    echo = {k: getattr(args, k) for k in
            ("features", "feature_set", "folds", "label_budget", "minor_class", "seed", "compare_features")}
    recorder.start_run("evaluate", args.seed, echo, str(out))
    write_config_echo(out, "evaluate", echo, args.seed)
    report = run(Path(args.features), out, args.feature_set, args.folds, args.label_budget, args.seed,
                 args.minor_class, Path(args.compare_features) if args.compare_features else None)
    recorder.record_metrics(report.feature_set, {
        "overall_accuracy": report.overall_accuracy, "balanced_accuracy": report.balanced_accuracy,
        "minor_class_accuracy": report.minor_class_accuracy, "sensitivity": report.sensitivity,
        "specificity": report.specificity, "auc": report.auc})
    print(report_frame(report).to_string(index=False))
    recorder.finish_run()
    return 0


def register(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("evaluate", help="stratified CV linear-probe evaluation")
    p.add_argument("--features", required=True, help="feature CSV written by extract")
    p.add_argument("--feature-set", choices=["trad", "ssl", "concat"], default="concat")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--label-budget", type=float, default=1.0, help="fraction of training labels kept per class")
    p.add_argument("--minor-class", default=None, help="class name or label (default: smallest class)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compare-features", default=None, help="second feature CSV for the Pearson comparison")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=handle)
    return p
