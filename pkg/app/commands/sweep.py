# app/commands/sweep.py
"""
Supplementary sweeps: number of clusters k (0 = no SE module) or SE batch
size m. Every (value, repeat) point runs pretrain -> extract -> evaluate in
its own directory and contributes one CSV row.
"""
import argparse
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List

import pandas as pd

from app.errors import ConfigError
from app.schemas import ExperimentConfig
from app.services import seeding
from app.commands import evaluate, extract, pretrain
from app.commands.common import ensure_out_dir, write_config_echo

logger = logging.getLogger(__name__)

SWEEP_CSV = "sweep.csv"


def parse_values(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"invalid value list {text!r}")
    if not values:
        raise ConfigError("empty value list")
    return values


def point_config(base: ExperimentConfig, param: str, value: int, seed: int) -> ExperimentConfig:
    imbalance = base.imbalance.model_dump()
    if param == "k":
        imbalance.update(mode="se" if value > 0 else "none", k=value if value > 0 else base.imbalance.k)
    else:
        imbalance.update(mode="se", m=value)
    data = base.model_dump()
    data.update(seed=seed, imbalance=imbalance)
    return ExperimentConfig.model_validate(data)


def point_seed(seed: int, repeat: int) -> int:
    return seeding.int_seed(seed, "sweep", repeat) % (2 ** 31)


def run_point(base: ExperimentConfig, param: str, value: int, repeat: int, data_dir, out_dir: Path,
              folds: int) -> Dict:
    seed = point_seed(base.seed, repeat)
    config = point_config(base, param, value, seed)
    point_dir = ensure_out_dir(str(out_dir / f"{param}_{value}" / f"repeat_{repeat}"))
    write_config_echo(point_dir, "sweep-point", config.model_dump(mode="json"), seed)
    result = pretrain.run(config, data_dir, point_dir)
    extract.run(data_dir, point_dir / extract.FEATURES_NAME, "concat", str(result.checkpoint))
    report = evaluate.run(point_dir / extract.FEATURES_NAME, point_dir, "concat", folds=folds, seed=seed)
    logger.info("[sweep] %s=%d repeat=%d auc=%.4f minor=%.4f", param, value, repeat,
                report.auc, report.minor_class_accuracy)
    return dict(param=param, value=value, repeat=repeat, seed=seed, auc=report.auc,
                minor_recall=report.minor_class_accuracy, balanced_accuracy=report.balanced_accuracy)


def run(base: ExperimentConfig, param: str, values: List[int], repeats: int, data_dir, out_dir: Path,
        folds: int = 5, workers: int = 1) -> pd.DataFrame:
    if not values:
        raise ConfigError("empty value list")
    # validate every point before spending any compute
    for v in values:
        point_config(base, param, v, base.seed)
    jobs = [(v, r) for v in values for r in range(repeats)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda j: run_point(base, param, j[0], j[1], data_dir, out_dir, folds), jobs))
    else:
        rows = [run_point(base, param, v, r, data_dir, out_dir, folds) for v, r in jobs]
    frame = pd.DataFrame(rows).sort_values(["value", "repeat"], kind="stable").reset_index(drop=True)
    frame.to_csv(out_dir / SWEEP_CSV, index=False, float_format="%.6f")
    return frame


def handle(args, recorder) -> int:
    values = parse_values(args.values)
    base = pretrain.build_config(args, pretrain.dataset_extent(args.data))
    out = ensure_out_dir(args.out)
    echo = dict(base=base.model_dump(mode="json"), param=args.param, values=values, repeats=args.repeats)
    recorder.start_run("sweep", base.seed, echo, str(out))
    write_config_echo(out, "sweep", echo, base.seed)
    frame = run(base, args.param, values, args.repeats, args.data, out, args.folds, args.workers)
    for row in frame.to_dict("records"):
        recorder.record_sweep_point(row["param"], int(row["value"]), int(row["repeat"]), int(row["seed"]),
                                    row["auc"], row["minor_recall"])
    summary = frame.groupby("value")[["auc", "minor_recall"]].mean()
    print(summary.to_string())
    recorder.finish_run()
    return 0


def register(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("sweep", help="AUC vs number of clusters or SE batch size")
    p.add_argument("--param", choices=["k", "batch"], required=True)
    p.add_argument("--values", required=True, help="comma-separated, e.g. 0,2,3,5 (k=0 means no SE)")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1, help="points evaluated concurrently")
    pretrain.add_training_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=handle)
    return p
