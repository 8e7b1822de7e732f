#!/usr/bin/env python3
"""
Directional imbalance experiment on the synthetic binary phantom set.

- Synthesizes the 125:38 dataset at 16^3 (once, seed 0).
- For each seed, pretrains vanilla / RE / SE encoders, extracts concat features
  and runs the 5-fold linear probe.
- Prints per-seed minor/major recall, a one-sided sign test of RE and SE against
  vanilla, and writes everything to OUT_DIR/acceptance.csv.
"""

import sys
from pathlib import Path
from typing import Tuple

import numpy as np
import pandas as pd
from scipy.stats import binomtest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.schemas import EncoderConfig, ExperimentConfig, ImbalanceConfig, SynthSpec, TrainConfig  # noqa: E402
from app.services.volumes import synth_dataset  # noqa: E402
from app.commands import evaluate, extract, pretrain  # noqa: E402

OUT_DIR = Path("./acceptance_runs")
SEEDS = [0, 1, 2, 3, 4]
MODES = ["none", "re", "se"]
ITERATIONS = 100
RATIO = [125.0, 38.0]
EXTENT = 16


def sign_test_p(wins: int, n: int) -> float:
    # one-sided; n excludes tied seeds
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def compare_to_vanilla(table: pd.DataFrame, mode: str, baseline: str = "none") -> Tuple[int, int, float]:
    """(strict wins, non-tied seeds, p) for one mode column against the baseline column."""
    diff = table[mode] - table[baseline]
    wins = int((diff > 0).sum())
    n = int((diff != 0).sum())
    return wins, n, sign_test_p(wins, n)


def major_recall(report) -> float:
    minor = report.minor_class
    vals = []
    for fm in report.per_fold:
        labels = list(fm.test_counts)
        i = 1 - labels.index(minor)
        row = fm.confusion[i]
        vals.append(row[i] / sum(row))
    return float(np.mean(vals))


def main():
    data_dir = OUT_DIR / "data"
    if not (data_dir / "manifest.json").exists():
        synth_dataset(SynthSpec(classes=["major", "minor"], ratio=RATIO, extent=EXTENT, seed=0), data_dir)

    rows = []
    for seed in SEEDS:
        for mode in MODES:
            run_dir = OUT_DIR / f"seed_{seed}" / mode
            run_dir.mkdir(parents=True, exist_ok=True)
            config = ExperimentConfig(
                seed=seed,
                encoder=EncoderConfig.desk(input_extent=EXTENT),
                train=TrainConfig(iterations=ITERATIONS),
                imbalance=ImbalanceConfig(mode=mode),
            )
            result = pretrain.run(config, data_dir, run_dir)
            extract.run(data_dir, run_dir / extract.FEATURES_NAME, "concat", str(result.checkpoint))
            report = evaluate.run(run_dir / extract.FEATURES_NAME, run_dir, "concat", seed=seed)
            rows.append(dict(seed=seed, mode=mode, minor_recall=report.minor_class_accuracy,
                             major_recall=major_recall(report), auc=report.auc))
            print(f"seed={seed} mode={mode} minor={report.minor_class_accuracy:.3f} auc={report.auc:.3f}")

    frame = pd.DataFrame(rows)
    frame.to_csv(OUT_DIR / "acceptance.csv", index=False, float_format="%.6f")
    table = frame.pivot(index="seed", columns="mode", values="minor_recall")
    major = frame.pivot(index="seed", columns="mode", values="major_recall")
    for mode in ("re", "se"):
        wins, n, p = compare_to_vanilla(table, mode)
        drop = float(major["none"].mean() - major[mode].mean())
        print(f"{mode}: mean minor {table[mode].mean():.3f} vs vanilla {table['none'].mean():.3f}; "
              f"wins {wins}/{n} (ties {len(SEEDS) - n}) p={p:.3f}; major drop {drop:.3f}")


if __name__ == "__main__":
    main()
