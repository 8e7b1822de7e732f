# app/commands/extract.py
import argparse
import logging
from pathlib import Path
from typing import Optional

import pandas as pd

from app.errors import ConfigError
from app.schemas import EncoderConfig
from app.services.checkpoint import load_checkpoint
from app.services.encoder import EncoderState, build_encoder
from app.services.radiomics import extract_all, write_features
from app.services.volumes import load_dataset
from app.commands.common import ensure_out_dir, write_config_echo

logger = logging.getLogger(__name__)

FEATURES_NAME = "features.csv"


def run(data_dir, out_path: Path, feature_set: str = "concat", checkpoint: Optional[str] = None,
        random_encoder_seed: Optional[int] = None) -> pd.DataFrame:
    dataset = load_dataset(data_dir)
    state: Optional[EncoderState] = None
    if feature_set != "trad":
        if checkpoint:
            state, _ = load_checkpoint(checkpoint)
        elif random_encoder_seed is not None:
            extent = dataset.volumes[0].extents[0] if dataset.volumes else 16
            state = build_encoder(EncoderConfig.desk(input_extent=extent), random_encoder_seed)
            logger.warning("[extract] using an untrained encoder (random baseline, seed=%d)", random_encoder_seed)
        else:
            raise ConfigError(f"--features {feature_set} needs --checkpoint or --random-encoder")
    records = extract_all(dataset, state, feature_set)
    return write_features(out_path, records, feature_set, dataset.class_names)


def handle(args, recorder) -> int:
    out = ensure_out_dir(args.out)
    echo = {"data": args.data, "checkpoint": args.checkpoint, "features": args.features,
            "random_encoder": args.random_encoder}
    recorder.start_run("extract", args.random_encoder, echo, str(out))
    write_config_echo(out, "extract", echo, args.random_encoder)
    frame = run(args.data, out / FEATURES_NAME, args.features, args.checkpoint, args.random_encoder)
    print(f"features: {out / FEATURES_NAME}  rows: {len(frame)}  columns: {frame.shape[1] - 2}")
    recorder.finish_run()
    return 0


def register(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("extract", help="extract traditional / SSL / concatenated features")
    p.add_argument("--checkpoint", default=None, help="pretrained encoder checkpoint")
    p.add_argument("--random-encoder", type=int, default=None, metavar="SEED",
                   help="use an untrained encoder built from SEED (baseline)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--features", choices=["trad", "ssl", "concat"], default="concat")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=handle)
    return p
