# app/commands/pretrain.py
import argparse
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from app.errors import ShapeError
from app.schemas import EncoderConfig, ExperimentConfig, ImbalanceConfig, TrainConfig
from app.services.augment import make_view_batch
from app.services.checkpoint import save_checkpoint
from app.services.encoder import build_encoder
from app.services.imbalance import plan_batches, steps_per_epoch
from app.services.siamese import PairBatch, SiamStep, run_pretraining
from app.services.volumes import load_dataset, load_manifest
from app.commands.common import ensure_out_dir, write_config_echo

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.rsc"
STEP_LOG_NAME = "step_log.jsonl"
DIAGNOSTICS_NAME = "cluster_diagnostics.jsonl"


@dataclass
class PretrainResult:
    checkpoint: Path
    steps: int
    final_loss: Optional[float]


def build_config(args, extent: Optional[int] = None) -> ExperimentConfig:
    """Flags -> ExperimentConfig; --config replaces the flag-built config entirely."""
    if getattr(args, "config", None):
        return ExperimentConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8"))
    if args.preset == "paper":
        encoder = EncoderConfig.paper()
    else:
        encoder = EncoderConfig.desk(**({"input_extent": extent} if extent else {}))
    train = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, iterations=args.iters,
                        frozen_bn_mode=args.frozen_bn_mode)
    imbalance = ImbalanceConfig(mode=args.mode, k=args.k, q=args.q, m=args.m,
                                kmeans_period=args.kmeans_period)
    return ExperimentConfig(seed=args.seed, encoder=encoder, train=train, imbalance=imbalance)


def run(config: ExperimentConfig, data_dir, out_dir: Path) -> PretrainResult:
    dataset = load_dataset(data_dir)
    volumes = dataset.stack()
    enc = config.encoder
    expected = (enc.in_channels,) + (enc.input_extent,) * 3
    if volumes.shape[1:] != expected:
        raise ShapeError(f"dataset volumes {volumes.shape[1:]} do not match encoder input {expected}")

    step_log = out_dir / STEP_LOG_NAME
    diagnostics = out_dir / DIAGNOSTICS_NAME
    for stale in (step_log, diagnostics):
        if stale.exists():
            stale.unlink()

    state = build_encoder(enc, config.seed)
    step = SiamStep.start(state, config.train)
    per_epoch = steps_per_epoch(len(volumes), config.train.batch_size)
    total = config.train.iterations if config.train.iterations is not None else config.train.epochs * per_epoch
    logger.info("[pretrain] mode=%s iterations=%d per_epoch=%d pool=%d",
                config.imbalance.mode, total, per_epoch, config.imbalance.pool_size)

    plan = plan_batches(volumes, state, config.imbalance, config.train.batch_size, config.seed, total,
                        diagnostics if config.imbalance.mode != "none" else None)

    def pairs():
        for planned in plan:
            x1, x2 = make_view_batch(volumes[planned.indices], config.augment, config.seed,
                                     planned.iteration, planned.indices)
            yield PairBatch(x1, x2, planned.weights), planned.mode

    summary = run_pretraining(step, pairs(), step_log, steps_per_epoch=per_epoch)
    ckpt = save_checkpoint(out_dir / CHECKPOINT_NAME, state, step.optimizer)
    logger.info("[pretrain] done steps=%d final_loss=%s in %.1fs", summary.steps, summary.final_loss, summary.seconds)
    return PretrainResult(ckpt, summary.steps, summary.final_loss)


def dataset_extent(data_dir) -> Optional[int]:
    manifest = load_manifest(data_dir)
    return manifest.synth.extent if manifest.synth else None


def handle(args, recorder) -> int:
    config = build_config(args, dataset_extent(args.data))
    out = ensure_out_dir(args.out)
    recorder.start_run("pretrain", config.seed, config.model_dump(mode="json"), str(out))
    write_config_echo(out, "pretrain", config.model_dump(mode="json"), config.seed)
    result = run(config, args.data, out)
    print(f"checkpoint: {result.checkpoint}  steps: {result.steps}  final loss: {result.final_loss}")
    recorder.finish_run()
    return 0


def add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["none", "re", "se"], default="none")
    p.add_argument("--k", type=int, default=3, help="k-means clusters")
    p.add_argument("--q", type=int, default=10, help="candidate pool N = k * q")
    p.add_argument("--m", type=int, default=6, help="SE batch size (even, < N/k)")
    p.add_argument("--epochs", type=int, default=2, help="total epochs, warm-up included")
    p.add_argument("--iters", type=int, default=None, help="total iterations (overrides --epochs)")
    p.add_argument("--batch", type=int, default=6, help="plain / RE batch size")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--kmeans-period", type=int, default=1, help="re-cluster every n iterations")
    p.add_argument("--frozen-bn-mode", choices=["train", "eval"], default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="experiment config JSON (overrides flags)")
    p.add_argument("--data", required=True, help="dataset directory (manifest.json)")


def register(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("pretrain", help="self-supervised pretraining with optional RE/SE")
    add_training_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=handle)
    return p
