# app/commands/synth.py
import argparse
import logging

from app.errors import ConfigError
from app.schemas import SynthSpec
from app.services.volumes import synth_dataset
from app.commands.common import ensure_out_dir, write_config_echo

logger = logging.getLogger(__name__)


def parse_ratio(text: str):
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        raise ConfigError(f"invalid ratio {text!r}, expected e.g. 250:76")
    if len(parts) < 2 or any(p <= 0 for p in parts):
        raise ConfigError(f"invalid ratio {text!r}: need >= 2 positive parts")
    return parts


def build_spec(args) -> SynthSpec:
    ratio = parse_ratio(args.ratio)
    classes = args.classes.split(",") if args.classes else [f"class_{i}" for i in range(len(ratio))]
    if len(classes) != len(ratio):
        raise ConfigError(f"{len(classes)} class names for a {len(ratio)}-part ratio")
    return SynthSpec(classes=classes, ratio=ratio, count=args.count, extent=args.extent, seed=args.seed)


def class_table(counts) -> str:
    total = sum(counts.values())
    lines = [f"{'class':<16}{'count':>8}{'share':>9}"]
    for name, n in counts.items():
        lines.append(f"{name:<16}{n:>8}{n / total:>9.3f}")
    lines.append(f"{'total':<16}{total:>8}")
    return "\n".join(lines)


def handle(args, recorder) -> int:
    spec = build_spec(args)
    out = ensure_out_dir(args.out)
    recorder.start_run("synth", spec.seed, spec.model_dump(), str(out))
    write_config_echo(out, "synth", spec.model_dump(), spec.seed)
    manifest = synth_dataset(spec, out)
    print(class_table(manifest.class_counts))
    recorder.finish_run()
    return 0


def register(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("synth", help="generate a synthetic imbalanced phantom dataset")
    p.add_argument("--classes", default=None, help="comma-separated class names (default class_0,class_1,...)")
    p.add_argument("--ratio", default="250:76", help="class ratio, e.g. 250:76 or 2:1:6")
    p.add_argument("--count", type=int, default=None, help="total samples (default: sum of the ratio)")
    p.add_argument("--extent", type=int, default=16, help="cube side in voxels (>= 8)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=handle)
    return p
