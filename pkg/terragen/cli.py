"""
Command-line entry point
Usage: python -m terragen.cli <gen-data|validate|augment|train|sample|eval> [options]
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from terragen.config import (
    apply_overrides, build_config, config_hash, configure_logging, load_json_config, resolve_seed,
)
from terragen.diffusion import SampleConfig, TrainConfig, TrainingExample, image_to_tensor, load_model, sample_batched, train
from terragen.errors import ConfigError, DatasetError, TerraGenError, format_error, log_error
from terragen.evaluation import (
    EvalConfig, layout_consistency_report, save_report_csv, save_report_json, save_report_pdf,
)
from terragen.layout import GeoTransform, Layout, ValidationConfig, load_layout, random_transform, save_layout, transform_layout, validate
from terragen.synthdata import DataConfig, load_manifest, read_dataset, sample_rng, write_image, write_dataset

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "validate", "augment", "train", "sample", "eval")
MAX_TRANSFORM_DRAWS = 20

# Ablation grid: every preset pins all three axes, one axis off the "both" row
ABLATION_AXES = ("train.layout_control", "train.model.unet.injection_mode", "train.mask_weighted_loss")


def _ablation(layout_control: str, injection_mode: str, mask_weighted_loss: bool) -> Dict[str, object]:
    return {
        "train.layout_control": layout_control,
        "sample.layout_control": layout_control,
        "train.model.unet.injection_mode": injection_mode,
        "train.mask_weighted_loss": mask_weighted_loss,
    }


ABLATION_PRESETS: Dict[str, Dict[str, object]] = {
    "both": _ablation("both", "coarse_two", True),
    "box_only": _ablation("box", "coarse_two", True),
    "mask_only": _ablation("mask", "coarse_two", True),
    "all_levels": _ablation("both", "all_levels", True),
    "no_maloss": _ablation("both", "coarse_two", False),
}


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    multiple: int = Field(2, ge=1)
    split: str = "train"
    seed: int = 0


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str = ""
    seed: int = 0
    out: str = "runs"
    config_path: Optional[str] = None
    overrides: List[str] = Field(default_factory=list)
    data: DataConfig = Field(default_factory=DataConfig)
    validation: ValidationConfig = Field(default_factory=ValidationConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

# ============= ARGUMENTS =============

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (a previous run.json works too)")
    common.add_argument("--seed", type=int, help="master seed (falls back to TERRAGEN_SEED)")
    common.add_argument("--out", default=None, help="output directory, default 'runs'")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.stage1.steps=100")
    common.add_argument("--ablation", choices=sorted(ABLATION_PRESETS), help="apply an ablation preset")
    common.add_argument("--log-level", default=None)

    parser = argparse.ArgumentParser(prog="terragen", description="Desk-scale layout-to-image diffusion")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")

    validate_parser = commands.add_parser("validate", parents=[common], help="check layouts in a dataset")
    validate_parser.add_argument("--data", help="dataset root (default <out>/data)")
    validate_parser.add_argument("--split", default=None)

    augment_parser = commands.add_parser("augment", parents=[common], help="geometric layout augmentation")
    augment_parser.add_argument("--data", help="dataset root (default <out>/data)")
    augment_parser.add_argument("--multiple", type=int, default=None, help="output multiple N (N x M layouts)")
    augment_parser.add_argument("--split", default=None)

    train_parser = commands.add_parser("train", parents=[common], help="two-stage training")
    train_parser.add_argument("--data", help="dataset root (default <out>/data)")
    train_parser.add_argument("--resume", help="training checkpoint to resume from")

    sample_parser = commands.add_parser("sample", parents=[common], help="generate images for layouts")
    sample_parser.add_argument("--checkpoint", help="model checkpoint (default <out>/train/model.ckpt)")
    sample_parser.add_argument("--layout", help="single layout JSON file")
    sample_parser.add_argument("--data", help="dataset root whose split is sampled")
    sample_parser.add_argument("--split", default="test")
    sample_parser.add_argument("--limit", type=int, default=None)

    eval_parser = commands.add_parser("eval", parents=[common], help="layout-consistency report")
    eval_parser.add_argument("--checkpoint", help="model checkpoint (default <out>/train/model.ckpt)")
    eval_parser.add_argument("--data", help="dataset root (default <out>/data)")
    eval_parser.add_argument("--csv", action="store_true", help="also write report.csv")
    eval_parser.add_argument("--pdf", action="store_true", help="also write report.pdf")
    return parser


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """File keys, then ablation preset, then --set overrides, then flags"""
    data = load_json_config(args.config)
    overrides = [f"{key}={json.dumps(value)}" for key, value in ABLATION_PRESETS.get(args.ablation or "", {}).items()]
    overrides += list(args.set)
    data = apply_overrides(data, overrides)

    seed = resolve_seed(args.seed, data.get("seed"))
    for section in ("data", "augment", "train", "sample"):
        node = data.setdefault(section, {})
        if args.seed is not None or "seed" not in node:
            node["seed"] = seed

    if getattr(args, "multiple", None) is not None:
        data["augment"]["multiple"] = args.multiple
    if getattr(args, "split", None) and args.command == "augment":
        data["augment"]["split"] = args.split

    data["command"] = args.command
    data["seed"] = seed
    data["out"] = args.out or data.get("out", "runs")
    data["config_path"] = args.config
    data["overrides"] = overrides
    return build_config(RunConfig, data)


def write_run_record(run: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    path.write_text(run.model_dump_json(indent=2), encoding="utf-8")
    return path


def _path_or(value: Optional[str], default: Path) -> Path:
    return Path(value) if value else default

# ============= COMMANDS =============

def cmd_gen_data(run: RunConfig, args: argparse.Namespace, out: Path) -> int:
    manifest = write_dataset(run.data, out / "data")
    print(f"[DATA] {len(manifest.samples)} samples written to {out / 'data'} (hash {manifest.content_hash[:12]})")
    return 0


def cmd_validate(run: RunConfig, args: argparse.Namespace, out: Path) -> int:
    root = _path_or(args.data, out / "data")
    samples = read_dataset(root, split=args.split)
    rows = []
    for sample in samples:
        for issue in validate(sample.layout, run.validation):
            rows.append((sample.id, issue.kind.value, ",".join(map(str, issue.entities)), issue.message))

    print(f"[VALIDATE] {len(samples)} layouts checked, {len(rows)} issues")
    if rows:
        print(f"{'sample':<16} {'issue':<18} {'entities':<10} message")
        for sample_id, kind, entities, message in rows:
            print(f"{sample_id:<16} {kind:<18} {entities:<10} {message}")
    return 1 if rows else 0


def augment_layout(layout: Layout, multiple: int, rng: np.random.Generator,
                   config: Optional[ValidationConfig] = None) -> List[tuple]:
    """The original plus multiple-1 seeded transforms as (transform name, layout) pairs"""
    results = [("identity", layout)]
    source_issues = len(validate(layout, config))
    for _ in range(multiple - 1):
        chosen = None
        for _ in range(MAX_TRANSFORM_DRAWS):
            transform = random_transform(rng)
            candidate = transform_layout(layout, transform)
            if layout.entities and not candidate.entities:
                continue
            if len(validate(candidate, config)) > source_issues:
                continue
            chosen = (str(transform), candidate)
            break
        if chosen is None:
            transform = GeoTransform.parse("hflip")
            chosen = (str(transform), transform_layout(layout, transform))
        results.append(chosen)
    return results


class AugmentRecord(BaseModel):
    source: str
    transform: str
    layout: str


def cmd_augment(run: RunConfig, args: argparse.Namespace, out: Path) -> int:
    root = _path_or(args.data, out / "data")
    manifest = load_manifest(root)
    records = manifest.records(run.augment.split)
    target = out / "augmented"
    written = []
    for index, record in enumerate(records):
        layout = load_layout(root / record.layout)
        rng = sample_rng(run.augment.seed, index)
        for k, (name, augmented) in enumerate(augment_layout(layout, run.augment.multiple, rng, run.validation)):
            path = save_layout(augmented, target / "layouts" / f"{record.id}_x{k}.json")
            written.append(AugmentRecord(source=record.id, transform=name, layout=str(path.relative_to(target))))

    (target / "augment_manifest.json").write_text(
        json.dumps([record.model_dump() for record in written], indent=2), encoding="utf-8",
    )
    print(f"[AUGMENT] {len(records)} layouts x{run.augment.multiple} -> {len(written)} layouts in {target}")
    return 0


def cmd_train(run: RunConfig, args: argparse.Namespace, out: Path) -> int:
    root = _path_or(args.data, out / "data")
    samples = read_dataset(root, split="train")
    if not samples:
        raise DatasetError(f"No training samples under {root}")
    examples = [TrainingExample(image=image_to_tensor(sample.image), layout=sample.layout) for sample in samples]
    checkpoint = train(run.train, examples, out / "train", resume=args.resume)
    print(f"[TRAIN] Final checkpoint: {checkpoint}")
    return 0


def cmd_sample(run: RunConfig, args: argparse.Namespace, out: Path) -> int:
    model, schedule, _ = load_model(_path_or(args.checkpoint, out / "train" / "model.ckpt"))
    if args.layout:
        names, layouts = [Path(args.layout).stem], [load_layout(args.layout)]
    else:
        samples = read_dataset(_path_or(args.data, out / "data"), split=args.split, limit=args.limit)
        names, layouts = [sample.id for sample in samples], [sample.layout for sample in samples]
    if not layouts:
        raise DatasetError("Nothing to sample: no layouts found")

    images = sample_batched(model, schedule, layouts, run.sample)
    target = out / "samples"
    target.mkdir(parents=True, exist_ok=True)
    for name, image in zip(names, images):
        write_image(image, target / f"{name}.png")
    print(f"[SAMPLE] {len(images)} images written to {target}")
    return 0


def cmd_eval(run: RunConfig, args: argparse.Namespace, out: Path) -> int:
    report = layout_consistency_report(
        _path_or(args.checkpoint, out / "train" / "model.ckpt"),
        _path_or(args.data, out / "data"),
        run.sample, run.eval, run_hash=config_hash(run),
    )
    target = out / "eval"
    save_report_json(report, target / "report.json")
    if args.csv:
        save_report_csv(report, target / "report.csv")
    if args.pdf:
        save_report_pdf(report, target / "report.pdf")
    print(json.dumps(report.model_dump(), indent=2))
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "validate": cmd_validate,
    "augment": cmd_augment,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.log_level)
    try:
        run = resolve_run_config(args)
        out = Path(run.out)
        write_run_record(run, out)
        logger.info(f"[CONFIG] {args.command} seed={run.seed} out={out} hash={config_hash(run)[:12]}")
        return HANDLERS[args.command](run, args, out)
    except TerraGenError as exc:
        log_error(exc, args.command)
        print(json.dumps(format_error(exc)), file=sys.stderr)
        return 1
    except Exception as exc:
        log_error(exc, args.command)
        print(json.dumps(format_error(exc)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
