# xct/cli.py

"""
Command-line entry point.

Every command that writes a directory leaves exactly one ``manifest.json``
in it, holding the config and its hash, the datasets used, the command line
and timestamps. Exit codes: 0 ok, 2 usage or config, 3 data or format,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from autodiff import ContractViolation, set_precision
from xct.checkpoint import read_checkpoint, write_checkpoint
from xct.config import TrainConfig, config_hash
from xct.datasets import load_dataset, write_paired, write_unpaired
from xct.errors import DataError, UsageError, XctError
from xct.evaluation import (
    eval_generated_classification,
    eval_reconstruction,
    export_projection_comparison,
    run_ablation,
    train_classifier,
)
from xct.phantom import StyleShiftParams, sample_paired_dataset, sample_unpaired_set
from xct.projection import drr
from xct.runlog import LOG_NAME, RunManifest, prepare_run_dir, summarize_log
from xct.training import finetune, load_generator, pretrain, train_baseline
from xct.volume import PairedDataset, UnpairedXraySet, export_slices, load_volume, save_xray

logger = logging.getLogger(__name__)

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# ----------------------------
# Argument helpers
# ----------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(Fraction(part.strip())) for part in text.split(",") if part.strip()]
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _load_config(path: str | None) -> TrainConfig:
    cfg = TrainConfig() if path is None else TrainConfig.load(path)
    set_precision(cfg.precision)
    return cfg


def _paired(path: str) -> PairedDataset:
    dataset = load_dataset(path)
    if not isinstance(dataset, PairedDataset):
        raise DataError(f"{path} holds an unpaired set; a paired dataset is needed here")
    return dataset


def _unpaired(path: str) -> UnpairedXraySet:
    dataset = load_dataset(path)
    if not isinstance(dataset, UnpairedXraySet):
        raise DataError(f"{path} holds a paired dataset; an unpaired set is needed here")
    return dataset


def _dataset_entry(path: str) -> dict:
    return {"path": str(path), **RunManifest.read(path).datasets}


def _jobs(requested: int) -> int:
    value = os.environ.get("XCT_THREADS")
    if value is None:
        return requested
    try:
        jobs = int(value)
    except ValueError as e:
        raise UsageError(f"XCT_THREADS must be an integer, got {value!r}") from e
    if jobs < 1:
        raise UsageError(f"XCT_THREADS must be >= 1, got {jobs}")
    return jobs


def _manifest(command: str, cfg: TrainConfig | None = None, **datasets) -> RunManifest:
    return RunManifest(
        command=command,
        config=None if cfg is None else cfg.to_dict(),
        config_hash=None if cfg is None else config_hash(cfg),
        datasets=datasets,
    )


def _outputs(run_dir: Path) -> list[Path]:
    return sorted(p.relative_to(run_dir) for p in run_dir.rglob("*") if p.is_file())


def _log_summary(run_dir: Path):
    path = run_dir / LOG_NAME
    if path.exists():
        logger.info("training summary:\n%s", summarize_log(path))


# ----------------------------
# Commands
# ----------------------------


def cmd_phantom(args) -> int:
    shift = StyleShiftParams(args.gamma, args.contrast, args.noise, args.vignette)

    if args.kind == "paired":
        dataset = sample_paired_dataset(args.n, args.side, args.class_mix, args.seed)
        out = prepare_run_dir(args.out, args.force)
        description = write_paired(dataset, out, args.class_mix)
    else:
        unpaired = sample_unpaired_set(args.n, args.side, args.class_mix, shift, args.seed)
        out = prepare_run_dir(args.out, args.force)
        description = write_unpaired(unpaired, out, args.class_mix, shift)

    manifest = _manifest("phantom", dataset=description.to_dict())
    manifest.finish(_outputs(out)).write(out)
    logger.info("wrote %d %s samples to %s", args.n, args.kind, out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    paired = _paired(args.data)
    start = read_checkpoint(args.resume) if args.resume else None
    if start is not None and args.baseline:
        raise UsageError("--resume and --baseline cannot be combined")
    out = prepare_run_dir(args.out, args.force)

    if args.baseline:
        ckpt = train_baseline(cfg, paired, out)
    else:
        ckpt = pretrain(cfg, paired, out, start=start)
    write_checkpoint(ckpt, out / "final.ckpt")
    _log_summary(out)

    manifest = _manifest("train", cfg, paired=_dataset_entry(args.data))
    manifest.finish(_outputs(out)).write(out)
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    paired = _paired(args.data)
    unpaired = _unpaired(args.unpaired)
    start = read_checkpoint(args.start)
    out = prepare_run_dir(args.out, args.force)

    ckpt = finetune(cfg, paired, unpaired, start, out)
    write_checkpoint(ckpt, out / "final.ckpt")
    _log_summary(out)

    manifest = _manifest(
        "finetune", cfg, paired=_dataset_entry(args.data), unpaired=_dataset_entry(args.unpaired)
    )
    manifest.finish(_outputs(out)).write(out)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    test = _unpaired(args.test)
    ckpt = read_checkpoint(args.checkpoint)
    out = prepare_run_dir(args.out, args.force)

    generator = load_generator(ckpt)
    metrics = {"reconstruction": vars(eval_reconstruction(generator, test))}
    datasets = {"test": _dataset_entry(args.test)}

    if args.train_data:
        clf = train_classifier(_paired(args.train_data), cfg.classifier, generator)
        _, labels = test.unseal()
        report = eval_generated_classification(clf, generator, test.xrays, labels, name=Path(args.checkpoint).stem, seed=cfg.seed)
        metrics["classification"] = report.to_dict()
        datasets["classifier_train"] = _dataset_entry(args.train_data)
        (out / "metrics.txt").write_text(str(report.table()) + "\n", encoding="utf-8")

    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("reconstruction: %s", metrics["reconstruction"])

    manifest = _manifest("eval", cfg, **datasets)
    manifest.finish(_outputs(out)).write(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    paired = _paired(args.data)
    unpaired = _unpaired(args.unpaired)
    test = _unpaired(args.test)
    out = prepare_run_dir(args.out, args.force)

    result = run_ablation(cfg, args.lambda4, args.seeds, paired, unpaired, test, out, jobs=_jobs(args.jobs))
    sys.stderr.write(result.to_text())

    manifest = _manifest(
        "ablate",
        cfg,
        paired=_dataset_entry(args.data),
        unpaired=_dataset_entry(args.unpaired),
        test=_dataset_entry(args.test),
    )
    manifest.finish(_outputs(out)).write(out)
    return 0


def cmd_drr(args) -> int:
    save_xray(drr(load_volume(args.input)), args.out)
    return 0


def cmd_export(args) -> int:
    volume = load_volume(args.input)
    out = prepare_run_dir(args.out, args.force)
    export_slices(volume, args.plane, out)

    manifest = _manifest("export", volume=str(args.input))
    manifest.finish(_outputs(out)).write(out)
    return 0


def cmd_compare(args) -> int:
    dataset = load_dataset(args.xrays)
    xrays = [s.xray for s in dataset] if isinstance(dataset, PairedDataset) else list(dataset.xrays)
    xrays = xrays[: args.limit]

    reconstructors = {}
    for spec in args.checkpoint:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        reconstructors[name] = read_checkpoint(path)

    out = prepare_run_dir(args.out, args.force)
    export_projection_comparison(xrays, reconstructors, out)

    manifest = _manifest("compare", xrays=_dataset_entry(args.xrays))
    manifest.finish(_outputs(out)).write(out)
    return 0


# ----------------------------
# Parser
# ----------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xct", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--print-default-config", action="store_true", help="print the full default config and exit")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    commands = parser.add_subparsers(dest="command")

    def command(name: str, handler, help: str, out: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help)
        sub.set_defaults(handler=handler)
        if out:
            sub.add_argument("--out", required=True, help="output directory")
            sub.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        return sub

    p = command("phantom", cmd_phantom, "sample a phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--class-mix", type=_floats, default=[0.4, 0.3, 0.3], help="healthy,sick,tb fractions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=["paired", "unpaired"], default="paired")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--contrast", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--vignette", type=float, default=0.0)

    p = command("train", cmd_train, "paired pretraining")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="pretraining checkpoint to continue from")
    p.add_argument("--baseline", action="store_true", help="train the paired-only model for baseline_epochs")

    p = command("finetune", cmd_finetune, "alternating shape-induction fine-tuning")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--unpaired", required=True)
    p.add_argument("--start", required=True, help="checkpoint to start from")

    p = command("eval", cmd_eval, "reconstruction and classification metrics")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="unpaired set with hidden volumes")
    p.add_argument("--train-data", help="paired dataset to train the classifier on")

    p = command("ablate", cmd_ablate, "λ4 ablation over several seeds")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--unpaired", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--lambda4", type=_floats, help="comma-separated values (default: config grid)")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)

    p = command("drr", cmd_drr, "coronal projection of a volume", out=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output .xry file")

    p = command("export", cmd_export, "volume slices as PGM images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--plane", choices=["axial", "coronal", "sagittal"], default="axial")

    p = command("compare", cmd_compare, "x-ray vs projected reconstruction montages")
    p.add_argument("--xrays", required=True, help="dataset directory")
    p.add_argument("--checkpoint", action="append", required=True, help="NAME=PATH, repeatable")
    p.add_argument("--limit", type=int, default=8)

    return parser


def _configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=_LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.print_default_config:
        sys.stdout.write(TrainConfig().to_json())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return UsageError.exit_code

    _configure_logging(args)
    try:
        return args.handler(args)
    except XctError as e:
        logger.error("%s", e)
        return e.exit_code
    except ContractViolation as e:
        logger.error("%s", e)
        return 2
    except OSError as e:
        logger.error("%s", e)
        return 3
