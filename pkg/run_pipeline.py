#!/usr/bin/env python3
"""
Domain-Aware Fine-Tuning Pipeline Runner
Orchestrates the lab: pretrain -> convert / finetune / sweep -> diagnose -> report

Exit codes: 0 success, 1 usage or config error, 2 numerical failure, 3 IO failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

from daftlab.config import load_config
from daftlab.diagnostics import DEFAULT_HISTOGRAM_BINS, POST_CONVERSION, PRE_CONVERSION
from daftlab.errors import ArtifactError, DaftError
from scripts import convert, diagnose, evaluate, finetune, pretrain, report
from scripts.manifest import RunManifest, seed_dir


class PipelineArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1 like every other configuration error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def run_stage(description, stage):
    """Run a stage and map its outcome to an exit code."""
    print(f"\n🔄 {description}")
    try:
        result = stage()
    except DaftError as err:
        print(f"❌ {description} failed")
        print("Error:", err)
        return err.exit_code
    code = result if isinstance(result, int) else 0
    if code == 0:
        print(f"✅ {description} completed successfully")
        if isinstance(result, dict):
            for name, value in sorted(result.items()):
                print(f"  {name}: {value}")
    else:
        print(f"❌ {description} finished with failed cells (exit code {code})")
    return code


def build_parser():
    parser = PipelineArgumentParser(description="Domain-aware fine-tuning pipeline runner")
    parser.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
    parser.add_argument("--seed", type=int, action="append", help="root seed(s); overrides the config seed list")
    parser.add_argument("--precision", choices=["float64", "float32"], help="override the config precision")
    parser.add_argument("--output-dir", help="override the config output directory")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("pretrain", help="generate tasks and pretrain on the source domain")

    p = commands.add_parser("convert", help="convert a checkpoint's BN layers to a dataset's domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="CSV with feature columns and a label column")
    p.add_argument("--output", required=True)
    p.add_argument("--stats", help="target statistics cache (JSON); read when present, written otherwise")
    p.add_argument("--batch-size", type=int, default=64)

    for name, text in (("finetune", "train and evaluate one cell"), ("sweep", "two-step learning-rate sweep")):
        p = commands.add_parser(name, help=text)
        p.add_argument("--cell", required=True, help="strategy or ablation cell name, e.g. DAFT or FT+BN")
        p.add_argument("--checkpoint", help="pretrained checkpoint; defaults to the seed's pretraining output")

    commands.add_parser("run", help="full pipeline over all configured cells and seeds")

    p = commands.add_parser("diagnose", help="feature similarity and relative change between two checkpoints")
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True, help="report directory")
    p.add_argument("--bins", type=int, default=DEFAULT_HISTOGRAM_BINS)
    p.add_argument("--baseline", choices=[PRE_CONVERSION, POST_CONVERSION], default=PRE_CONVERSION)
    p.add_argument("--corruption", action="store_true")
    p.add_argument("--gradcheck", action="store_true", help="finite-difference check of the post checkpoint")

    commands.add_parser("report", help="rebuild comparison reports from completed cells")
    return parser


def resolve_config(args):
    config = load_config(args.config)
    overrides = {}
    if args.seed:
        overrides["seeds"] = list(args.seed)
    if args.precision:
        overrides["precision"] = args.precision
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    return replace(config, **overrides).validate() if overrides else config


def _pretrained_path(config, seed, checkpoint):
    path = checkpoint or os.path.join(seed_dir(config.output_dir, seed), pretrain.CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise ArtifactError(f"pretrained checkpoint {path} not found; run the pretrain subcommand first")
    return path


def dispatch(args, config):
    if args.command == "pretrain":
        return run_stage("Source Pretraining", lambda: {f"seed {s}": p for s, p in pretrain.main(config).items()})
    if args.command == "convert":
        return run_stage("BN Conversion", lambda: dict(zip(("checkpoint", "report"), convert.main(
            args.checkpoint, args.dataset, args.output, batch_size=args.batch_size, seed=config.seeds[0],
            stats_path=args.stats))))
    if args.command == "finetune":
        config.cell(args.cell)
        return run_stage(f"Fine-Tuning ({args.cell})", lambda: _finetune(config, args))
    if args.command == "sweep":
        config.cell(args.cell)
        return run_stage(f"Learning-Rate Sweep ({args.cell})", lambda: {
            f"seed {seed}": finetune.sweep_main(config, args.cell, seed,
                                                _pretrained_path(config, seed, args.checkpoint))["sweep_csv"]
            for seed in config.seeds})
    if args.command == "run":
        return run_stage("Full Transfer Experiment", lambda: evaluate.main(config))
    if args.command == "diagnose":
        return run_stage("Diagnostics", lambda: diagnose.main(
            args.pre, args.post, args.dataset, args.output, bins=args.bins, baseline=args.baseline,
            corruption=args.corruption, run_gradcheck=args.gradcheck, seed=config.seeds[0]))
    return run_stage("Report", lambda: report.main(config))


def _finetune(config, args):
    manifest = RunManifest.open(config.output_dir, config.config_hash())
    code = 0
    for seed in config.seeds:
        outcome = evaluate.run_cell(config, args.cell, seed, _pretrained_path(config, seed, args.checkpoint))
        if outcome["ok"]:
            manifest.record(outcome["key"], outcome["paths"], outcome["fingerprint"])
        else:
            manifest.record_failure(outcome["key"], outcome["error"], outcome["exit_code"])
            code = max(code, outcome["exit_code"])
    manifest.save(config.output_dir)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except DaftError as err:
        print(f"❌ Invalid configuration: {err}")
        return err.exit_code

    print(f"""
🚀 Starting Domain-Aware Fine-Tuning Pipeline
=============================================
Command: {args.command}
Config hash: {config.config_hash()[:12]}
Seeds: {config.seeds}
Precision: {config.precision}
Output: {config.output_dir}
""")
    try:
        code = dispatch(args, config)
    except DaftError as err:
        print(f"\n❌ Pipeline failed: {err}")
        return err.exit_code
    except KeyboardInterrupt:
        print("\n🛑 Pipeline interrupted by user")
        return 1
    if code == 0:
        print("\n🎉 Pipeline step complete!")
    return code


if __name__ == "__main__":
    sys.exit(main())
