from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List

from data_models import ABLATION_FLAGS, ConfigError, RunConfig
from layers import TrainingDivergedError
from memory import online_ingest
from model import online_experiment
from persistence import ArtifactError, load_checkpoint, load_memory, load_trajectories, save_memory, save_modules
from pipeline import (StageError, build_memory, fit_controller, fit_refinement, gen_data, load_controller,
                      load_encdec, load_refiner, make_samples, metadata, pipeline_run, pretrain, read_data,
                      run_ablations, run_evaluation, stage)
from report_generator import ReportGenerator
from utils import logger, set_verbose
from validation import load_config, validate_k_list, validate_positive_int

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mantra", description="Memory-augmented trajectory prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset and maps")
    _add_common(p)
    p.add_argument("--out", type=Path, default=Path("data"))

    p = sub.add_parser("pretrain", help="train encoders and decoder as an autoencoder")
    _add_common(p)
    p.add_argument("--data", type=Path, default=Path("data"))
    p.add_argument("--out", type=Path, default=Path("runs/encdec.ckpt"))

    p = sub.add_parser("train-controller", help="train the memory write controller")
    _add_common(p)
    p.add_argument("--data", type=Path, default=Path("data"))
    p.add_argument("--ckpt", type=Path, default=Path("runs/encdec.ckpt"))
    p.add_argument("--out", type=Path, default=Path("runs/controller.ckpt"))

    p = sub.add_parser("fill-memory", help="fill memory from the training set")
    _add_common(p)
    p.add_argument("--data", type=Path, default=Path("data"))
    p.add_argument("--ckpt", type=Path, default=Path("runs/encdec.ckpt"))
    p.add_argument("--controller", type=Path, default=Path("runs/controller.ckpt"))
    p.add_argument("--out", type=Path, default=Path("runs/memory.mem"))

    p = sub.add_parser("train-refine", help="train refinement and finetune the decoder")
    _add_common(p)
    p.add_argument("--data", type=Path, default=Path("data"))
    p.add_argument("--memory", type=Path, default=Path("runs/memory.mem"))
    p.add_argument("--ckpt", type=Path, default=Path("runs/encdec.ckpt"))
    p.add_argument("--out", type=Path, default=Path("runs/refine.ckpt"))

    p = sub.add_parser("evaluate", help="best-of-K evaluation against the baselines")
    _add_common(p)
    p.add_argument("--data", type=Path, default=Path("data"))
    p.add_argument("--ckpt", type=Path, default=Path("runs/refine.ckpt"))
    p.add_argument("--memory", type=Path, default=Path("runs/memory.mem"))
    p.add_argument("--k", type=str, help="comma-separated K list, e.g. 1,5,10,20")
    p.add_argument("--out", type=Path, default=Path("runs/report.csv"))

    p = sub.add_parser("online", help="incremental online-learning experiment")
    _add_common(p)
    p.add_argument("--data", type=Path, default=Path("data"))
    p.add_argument("--ckpt", type=Path, default=Path("runs/encdec.ckpt"))
    p.add_argument("--controller", type=Path, default=Path("runs/controller.ckpt"))
    p.add_argument("--memory", type=Path, default=Path("runs/memory.mem"))
    p.add_argument("--batch", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--out", type=Path, default=Path("runs/curve.csv"))
    p.add_argument("--svg", action="store_true", help="also write SVG line plots")

    p = sub.add_parser("ingest", help="offer a stream of trajectories to the memory")
    _add_common(p)
    p.add_argument("--stream", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, default=Path("runs/encdec.ckpt"))
    p.add_argument("--controller", type=Path, default=Path("runs/controller.ckpt"))
    p.add_argument("--memory", type=Path, default=Path("runs/memory.mem"))
    p.add_argument("--out", type=Path, help="snapshot to write (default: overwrite --memory)")

    p = sub.add_parser("inspect-memory", help="export embeddings and decoded memory futures")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, default=Path("runs/encdec.ckpt"))
    p.add_argument("--memory", type=Path, default=Path("runs/memory.mem"))
    p.add_argument("--out", type=Path, default=Path("runs/memory.csv"))
    p.add_argument("--svg", action="store_true")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _add_common(p)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--ablations", action="store_true", help="run the ablation matrix")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, object] = {"seed": args.seed}
    for flag in ABLATION_FLAGS:
        overrides[flag] = getattr(args, flag, None)
    if getattr(args, "k", None):
        ok, ks = validate_k_list(args.k)
        if not ok:
            raise ConfigError(f"--k must be a comma-separated list of positive integers, got {args.k!r}")
        overrides["k_list"] = ks
    for key, attr in (("online_batch", "batch"), ("online_runs", "runs")):
        value = getattr(args, attr, None)
        if value is not None:
            ok, value = validate_positive_int(value)
            if not ok:
                raise ConfigError(f"--{attr} must be a positive integer")
        overrides[key] = value
    return load_config(args.config, overrides)


def print_report_summary(report) -> None:
    print("\n=== Evaluation Summary ===")
    print(f"Memory size: {report.memory_size}")
    summary = report.summary
    horizon = summary["horizon_s"].max()
    for method in summary["method"].unique():
        rows = summary[(summary["method"] == method) & (summary["horizon_s"] == horizon)]
        for _, row in rows.iterrows():
            print(f"  - {method} K={int(row['k'])}: ADE@{horizon:g}s={row['ade']:.3f} m  FDE@{horizon:g}s={row['fde']:.3f} m")
    for key, value in report.extras.items():
        print(f"  {key}: {value:.3f}")


def run_command(args: argparse.Namespace, config: RunConfig) -> None:
    cmd = args.command
    h = config.config_hash()

    if cmd == "gen-data":
        with stage("gen-data"):
            split = gen_data(config, args.out)
        print("\n=== Dataset Summary ===")
        print(f"Train tracks: {len(split.train)}  Test tracks: {len(split.test)}  Maps: {len(split.maps)}")
        print(f"Config hash: {h}\nSaved to: {args.out}")

    elif cmd == "pretrain":
        with stage("pretrain"):
            split = read_data(config, args.data)
            model = pretrain(config, make_samples(config, split.train, "train"))
            save_modules(args.out, {"encdec": model}, metadata(config, "encdec"))
        print(f"\n=== Pretrain Summary ===\nCheckpoint saved to: {args.out}")

    elif cmd == "train-controller":
        with stage("train-controller"):
            split = read_data(config, args.data)
            model = load_encdec(config, args.ckpt)
            controller = fit_controller(config, make_samples(config, split.train, "train"), model)
            save_modules(args.out, {"controller": controller}, metadata(config, "controller"))
        print("\n=== Controller Summary ===")
        print(f"P(w|e=0)={controller.probability(0.0):.4f}  P(w|e=1)={controller.probability(1.0):.4f}")
        print(f"Checkpoint saved to: {args.out}")

    elif cmd == "fill-memory":
        with stage("fill-memory"):
            split = read_data(config, args.data)
            model = load_encdec(config, args.ckpt)
            controller = load_controller(config, args.controller)
            samples = make_samples(config, split.train, "train")
            memory = build_memory(config, samples, model, controller)
            save_memory(args.out, memory, metadata(config, "memory"))
        print("\n=== Memory Summary ===")
        print(f"Entries: {len(memory)} of {len(samples)} samples ({100.0 * len(memory) / len(samples):.1f}%)")

    elif cmd == "train-refine":
        with stage("train-refine"):
            split = read_data(config, args.data)
            model = load_encdec(config, args.ckpt)
            memory, _ = load_memory(args.memory, expected_hash=h)
            refiner = fit_refinement(config, make_samples(config, split.train, "train"), split.maps, model, memory)
            save_modules(args.out, {"encdec": model, "refine": refiner}, metadata(config, "refine"))
        print(f"\n=== Refinement Summary ===\nCheckpoint saved to: {args.out}")

    elif cmd == "evaluate":
        with stage("evaluate"):
            split = read_data(config, args.data)
            model = load_encdec(config, args.ckpt)
            ckpt = load_checkpoint(args.ckpt, expected_hash=h)
            refiner = load_refiner(config, ckpt) if ckpt.has_prefix("refine.") and not config.no_refine else None
            memory, _ = load_memory(args.memory, expected_hash=h)
            report = run_evaluation(config, model, memory, refiner, make_samples(config, split.test, "test"),
                                    make_samples(config, split.train, "train"), split.maps)
            ReportGenerator(config.seed, h).write_eval_report(report, args.out)
        print_report_summary(report)
        print(f"\nReport saved to: {args.out}")

    elif cmd == "online":
        with stage("online"):
            split = read_data(config, args.data)
            model = load_encdec(config, args.ckpt)
            controller = None if config.no_controller else load_controller(config, args.controller)
            memory, _ = load_memory(args.memory, expected_hash=h)
            curve = online_experiment(model, controller, memory, make_samples(config, split.test, "test"),
                                      batch=config.online_batch, runs=config.online_runs, k=config.online_k,
                                      th_horizon=config.th_horizon, seed=config.seed)
            ReportGenerator(config.seed, h).write_online_curve(curve, args.out, svg=args.svg)
        print("\n=== Online Summary ===")
        print(f"Runs: {config.online_runs}  Batch: {config.online_batch}  K: {config.online_k}")
        print(f"Error: {curve.initial_error:.3f} -> {curve.final_error:.3f} m")
        print(f"Write fraction: {100.0 * curve.write_fraction:.1f}%")

    elif cmd == "ingest":
        with stage("ingest"):
            model = load_encdec(config, args.ckpt)
            controller = None if config.no_controller else load_controller(config, args.controller)
            memory, _ = load_memory(args.memory, expected_hash=h)
            trajectories, _ = load_trajectories(args.stream, sample_period=config.sample_period)
            before = len(memory)
            written = 0
            for sample in make_samples(config, trajectories, "stream"):
                ok, memory = online_ingest(sample, memory, model, controller, config.th_horizon, write_epoch=1)
                written += int(ok)
            save_memory(args.out or args.memory, memory, metadata(config, "memory"))
        print("\n=== Ingest Summary ===")
        print(f"Memory: {before} -> {len(memory)} entries ({written} written)")

    elif cmd == "inspect-memory":
        with stage("inspect-memory"):
            model = load_encdec(config, args.ckpt)
            memory, _ = load_memory(args.memory, expected_hash=h)
            svg_path = args.out.with_suffix(".svg") if args.svg else None
            written = ReportGenerator(config.seed, h).write_memory_inspection(memory, model, args.out, svg_path)
        print("\n=== Memory Inspection ===")
        for kind, path in written.items():
            print(f"  - {kind}: {path}")

    elif cmd == "pipeline":
        if args.ablations:
            frame = run_ablations(config, args.out)
            print("\n=== Ablation Summary ===")
            print(frame.to_string(index=False))
        else:
            result = pipeline_run(config, args.out)
            print_report_summary(result.report)
            print("\nArtifacts:")
            for kind, path in result.artifacts.items():
                print(f"  - {kind}: {path}")


def main(argv: List[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    set_verbose(args.verbose)
    try:
        config = resolve_config(args)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    try:
        run_command(args, config)
    except StageError as e:
        cause = e.cause
        if isinstance(cause, ConfigError):
            logger.error(str(cause))
            return EXIT_CONFIG
        logger.error(str(e))
        return EXIT_STAGE
    except (ArtifactError, TrainingDivergedError) as e:
        logger.error(str(e))
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
