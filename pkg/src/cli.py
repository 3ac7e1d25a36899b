"""Command-line entry point: `python src/cli.py {gen-data, train, enhance, verify, bench} ...`.

Exit codes: 0 success, 1 usage or configuration error, 2 failed verification, 3 I/O error.
"""
import argparse
import dataclasses
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bench import run_benchmark, write_report
from config import RunConfig, ScheduleConfig
from constants import EXIT_IO, EXIT_SUCCESS, EXIT_USAGE, EXIT_VERIFICATION_FAILURE
from corrector import GlobalCorrector
from custom_logging import PROJECT_LOGGER, setup_logger
from denoiser import ConvDenoiser, Denoiser, GaussianOracleDenoiser
from diffusion import build_condition, sample
from errors import ConfigError, TensorFormatError
from imageops import crop, load_png, pad_reflect, save_png
from schedules import PyramidSchedule, bracket_notation
from serialization import load_checkpoint
from training import (CHECKPOINT_DIRECTORY, PairFolder, SyntheticPairs, Trainer, build_models, fit_patch, load_models,
                      validation_pairs, write_pair_folder)
from utils import ensure_directory, setup_experiment_directory
from verify import run_verification

class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise ConfigError(message)

common = argparse.ArgumentParser(add_help=False)
common.add_argument("--config", type=str, default=None, help="path to a JSON run configuration.")
common.add_argument("--seed", type=int, default=None, help="override every seed in the configuration.")
common.add_argument("--out", type=str, default=None, help="output directory (default: a fresh directory under experiment_logs/).")
common.add_argument("--quiet", action="store_true", help="disable progress bars.")

parser = _Parser(prog="pyrdiff", description="pyramid diffusion low-light enhancement")
subparsers = parser.add_subparsers(dest="command", required=True)

gen_data = subparsers.add_parser("gen-data", parents=[common], help="write synthetic low/normal-light PNG pairs.")
gen_data.add_argument("--count", type=int, default=None, help="number of pairs (default: data.num_pairs).")

train = subparsers.add_parser("train", parents=[common], help="train the denoiser and global corrector.")
train.add_argument("--data", type=str, default=None, help="folder of PNG pairs (default: the synthetic stream).")
train.add_argument("--resume", type=str, default=None, help="checkpoint directory to resume from.")
train.add_argument("--iterations", type=int, default=None, help="stop after this many total iterations.")
train.add_argument("--schedules", type=str, nargs=1, default=None, help="bracket downsampling schedule, e.g. [1,1,2,2].")

enhance = subparsers.add_parser("enhance", parents=[common], help="enhance one low-light PNG.")
enhance.add_argument("input", type=str)
enhance.add_argument("output", type=str)
enhance.add_argument("--checkpoint", type=str, required=True, help="training checkpoint directory.")
enhance.add_argument("--ddim", type=int, default=None, help="number of DDIM steps (default: full DDPM).")
enhance.add_argument("--eta", type=float, default=None, help="DDIM stochasticity.")
enhance.add_argument("--gamma", type=float, default=None, help="correction threshold.")
enhance.add_argument("--no-corrector", action="store_true", help="skip the global corrector.")
enhance.add_argument("--dump", type=str, default=None, help="directory for intermediate states (PYDT).")

verify = subparsers.add_parser("verify", parents=[common], help="run the oracle property checks.")
verify.add_argument("--chains", type=int, default=10_000, help="chains for the oracle sampling checks.")

bench = subparsers.add_parser("bench", parents=[common], help="time and score reverse passes across downsampling schedules.")
bench.add_argument("--schedules", type=str, nargs="+", default=None, help="bracket schedules, e.g. [1,1,1,1] [1,1,2,2].")
bench.add_argument("--checkpoint", type=str, default=None, help="checkpoint shared by every schedule.")
bench.add_argument("--checkpoint-for", type=str, nargs=2, action="append", default=[], metavar=("SCHEDULE", "DIR"),
                   help="checkpoint for one schedule; repeatable.")
bench.add_argument("--oracle", action="store_true", help="benchmark the analytic Gaussian denoiser instead of a checkpoint.")
bench.add_argument("--ddim", type=int, default=None, help="DDIM steps for the accelerated rows.")

def resolve_config(args: argparse.Namespace) -> RunConfig:
    config: RunConfig = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)

    sampler_overrides: Dict[str, Any] = {}
    if args.command == "enhance":
        flags: Dict[str, Any] = dict(ddim_steps=args.ddim, ddim_eta=args.eta, gamma=args.gamma, use_corrector=False if args.no_corrector else None)
        sampler_overrides = {field: value for field, value in flags.items() if value is not None}
    if sampler_overrides:
        config = dataclasses.replace(config, sampler=dataclasses.replace(config.sampler, **sampler_overrides))

    if args.command == "train" and args.schedules:
        config = dataclasses.replace(config, schedule=dataclasses.replace(config.schedule, bracket=args.schedules[0]))
    if args.command == "bench" and args.ddim is not None:
        config = dataclasses.replace(config, bench=dataclasses.replace(config.bench, ddim_steps=args.ddim))
    return config

def _run_directory(args: argparse.Namespace, name: str) -> os.PathLike:
    return ensure_directory(args.out) if args.out else setup_experiment_directory(name)

def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    directory: os.PathLike = _run_directory(args, "gen_data")
    log = setup_logger(PROJECT_LOGGER)
    count: int = config.data.num_pairs if args.count is None else args.count
    if count < 0:
        raise ConfigError(f"--count must be non-negative, got: {count}")
    write_pair_folder(directory, config.data.sampler(), count, config.data.seed)
    config.echo(directory)
    log.info(f"wrote {count} pairs to {directory}")
    return EXIT_SUCCESS

def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    if args.out:
        directory: os.PathLike = ensure_directory(args.out)
    elif args.resume:
        directory = os.path.dirname(os.path.abspath(args.resume))
    else:
        directory = setup_experiment_directory("train")
    log = setup_logger(PROJECT_LOGGER, custom_handle=os.path.join(directory, "log.out"))
    config.echo(directory)

    patch: Tuple[int, int] = config.train.patch
    ns = config.schedule.noise_schedule()
    ps: PyramidSchedule = config.schedule.pyramid_schedule()
    ps.resolution(ps.T, patch)
    if fit_patch(patch, ps) != tuple(patch):
        raise ConfigError(f"patch {patch} leaves pyramid levels not divisible by 4 under {bracket_notation(ps)}; try {fit_patch(patch, ps)}")

    folder: Optional[str] = args.data if args.data else config.data.folder
    if folder:
        data = PairFolder(folder, patch, config.train.seed)
    else:
        data = SyntheticPairs(config.data.sampler(*patch), config.train.seed)
    log.info(f"training on {data}")

    denoiser, corrector = build_models(config.model)
    trainer = Trainer(ns, ps, denoiser, corrector, config.train, data, directory, metadata=dict(config=config.to_dict()))
    if args.resume:
        trainer.resume(args.resume)
    trainer.run(args.iterations, progress=not args.quiet)
    log.info(f"checkpoint: {os.path.join(directory, CHECKPOINT_DIRECTORY)}")
    return EXIT_SUCCESS

def _checkpoint_config(directory: os.PathLike, fallback: RunConfig) -> RunConfig:
    """The run configuration a checkpoint was trained with (the fallback when it carries none)."""
    _, metadata = load_checkpoint(directory)
    return RunConfig.from_dict(metadata["config"]) if "config" in metadata else fallback

def cmd_enhance(args: argparse.Namespace, config: RunConfig) -> int:
    directory: os.PathLike = os.path.dirname(os.path.abspath(args.output))
    log = setup_logger(PROJECT_LOGGER, custom_handle=os.path.join(ensure_directory(args.out), "log.out") if args.out else None)

    trained: RunConfig = _checkpoint_config(args.checkpoint, config)
    schedule: ScheduleConfig = trained.schedule
    denoiser, corrector = load_models(args.checkpoint, trained.model)
    ns = schedule.noise_schedule()
    ps: PyramidSchedule = schedule.pyramid_schedule()

    x_low = load_png(args.input, dtype=trained.model.dtype)
    height, width = x_low.shape[-2:]
    padded, (pad_h, pad_w) = pad_reflect(x_low, ps.max_factor * 4)
    if pad_h or pad_w:
        log.warning(f"{height}x{width} is not divisible by {ps.max_factor * 4}; reflect-padded by ({pad_h}, {pad_w}) and cropped back")

    cond = build_condition(padded[None], ps.factors)
    dump: Optional[os.PathLike] = ensure_directory(args.dump) if args.dump else None
    enhanced = sample(ns, ps, config.sampler, denoiser, corrector, cond, dump_directory=dump, progress=not args.quiet)
    save_png(args.output, crop(enhanced[0], height, width))
    config.echo(args.out if args.out else directory)
    log.info(f"enhanced {args.input} -> {args.output}")
    return EXIT_SUCCESS

def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    directory: os.PathLike = _run_directory(args, "verify")
    setup_logger(PROJECT_LOGGER, custom_handle=os.path.join(directory, "log.out"))
    config.echo(directory)
    results = run_verification(config.schedule.noise_schedule(), chains=args.chains, seed=config.sampler.seed)
    with open(os.path.join(directory, "verify.txt"), "w") as handle:
        handle.write("\n".join(str(result) for result in results) + "\n")
    return EXIT_SUCCESS if all(result.passed for result in results) else EXIT_VERIFICATION_FAILURE

def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    directory: os.PathLike = _run_directory(args, "bench")
    log = setup_logger(PROJECT_LOGGER, custom_handle=os.path.join(directory, "log.out"))
    config.echo(directory)

    schedules: List[str] = args.schedules if args.schedules else ["[1,1,1,1]", config.schedule.bracket]
    schedules = list(dict.fromkeys(s.replace(" ", "") for s in schedules))
    dataset = validation_pairs(config.data.sampler(*config.bench.resolution), config.bench.validation_pairs, config.data.seed)

    models: Dict[str, Tuple[Denoiser, Optional[GlobalCorrector]]] = {}
    cost_model: Optional[ConvDenoiser] = None
    if args.oracle:
        y: np.ndarray = dataset[1]
        models["*"] = (GaussianOracleDenoiser(y.mean(axis=(0, 2, 3)), y.std(axis=(0, 2, 3))), None)
        cost_model = build_models(config.model)[0]
    if args.checkpoint:
        models["*"] = load_models(args.checkpoint, _checkpoint_config(args.checkpoint, config).model)
    for notation, checkpoint in args.checkpoint_for:
        models[notation.replace(" ", "")] = load_models(checkpoint, _checkpoint_config(checkpoint, config).model)

    report = run_benchmark(config.schedule.noise_schedule(), models, schedules, dataset, config.bench, config.sampler,
                           cost_model=cost_model, progress=not args.quiet)
    write_report(report, directory)
    log.info("\n" + report.summary())
    return EXIT_SUCCESS

COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "enhance": cmd_enhance, "verify": cmd_verify, "bench": cmd_bench}

def main(argv: Optional[Sequence[str]]=None) -> int:
    try:
        args: argparse.Namespace = parser.parse_args(argv)
        config: RunConfig = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (OSError, TensorFormatError) as error:
        print(f"pyrdiff: I/O error: {error}", file=sys.stderr)
        return EXIT_IO
    except ValueError as error:
        print(f"pyrdiff: {error}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
