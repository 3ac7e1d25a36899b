import argparse
import dataclasses
import os

import numpy as np

from bench import evaluate_quality
from config import RunConfig
from custom_logging import CsvLog, PROJECT_LOGGER, setup_logger
from diffusion import build_condition
from training import SyntheticPairs, Trainer, build_models, validation_pairs
from utils import setup_experiment_directory

parser = argparse.ArgumentParser()

parser.add_argument("--batch-sizes", type=int, nargs="+", default=[16, 8, 4], help="batch sizes to sweep.")
parser.add_argument("--iterations", type=int, default=5000, help="training iterations per run.")
parser.add_argument("--ddim", type=int, default=4, help="DDIM steps used for evaluation.")
parser.add_argument("--shift", type=float, default=0.2, help="channel offset injected into the reconstruction for the efficacy run (0 disables it).")
parser.add_argument("--seed", type=int, default=0)

parser.add_argument_group("scale")
parser.add_argument("--num-steps", type=int, default=2000, help="diffusion steps T.")

def channel_shift_efficacy(config: RunConfig, log, directory: os.PathLike, shift: float) -> None:
    """Train with a constant offset added to the reconstruction at gated steps and measure how much
    of it the corrector removes on held-out images."""
    ns = config.schedule.noise_schedule()
    ps = config.schedule.pyramid_schedule()
    train_config = dataclasses.replace(config.train, reconstruction_shift=shift)
    denoiser, corrector = build_models(config.model)
    data = SyntheticPairs(config.data.sampler(*config.train.patch), config.train.seed)
    Trainer(ns, ps, denoiser, corrector, train_config, data, directory).run()

    x_low, y = validation_pairs(config.data.sampler(), config.data.validation_pairs, config.data.seed)
    corrected = corrector.correct(y + shift, build_condition(x_low, [1]).at(1))
    before: float = float(np.abs((y + shift).mean(axis=(2, 3)) - y.mean(axis=(2, 3))).mean())
    after: float = float(np.abs(corrected.mean(axis=(2, 3)) - y.mean(axis=(2, 3))).mean())
    log.info(f"channel-mean error {before:.4f} -> {after:.4f} ({100.0 * (1.0 - after / before):.1f}% removed)")

def main(args):
    # logging
    experiment_directory: os.PathLike = setup_experiment_directory("corrector_ablation")
    log = setup_logger(PROJECT_LOGGER, custom_handle=os.path.join(experiment_directory, "log.out"))

    base: RunConfig = RunConfig().with_seed(args.seed)
    base = dataclasses.replace(base, schedule=dataclasses.replace(base.schedule, num_steps=args.num_steps),
                               sampler=dataclasses.replace(base.sampler, ddim_steps=args.ddim))
    base.echo(experiment_directory)
    ns = base.schedule.noise_schedule()
    ps = base.schedule.pyramid_schedule()
    dataset = validation_pairs(base.data.sampler(), base.data.validation_pairs, base.data.seed)

    with CsvLog(os.path.join(experiment_directory, "ablation.csv"), ("batch_size", "use_corrector", "psnr", "ssim")) as csv_log:
        for batch_size in args.batch_sizes:
            for use_corrector in (True, False):
                run_directory: os.PathLike = os.path.join(experiment_directory, f"batch{batch_size}_{'gc' if use_corrector else 'nogc'}")
                os.makedirs(run_directory, exist_ok=True)
                train_config = dataclasses.replace(base.train, batch_size=batch_size, use_corrector=use_corrector,
                                                   iterations=args.iterations, checkpoint_every=max(args.iterations, 1))
                denoiser, corrector = build_models(base.model)
                data = SyntheticPairs(base.data.sampler(*train_config.patch), train_config.seed)
                Trainer(ns, ps, denoiser, corrector, train_config, data, run_directory).run()

                sampler = dataclasses.replace(base.sampler, use_corrector=use_corrector)
                score_psnr, score_ssim = evaluate_quality(ns, ps, sampler, denoiser, corrector if use_corrector else None, dataset)
                csv_log.write(batch_size=batch_size, use_corrector=use_corrector, psnr=score_psnr, ssim=score_ssim)
                log.info(f"batch {batch_size}, corrector {use_corrector}: psnr {score_psnr:.2f}, ssim {score_ssim:.3f}")

    if args.shift:
        shift_directory: os.PathLike = os.path.join(experiment_directory, "channel_shift")
        os.makedirs(shift_directory, exist_ok=True)
        channel_shift_efficacy(dataclasses.replace(base, train=dataclasses.replace(base.train, iterations=args.iterations,
                                                                                     checkpoint_every=max(args.iterations, 1))),
                               log, shift_directory, args.shift)

if __name__=="__main__":
    args = parser.parse_args()
    main(args)
