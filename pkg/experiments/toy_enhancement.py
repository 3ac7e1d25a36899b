import argparse
import dataclasses
import os
from typing import Dict, Tuple

import numpy as np

from bench import evaluate_quality
from config import RunConfig
from custom_logging import CsvLog, PROJECT_LOGGER, setup_logger
from metrics import psnr, ssim
from training import SyntheticPairs, Trainer, build_models, load_models, validation_pairs
from utils import setup_experiment_directory

parser = argparse.ArgumentParser()

parser.add_argument("--checkpoint", type=str, default=None, help="evaluate this checkpoint instead of training a new model.")
parser.add_argument("--iterations", type=int, default=5000, help="training iterations.")
parser.add_argument("--pairs", type=int, default=50, help="held-out pairs to score.")
parser.add_argument("--ddim", type=int, default=4, help="DDIM steps for the accelerated sampler.")
parser.add_argument("--seed", type=int, default=0)

def main(args):
    # logging
    experiment_directory: os.PathLike = setup_experiment_directory("toy_enhancement")
    log = setup_logger(PROJECT_LOGGER, custom_handle=os.path.join(experiment_directory, "log.out"))

    config: RunConfig = RunConfig().with_seed(args.seed)
    config = dataclasses.replace(config, train=dataclasses.replace(config.train, iterations=args.iterations))
    config.echo(experiment_directory)
    ns = config.schedule.noise_schedule()
    ps = config.schedule.pyramid_schedule()

    if args.checkpoint:
        denoiser, corrector = load_models(args.checkpoint, config.model)
    else:
        denoiser, corrector = build_models(config.model)
        data = SyntheticPairs(config.data.sampler(*config.train.patch), config.train.seed)
        Trainer(ns, ps, denoiser, corrector, config.train, data, experiment_directory).run()

    dataset = validation_pairs(config.data.sampler(), args.pairs, config.data.seed)
    x_low, y = dataset
    scores: Dict[str, Tuple[float, float]] = {
        "input": (float(np.mean([psnr(a, b) for a, b in zip(x_low, y)])), float(np.mean([ssim(a, b) for a, b in zip(x_low, y)]))),
        "ddpm": evaluate_quality(ns, ps, config.sampler, denoiser, corrector, dataset),
        f"ddim{args.ddim}": evaluate_quality(ns, ps, dataclasses.replace(config.sampler, ddim_steps=args.ddim), denoiser, corrector, dataset),
    }

    with CsvLog(os.path.join(experiment_directory, "scores.csv"), ("method", "psnr", "ssim")) as csv_log:
        for method, (score_psnr, score_ssim) in scores.items():
            csv_log.write(method=method, psnr=score_psnr, ssim=score_ssim)
            log.info(f"{method:>8}: psnr {score_psnr:.2f} dB, ssim {score_ssim:.3f}")

    log.info(f"ddpm gains {scores['ddpm'][0] - scores['input'][0]:+.2f} dB over the input; "
             f"ddim{args.ddim} is {scores[f'ddim{args.ddim}'][0] - scores['ddpm'][0]:+.2f} dB from ddpm")

if __name__=="__main__":
    args = parser.parse_args()
    main(args)
