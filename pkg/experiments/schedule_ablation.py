import argparse
import dataclasses
import os
from typing import Dict, List, Optional, Tuple

from bench import BenchConfig, run_benchmark, write_report
from config import RunConfig
from constants import ABLATION_BRACKET_SCHEDULES
from corrector import GlobalCorrector
from custom_logging import PROJECT_LOGGER, setup_logger
from denoiser import Denoiser, GaussianOracleDenoiser
from training import SyntheticPairs, Trainer, build_models, fit_patch, validation_pairs
from utils import setup_experiment_directory

parser = argparse.ArgumentParser()

parser.add_argument("--schedules", type=str, nargs="+", default=list(ABLATION_BRACKET_SCHEDULES), help="bracket schedules to compare.")
parser.add_argument("--iterations", type=int, default=5000, help="training iterations per schedule.")
parser.add_argument("--num-steps", type=int, default=2000, help="diffusion steps T.")
parser.add_argument("--passes", type=int, default=20, help="timed reverse passes per schedule.")
parser.add_argument("--oracle", action="store_true", help="skip training and time the analytic Gaussian denoiser.")
parser.add_argument("--seed", type=int, default=0)

def main(args):
    # logging
    experiment_directory: os.PathLike = setup_experiment_directory("schedule_ablation")
    log = setup_logger(PROJECT_LOGGER, custom_handle=os.path.join(experiment_directory, "log.out"))

    config: RunConfig = RunConfig().with_seed(args.seed)
    config = dataclasses.replace(config, schedule=dataclasses.replace(config.schedule, num_steps=args.num_steps),
                                 train=dataclasses.replace(config.train, iterations=args.iterations, checkpoint_every=max(args.iterations, 1)),
                                 bench=BenchConfig(passes=args.passes, seed=args.seed))
    config.echo(experiment_directory)
    ns = config.schedule.noise_schedule()
    dataset = validation_pairs(config.data.sampler(*config.bench.resolution), config.bench.validation_pairs, config.data.seed)

    models: Dict[str, Tuple[Denoiser, Optional[GlobalCorrector]]] = {}
    cost_model: Optional[Denoiser] = None
    if args.oracle:
        y = dataset[1]
        models["*"] = (GaussianOracleDenoiser(y.mean(axis=(0, 2, 3)), y.std(axis=(0, 2, 3))), None)
        cost_model = build_models(config.model)[0]
    else:
        for notation in args.schedules:
            log.info(f"training under {notation}")
            run_directory: os.PathLike = os.path.join(experiment_directory, notation.strip("[]").replace(",", "_"))
            os.makedirs(run_directory, exist_ok=True)
            ps = config.schedule.pyramid_schedule(bracket=notation)
            train_config = dataclasses.replace(config.train, patch=fit_patch(config.train.patch, ps))
            denoiser, corrector = build_models(config.model)
            data = SyntheticPairs(config.data.sampler(*train_config.patch), train_config.seed)
            trainer = Trainer(ns, ps, denoiser, corrector, train_config, data, run_directory)
            trainer.run()
            models[notation] = (denoiser, corrector)

    report = run_benchmark(ns, models, args.schedules, dataset, config.bench, config.sampler, cost_model=cost_model)
    write_report(report, experiment_directory)
    log.info("\n" + report.summary())

    rows: List = [row for row in report.rows if row.mode == "ddpm"]
    if len(rows) > 1:
        baseline = rows[0]
        for row in rows[1:]:
            log.info(f"{row.schedule}: {row.images_per_second / baseline.images_per_second:.2f}x images/s over {baseline.schedule}, "
                     f"cost model predicts {1.0 / row.flops_ratio:.2f}x, psnr {row.psnr - baseline.psnr:+.2f} dB")

if __name__=="__main__":
    args = parser.parse_args()
    main(args)
