"""Throughput and quality of the reverse pass across downsampling schedules."""
from concurrent.futures import ThreadPoolExecutor
import copy
import dataclasses
import os
import time
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
import matplotlib.pyplot as plt
matplotlib.use("Agg")
import numpy as np
import tqdm

from constants import CONSTANT_BRACKET_SCHEDULE, EVALUATION_DDIM_STEPS
from corrector import GlobalCorrector
from custom_logging import CsvLog, get_logger
from denoiser import Denoiser
from diffusion import Condition, build_condition, sample, sampling_steps
from errors import CheckpointError, ConfigError
from imageops import ImageTensor
from metrics import psnr, ssim
from schedules import NoiseSchedule, PyramidSchedule, SamplerConfig, schedule_from_bracket

log = get_logger(__name__)

ROW_FIELDS: Tuple[str, ...] = ("schedule", "mode", "workers", "denoiser_calls", "seconds_per_pass", "images_per_second",
                               "flops", "flops_ratio", "psnr", "ssim")

@dataclasses.dataclass(frozen=True)
class BenchConfig:
    passes: int = 20
    warmup: int = 3
    resolution: Tuple[int, int] = (64, 96)
    include_ddpm: bool = True
    include_ddim: bool = True
    ddim_steps: int = EVALUATION_DDIM_STEPS
    num_workers: int = 1
    validation_pairs: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.passes < 1 or self.warmup < 0:
            raise ConfigError(f"need passes >= 1 and warmup >= 0, got passes={self.passes}, warmup={self.warmup}")
        if not (self.include_ddpm or self.include_ddim):
            raise ConfigError("benchmark needs at least one of DDPM or DDIM sampling")
        if self.num_workers < 1:
            raise ConfigError(f"num_workers must be >= 1, got: {self.num_workers}")

def estimate_flops(model: Denoiser, ps: PyramidSchedule, base_resolution: Tuple[int, int], steps: Optional[Sequence[int]]=None) -> int:
    """Denoiser cost of one reverse pass: the per-call cost at each visited step's resolution,
    summed over `steps` (default: every step T..1)."""
    steps = range(ps.T, 0, -1) if steps is None else steps
    cost_per_factor: Dict[int, int] = {}
    total: int = 0
    for t in steps:
        factor: int = ps.factor(t)
        if factor not in cost_per_factor:
            cost_per_factor[factor] = model.flops(*ps.resolution(t, base_resolution))
        total += cost_per_factor[factor]
    return int(total)

@dataclasses.dataclass
class BenchRow:
    schedule: str
    mode: str
    workers: int
    denoiser_calls: int
    seconds_per_pass: float
    images_per_second: float
    flops: int
    flops_ratio: float
    psnr: float
    ssim: float

class BenchReport:
    def __init__(self, rows: Optional[List[BenchRow]]=None):
        self.rows: List[BenchRow] = list(rows or [])

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(rows={len(self.rows)})"

    def row(self, schedule: str, mode: str, workers: Optional[int]=1) -> BenchRow:
        for row in self.rows:
            if (row.schedule, row.mode, row.workers) == (schedule, mode, workers):
                return row
        raise KeyError(f"no benchmark row for {schedule} / {mode} / workers={workers}")

    def write_csv(self, path: os.PathLike) -> None:
        with CsvLog(path, ROW_FIELDS) as csv_log:
            for row in self.rows:
                csv_log.write(**dataclasses.asdict(row))

    def write_dat(self, path: os.PathLike) -> None:
        """Whitespace-separated table with a commented header, readable by gnuplot."""
        with open(path, "w") as handle:
            handle.write("# " + " ".join(ROW_FIELDS) + "\n")
            for row in self.rows:
                values: List[str] = [f'"{row.schedule}"', row.mode, str(row.workers), str(row.denoiser_calls), f"{row.seconds_per_pass:.6f}",
                                     f"{row.images_per_second:.6f}", str(row.flops), f"{row.flops_ratio:.6f}", f"{row.psnr:.4f}", f"{row.ssim:.6f}"]
                handle.write(" ".join(values) + "\n")

    def summary(self) -> str:
        header: str = f"{'schedule':<12} {'mode':<8} {'workers':>7} {'calls':>6} {'s/pass':>10} {'img/s':>9} {'cost':>8} {'psnr':>7} {'ssim':>6}"
        lines: List[str] = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(f"{row.schedule:<12} {row.mode:<8} {row.workers:>7d} {row.denoiser_calls:>6d} {row.seconds_per_pass:>10.4f} "
                         f"{row.images_per_second:>9.3f} {row.flops_ratio:>8.3f} {row.psnr:>7.2f} {row.ssim:>6.3f}")
        return "\n".join(lines)

    def plot(self, path: os.PathLike) -> None:
        single: List[BenchRow] = [row for row in self.rows if row.workers == 1]
        modes: List[str] = sorted({row.mode for row in single})
        schedules: List[str] = list(dict.fromkeys(row.schedule for row in single))
        positions: np.ndarray = np.arange(len(schedules))
        width: float = 0.8 / max(len(modes), 1)

        figure, ax = plt.subplots(nrows=1, ncols=1)
        for index, mode in enumerate(modes):
            heights: List[float] = [self.row(schedule, mode).images_per_second for schedule in schedules]
            ax.bar(positions + index * width, heights, width=width, label=mode)
        ax.set_xticks(positions + width * (len(modes) - 1) / 2)
        ax.set_xticklabels(schedules)
        ax.set_ylabel("images / second")
        ax.legend()
        plt.savefig(path)
        plt.close(figure)

def _time_passes(ns: NoiseSchedule, ps: PyramidSchedule, cfg: SamplerConfig, denoiser: Denoiser, corrector: Optional[GlobalCorrector],
                 cond: Condition, passes: int) -> float:
    start: float = time.perf_counter()
    for _ in range(passes):
        sample(ns, ps, cfg, denoiser, corrector, cond)
    return time.perf_counter() - start

def _throughput(ns: NoiseSchedule, ps: PyramidSchedule, cfg: SamplerConfig, denoiser: Denoiser, corrector: Optional[GlobalCorrector],
                cond: Condition, passes: int, workers: int) -> float:
    """Wall-clock for `passes` reverse passes spread over `workers` threads, one model copy each."""
    replicas = [(copy.deepcopy(denoiser), copy.deepcopy(corrector)) for _ in range(workers)]
    shares: List[int] = [passes // workers + (1 if i < passes % workers else 0) for i in range(workers)]
    start: float = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda job: _time_passes(ns, ps, cfg, job[0][0], job[0][1], cond, job[1]), zip(replicas, shares)))
    return time.perf_counter() - start

def evaluate_quality(ns: NoiseSchedule, ps: PyramidSchedule, cfg: SamplerConfig, denoiser: Denoiser, corrector: Optional[GlobalCorrector],
             dataset: Tuple[ImageTensor, ImageTensor]) -> Tuple[float, float]:
    x_low, y = dataset
    enhanced: ImageTensor = sample(ns, ps, cfg, denoiser, corrector, build_condition(x_low, ps.factors))
    scores: List[Tuple[float, float]] = [(psnr(a, b), ssim(a, b)) for a, b in zip(enhanced, y)]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))

def run_benchmark(ns: NoiseSchedule, models: Dict[str, Tuple[Denoiser, Optional[GlobalCorrector]]], schedules: Sequence[str],
                  dataset: Tuple[ImageTensor, ImageTensor], cfg: BenchConfig, sampler: Optional[SamplerConfig]=None,
                  cost_model: Optional[Denoiser]=None, progress: Optional[bool]=True) -> BenchReport:
    """Time full reverse passes for each bracket schedule and score them on `dataset`.

    `models` maps a bracket schedule (or "*" for a shared model) to its (denoiser, corrector).
    Passes are timed on the first low-light image of `dataset` at `cfg.resolution`. FLOPs are
    counted with `cost_model` when given (e.g. a network standing in for an analytic denoiser).
    """
    sampler = sampler if sampler is not None else SamplerConfig(seed=cfg.seed)
    x_low, _ = dataset
    if tuple(x_low.shape[-2:]) != tuple(cfg.resolution):
        raise ConfigError(f"benchmark dataset is {x_low.shape[-2:]}, configured resolution is {cfg.resolution}")

    modes: List[Tuple[str, Optional[int]]] = []
    if cfg.include_ddpm:
        modes.append(("ddpm", None))
    if cfg.include_ddim:
        modes.append((f"ddim{cfg.ddim_steps}", cfg.ddim_steps))

    report = BenchReport()
    reference: PyramidSchedule = schedule_from_bracket(ns.T, CONSTANT_BRACKET_SCHEDULE, cfg.resolution)
    for notation in tqdm.tqdm(schedules, disable=not progress, desc="bench"):
        if notation not in models and "*" not in models:
            raise CheckpointError(f"no trained model for schedule {notation}")
        denoiser, corrector = models.get(notation, models.get("*"))
        ps: PyramidSchedule = schedule_from_bracket(ns.T, notation, cfg.resolution)
        cond: Condition = build_condition(x_low[:1], ps.factors)

        for mode, ddim_steps in modes:
            cfg_mode = dataclasses.replace(sampler, ddim_steps=ddim_steps, seed=cfg.seed)
            steps: List[int] = sampling_steps(ps, cfg_mode)
            costed: Denoiser = cost_model if cost_model is not None else denoiser
            flops: int = estimate_flops(costed, ps, cfg.resolution, steps)

            _time_passes(ns, ps, cfg_mode, denoiser, corrector, cond, cfg.warmup)
            seconds: float = _time_passes(ns, ps, cfg_mode, denoiser, corrector, cond, cfg.passes) / cfg.passes
            quality: Tuple[float, float] = evaluate_quality(ns, ps, cfg_mode, denoiser, corrector, dataset)
            reference_flops: int = estimate_flops(costed, reference, cfg.resolution, sampling_steps(reference, cfg_mode))
            ratio: float = flops / reference_flops if reference_flops else float("nan")
            report.rows.append(BenchRow(notation, mode, 1, len(steps), seconds, 1.0 / seconds, flops, ratio, *quality))
            log.info(f"{notation} {mode}: {seconds:.4f} s/pass, flops ratio {ratio:.3f}, psnr {quality[0]:.2f}")

            if cfg.num_workers > 1:
                elapsed: float = _throughput(ns, ps, cfg_mode, denoiser, corrector, cond, cfg.passes, cfg.num_workers)
                report.rows.append(BenchRow(notation, mode, cfg.num_workers, len(steps), elapsed / cfg.passes, cfg.passes / elapsed,
                                            flops, ratio, *quality))
    return report

def write_report(report: BenchReport, directory: os.PathLike, plot: Optional[bool]=True) -> None:
    report.write_csv(os.path.join(directory, "bench.csv"))
    report.write_dat(os.path.join(directory, "bench.dat"))
    with open(os.path.join(directory, "summary.txt"), "w") as handle:
        handle.write(report.summary() + "\n")
    if plot:
        report.plot(os.path.join(directory, "images_per_second.png"))
