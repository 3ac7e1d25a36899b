import os

import numpy as np
import pytest

from bench import BenchConfig, estimate_flops, run_benchmark, write_report
from denoiser import ConvDenoiser, GaussianOracleDenoiser
from errors import CheckpointError, ConfigError
from schedules import build_linear_noise_schedule, schedule_from_bracket

NS = build_linear_noise_schedule(8, 0.999, 0.9)

def _ratio(notation, resolution=(64, 96), T=8):
    model = ConvDenoiser()
    flops = estimate_flops(model, schedule_from_bracket(T, notation), resolution)
    return flops / estimate_flops(model, schedule_from_bracket(T, "[1,1,1,1]"), resolution)

def test_flops_ratio_of_two_level_pyramid():
    assert _ratio("[1,1,2,2]") == pytest.approx(0.625)
    assert _ratio("[1,1,2,2]", T=2000) == pytest.approx(0.625)

def test_flops_ratio_of_four_level_pyramid():
    assert _ratio("[1,2,4,8]") == pytest.approx(0.25 * (1 + 1 / 4 + 1 / 16 + 1 / 64))

def test_coarser_schedules_cost_less():
    ratios = [_ratio(notation) for notation in ("[1,1,1,1]", "[1,1,2,2]", "[1,1,2,4]", "[1,2,4,8]")]
    assert ratios[0] == 1.0
    assert all(a > b for a, b in zip(ratios, ratios[1:]))

def test_flops_follow_the_visited_steps():
    model = ConvDenoiser((4, 8, 8))
    ps = schedule_from_bracket(8, "[1,1,2,2]")
    assert estimate_flops(model, ps, (16, 16), [8, 1]) == model.flops(8, 8) + model.flops(16, 16)
    assert estimate_flops(GaussianOracleDenoiser(0.0, 0.5), ps, (16, 16)) == 0

def test_bench_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(passes=0)
    with pytest.raises(ConfigError):
        BenchConfig(include_ddpm=False, include_ddim=False)

def _dataset(seed=0, batch=2, size=16):
    rng = np.random.default_rng(seed)
    y = rng.normal(0.3, 0.2, size=(batch, 3, size, size)).clip(-1, 1)
    return 0.1 * y - 0.8, y

def test_run_benchmark_with_oracle(tmp_path):
    cfg = BenchConfig(passes=1, warmup=0, resolution=(16, 16))
    report = run_benchmark(NS, {"*": (GaussianOracleDenoiser(0.3, 0.2), None)}, ["[1,1,1,1]", "[1,1,2,2]"], _dataset(), cfg,
                           cost_model=ConvDenoiser((4, 8, 8)), progress=False)
    assert len(report.rows) == 4

    ddpm = report.row("[1,1,2,2]", "ddpm")
    assert ddpm.denoiser_calls == 8
    assert ddpm.flops_ratio == pytest.approx(0.625)
    assert report.row("[1,1,2,2]", "ddim4").denoiser_calls == 4
    assert report.row("[1,1,2,2]", "ddim4").flops_ratio == pytest.approx(0.625)
    assert report.row("[1,1,1,1]", "ddpm").flops_ratio == 1.0
    assert all(np.isfinite(row.psnr) and row.seconds_per_pass > 0 for row in report.rows)
    with pytest.raises(KeyError):
        report.row("[1,2,4,8]", "ddpm")

    write_report(report, tmp_path)
    assert sorted(os.listdir(tmp_path)) == ["bench.csv", "bench.dat", "images_per_second.png", "summary.txt"]
    with open(os.path.join(tmp_path, "bench.dat")) as handle:
        lines = handle.read().splitlines()
    assert lines[0].startswith("# schedule mode workers") and len(lines) == 5

def test_threaded_rows():
    cfg = BenchConfig(passes=2, warmup=0, resolution=(16, 16), include_ddim=False, num_workers=2)
    report = run_benchmark(NS, {"[1,1,2,2]": (GaussianOracleDenoiser(0.3, 0.2), None)}, ["[1,1,2,2]"], _dataset(), cfg, progress=False)
    assert report.row("[1,1,2,2]", "ddpm", workers=2).images_per_second > 0

def test_missing_model_for_schedule():
    cfg = BenchConfig(passes=1, warmup=0, resolution=(16, 16))
    with pytest.raises(CheckpointError):
        run_benchmark(NS, {"[1,1,1,1]": (GaussianOracleDenoiser(0.3, 0.2), None)}, ["[1,1,1,1]", "[1,1,2,2]"], _dataset(), cfg, progress=False)

def test_dataset_resolution_must_match():
    with pytest.raises(ConfigError):
        run_benchmark(NS, {"*": (GaussianOracleDenoiser(0.3, 0.2), None)}, ["[1,1,1,1]"], _dataset(size=16), BenchConfig(resolution=(32, 32)),
                      progress=False)
