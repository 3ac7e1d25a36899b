import os

import numpy as np
import pytest

from denoiser import GaussianOracleDenoiser
from diffusion import build_condition
from errors import ConfigError, ScheduleError, ShapeError
from schedules import PyramidSchedule, build_linear_noise_schedule, correction_onset, schedule_from_bracket
from training import (ModelConfig, PairFolder, PairSampler, SyntheticPairs, TrainConfig, Trainer, build_models, generate_pair, lr_schedule,
                      fit_patch, scaled_milestones, validation_pairs, write_pair_folder)
from utils import derive_seed

NS = build_linear_noise_schedule(2000, 0.999999, 0.99)
TINY = ModelConfig(denoiser_widths=(4, 8, 8), extractor_widths=(4, 4, 4), corrector_widths=(4, 4, 4))

def _batch(seed=0, batch=4, size=8):
    rng = np.random.default_rng(seed)
    y = rng.uniform(-1, 1, size=(batch, 3, size, size)).astype(np.float32)
    return (0.2 * y - 0.7).astype(np.float32), y

def test_scaled_milestones():
    assert scaled_milestones(320_000) == (50_000, 75_000, 100_000, 150_000, 200_000)
    assert scaled_milestones(5_000) == (781, 1172, 1563, 2344, 3125)

def test_learning_rate_halves_at_milestones():
    cfg = TrainConfig()
    assert lr_schedule(cfg, 0) == pytest.approx(1e-4)
    assert lr_schedule(cfg, cfg.milestones[2]) == pytest.approx(1.25e-5)
    rates = [lr_schedule(cfg, i) for i in range(0, cfg.iterations, 50)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))

def test_fit_patch_rounds_up_to_level_multiples_of_four():
    assert fit_patch((32, 48), schedule_from_bracket(2000, "[1,1,2,2]")) == (32, 48)
    assert fit_patch((32, 48), schedule_from_bracket(2000, "[1,2,4,8]")) == (32, 64)
    assert fit_patch((6, 10), PyramidSchedule((1,) * 11)) == (8, 12)

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(milestones=(10, 5))
    with pytest.raises(ConfigError):
        TrainConfig(swap_probability=1.5)
    with pytest.raises(ConfigError):
        PairSampler(illumination=(0.0, 0.3))

def test_generate_pair_is_deterministic_and_darker():
    sampler = PairSampler(16, 24)
    x_low, y = generate_pair(sampler, 11)
    again_low, again_y = generate_pair(sampler, 11)
    np.testing.assert_array_equal(x_low, again_low)
    np.testing.assert_array_equal(y, again_y)
    assert x_low.shape == y.shape == (3, 16, 24)
    assert x_low.min() >= -1.0 and y.max() <= 1.0
    assert x_low.mean() < y.mean()

def test_unit_illumination_without_noise_is_identity():
    x_low, y = generate_pair(PairSampler(8, 8, illumination=(1.0, 1.0), noise=(0.0, 0.0)), 3)
    np.testing.assert_array_equal(x_low, y)

def test_synthetic_batches_depend_only_on_seed_and_iteration():
    sampler = PairSampler(8, 8)
    serial = SyntheticPairs(sampler, seed=5, num_workers=1)
    threaded = SyntheticPairs(sampler, seed=5, num_workers=3)
    first, second = serial.batch(7, 4), threaded.batch(7, 4)
    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[1], second[1])
    assert not np.array_equal(first[1], serial.batch(8, 4)[1])

def test_pair_folder(tmp_path):
    manifest = write_pair_folder(tmp_path, PairSampler(8, 12), 3, seed=2)
    assert manifest["count"] == 3 and len(manifest["pairs"]) == 3
    folder = PairFolder(tmp_path, patch=(4, 4))
    assert len(folder) == 3
    x_low, y = folder.batch(0, 5)
    assert x_low.shape == y.shape == (5, 3, 4, 4)
    # PNG round trip quantizes to 8 bits
    np.testing.assert_allclose(folder[0][1], generate_pair(PairSampler(8, 12), derive_seed(2, 0))[1], atol=1.0 / 255 + 1e-6)
    with pytest.raises(ShapeError):
        PairFolder(tmp_path, patch=(16, 16)).batch(0, 1)

def test_pair_folder_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        PairFolder(os.path.join(tmp_path, "nowhere"))

def test_trainer_rejects_mismatched_schedules():
    denoiser, corrector = build_models(TINY)
    with pytest.raises(ConfigError):
        Trainer(NS, PyramidSchedule((1,) * 11), denoiser, corrector, TrainConfig())

def test_gate_is_a_suffix_of_the_step_range():
    trainer = Trainer(NS, PyramidSchedule((1,) * 2001), GaussianOracleDenoiser(0.0, 0.5), None, TrainConfig(use_corrector=False))
    gated = trainer.gate(np.arange(1, 2001))
    onset = correction_onset(NS, 1.0)
    assert 1 < onset <= 2000
    assert not gated[:onset - 1].any() and gated[onset - 1:].all()

def test_corrector_update_leaves_denoiser_untouched():
    denoiser, corrector = build_models(TINY)
    trainer = Trainer(NS, schedule_from_bracket(2000, "[1,1,2,2]"), denoiser, corrector, TrainConfig(batch_size=4))
    x_low, y = _batch()
    steps = np.array([2000, 1800, 900, 700])
    groups = trainer._noisy_batch(y, steps)
    cond = build_condition(x_low, groups.keys())
    predictions = {factor: trainer._predict(x_t, cond.at(factor).subset(index), steps[index], np.zeros(len(index), dtype=bool))
                   for factor, (index, _, _, x_t) in groups.items()}

    before = denoiser.state_dict()
    denoiser.zero_grad()
    loss = trainer.corrector_update(cond, groups, predictions, steps)
    assert loss > 0.0
    assert not any(g.any() for g in denoiser.gradients().values())
    assert np.abs(corrector.gradients()["base4.weight"]).sum() > 0
    for name, value in denoiser.state_dict().items():
        np.testing.assert_array_equal(value, before[name])

def test_corrector_steps_only_when_gated():
    denoiser, corrector = build_models(TINY)
    trainer = Trainer(NS, schedule_from_bracket(2000, "[1,1,2,2]"), denoiser, corrector, TrainConfig(batch_size=2))
    x_low, y = _batch(batch=2)
    before = corrector.state_dict()

    report = trainer.training_step(x_low, y, steps=np.array([1, 5]))
    assert report.corrector_loss == 0.0 and report.gate_rate == 0.0
    assert trainer.corrector_optimizer.step_count == 0
    assert trainer.denoiser_optimizer.step_count == 1
    for name, value in corrector.state_dict().items():
        np.testing.assert_array_equal(value, before[name])

    report = trainer.training_step(x_low, y, steps=np.array([1, 2000]))
    assert report.gate_rate == 0.5 and report.corrector_loss > 0.0
    assert trainer.corrector_optimizer.step_count == 1

def test_without_corrector_only_the_denoiser_trains():
    denoiser, corrector = build_models(TINY)
    trainer = Trainer(NS, schedule_from_bracket(2000, "[1,1,2,2]"), denoiser, corrector, TrainConfig(use_corrector=False))
    assert trainer.corrector is None and trainer.corrector_optimizer is None
    report = trainer.training_step(*_batch(batch=2), steps=2000)
    assert report.corrector_loss == 0.0

def test_oracle_loss_beats_zero_predictor():
    rng = np.random.default_rng(1)
    y = rng.normal(0.3, 0.2, size=(8, 3, 8, 8))
    trainer = Trainer(NS, PyramidSchedule((1,) * 2001), GaussianOracleDenoiser(0.3, 0.2), None, TrainConfig(use_corrector=False))
    report = trainer.training_step(np.zeros_like(y), y, steps=np.linspace(500, 2000, 8).astype(int))
    # the zero predictor scores E|eps| = sqrt(2 / pi) ~ 0.8
    assert report.denoiser_loss < 0.4

def test_batch_shape_validation():
    denoiser, corrector = build_models(TINY)
    trainer = Trainer(NS, schedule_from_bracket(2000, "[1,1,2,2]"), denoiser, corrector, TrainConfig())
    x_low, y = _batch()
    with pytest.raises(ShapeError):
        trainer.training_step(x_low[:2], y)
    with pytest.raises(ScheduleError):
        trainer.training_step(x_low[..., :7, :7], y[..., :7, :7])

def _resumable_trainer(run_directory):
    ns = build_linear_noise_schedule(20, 0.999, 0.9)
    ps = schedule_from_bracket(20, "[1,1,2,2]")
    denoiser, corrector = build_models(TINY)
    config = TrainConfig(batch_size=2, iterations=6, milestones=(3,), patch=(8, 8), checkpoint_every=3, gamma=0.5)
    return Trainer(ns, ps, denoiser, corrector, config, SyntheticPairs(PairSampler(8, 8), seed=4, num_workers=1), run_directory)

def test_resume_matches_uninterrupted_run(tmp_path):
    straight = _resumable_trainer(os.path.join(tmp_path, "straight"))
    os.makedirs(straight.run_directory)
    straight.run(progress=False)

    interrupted = _resumable_trainer(os.path.join(tmp_path, "interrupted"))
    os.makedirs(interrupted.run_directory)
    interrupted.run(iterations=3, progress=False)
    resumed = _resumable_trainer(interrupted.run_directory)
    resumed.resume(os.path.join(interrupted.run_directory, "checkpoint"))
    assert resumed.iteration == 3
    resumed.run(progress=False)

    for name, value in straight.denoiser.state_dict().items():
        np.testing.assert_array_equal(resumed.denoiser.state_dict()[name], value)
    for name, value in straight.corrector.state_dict().items():
        np.testing.assert_array_equal(resumed.corrector.state_dict()[name], value)
    with open(straight.log_path) as a, open(resumed.log_path) as b:
        assert a.read() == b.read()

@pytest.mark.slow
def test_training_reduces_denoiser_loss():
    denoiser, corrector = build_models(TINY)
    config = TrainConfig(batch_size=4, iterations=300, milestones=(), learning_rate=1e-3, patch=(8, 8))
    trainer = Trainer(NS, schedule_from_bracket(2000, "[1,1,2,2]"), denoiser, corrector, config, SyntheticPairs(PairSampler(8, 8), num_workers=1))
    losses = [report.denoiser_loss for report in trainer.run(progress=False)]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])

@pytest.mark.slow
def test_corrector_removes_channel_shift():
    shift = 0.2
    ns = build_linear_noise_schedule(20, 0.9999, 0.999)
    _, corrector = build_models(TINY)
    config = TrainConfig(batch_size=4, iterations=300, milestones=(), learning_rate=3e-3, patch=(8, 8), gamma=0.0, reconstruction_shift=shift)
    trainer = Trainer(ns, PyramidSchedule((1,) * 21), GaussianOracleDenoiser(0.0, 0.5), corrector, config,
                      SyntheticPairs(PairSampler(8, 8), seed=1, num_workers=1))
    trainer.run(progress=False)

    x_low, y = validation_pairs(PairSampler(8, 8), 16, seed=9)
    corrected = corrector.correct((y + shift).astype(np.float32), build_condition(x_low, [1]).at(1))
    before = np.abs(shift * np.ones((16, 3))).mean()
    after = np.abs(corrected.mean(axis=(2, 3)) - y.mean(axis=(2, 3))).mean()
    assert after <= 0.5 * before

def test_float64_checkpoints_round_to_float32(tmp_path):
    ns = build_linear_noise_schedule(20, 0.999, 0.9)
    ps = schedule_from_bracket(20, "[1,1,2,2]")
    model = ModelConfig(denoiser_widths=(4, 8, 8), extractor_widths=(4, 4, 4), corrector_widths=(4, 4, 4), precision="float64")
    config = TrainConfig(batch_size=2, iterations=1, milestones=(), patch=(8, 8))
    trainer = Trainer(ns, ps, *build_models(model), config, SyntheticPairs(PairSampler(8, 8), num_workers=1))
    trainer.run(progress=False)
    directory = trainer.save(os.path.join(tmp_path, "checkpoint"))

    restored = Trainer(ns, ps, *build_models(model), config)
    restored.resume(directory)
    for name, value in trainer.denoiser.state_dict().items():
        loaded = restored.denoiser.state_dict()[name]
        assert loaded.dtype == np.float64
        np.testing.assert_array_equal(loaded, value.astype(np.float32).astype(np.float64))
