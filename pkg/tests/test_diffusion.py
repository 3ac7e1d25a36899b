import os

import numpy as np
import pytest

from denoiser import DenoiserInput, GaussianOracleDenoiser
from diffusion import (DiffusionState, build_condition, ddim_step, forward_marginal, forward_step, reconstruct_x0, reverse_step, sample,
                       sampling_steps)
from errors import ScheduleError, ShapeError
from imageops import downsample, upsample
from schedules import (NoiseSchedule, PyramidSchedule, SamplerConfig, amplification_factor, build_linear_noise_schedule, needs_correction,
                       schedule_from_bracket)
from serialization import load_tensor
from verify import check_marginal_composition, check_oracle_sampling, check_posterior

NS = build_linear_noise_schedule(2000, 0.999999, 0.99)

class CountingOracle(GaussianOracleDenoiser):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.calls = []

    def predict_noise(self, inputs):
        self.calls.append((int(np.asarray(inputs.t).reshape(-1)[0]), inputs.x_t.shape[-2:]))
        return super().predict_noise(inputs)

class CountingCorrector:
    def __init__(self):
        self.calls = 0

    def correct(self, y, cond):
        self.calls += 1
        return y

def _constant(T):
    return PyramidSchedule((1,) * (T + 1))

def test_forward_marginal_edges():
    ns = NoiseSchedule.from_alphas([0.25])
    x0 = np.ones((1, 3, 4, 4))
    zeros = np.zeros_like(x0)
    np.testing.assert_array_equal(forward_marginal(ns, _constant(1), x0, 0, zeros), x0)
    np.testing.assert_allclose(forward_marginal(ns, _constant(1), x0, 1, zeros), 0.5 * x0)

def test_forward_marginal_downsamples_to_level():
    ps = schedule_from_bracket(8, "[1,1,2,2]")
    x0 = np.random.default_rng(0).uniform(-1, 1, size=(1, 3, 8, 8))
    ns = build_linear_noise_schedule(8, 0.99, 0.9)
    assert forward_marginal(ns, ps, x0, 8, np.zeros((1, 3, 4, 4))).shape == (1, 3, 4, 4)
    with pytest.raises(ShapeError):
        forward_marginal(ns, ps, x0, 8, np.zeros((1, 3, 8, 8)))
    assert forward_step(ns, ps, x0, 5, np.zeros((1, 3, 4, 4))).shape == (1, 3, 4, 4)

def test_marginal_composition_monte_carlo():
    result = check_marginal_composition(build_linear_noise_schedule(10, 0.99, 0.9), steps=range(1, 11))
    assert result.passed, str(result)

def test_reconstruct_inverts_forward_marginal():
    rng = np.random.default_rng(1)
    ps = schedule_from_bracket(2000, "[1,1,2,2]")
    x0 = rng.uniform(-1, 1, size=(2, 3, 8, 8))
    for t in (1, 700, 1500, 2000):
        eps = rng.standard_normal((2, 3) + (8 // ps.factor(t),) * 2)
        x_t = forward_marginal(NS, ps, x0, t, eps)
        np.testing.assert_allclose(reconstruct_x0(NS, x_t, eps, t), downsample(x0, ps.factor(t)), atol=1e-6)

def test_reconstruction_error_is_amplified_noise_error():
    rng = np.random.default_rng(2)
    for t in (10, 1000, 2000):
        x0, eps, delta = rng.standard_normal((3, 1, 3, 4, 4))
        x_t = np.sqrt(NS.alpha_bar[t]) * x0 + np.sqrt(1 - NS.alpha_bar[t]) * eps
        np.testing.assert_allclose(reconstruct_x0(NS, x_t, eps - delta, t), x0 + amplification_factor(NS, t) * delta, rtol=1e-9, atol=1e-9)

def test_reconstruct_at_step_zero_is_identity():
    x_t = np.random.default_rng(3).standard_normal((1, 3, 2, 2))
    np.testing.assert_array_equal(reconstruct_x0(NS, x_t, np.ones_like(x_t), 0), x_t)

def test_last_reverse_step_returns_estimate():
    rng = np.random.default_rng(4)
    state = DiffusionState(1, rng.standard_normal((1, 3, 4, 4)), rng)
    y_prime = rng.uniform(-1, 1, size=(1, 3, 4, 4))
    out = reverse_step(NS, _constant(2000), state, y_prime, rng.standard_normal((1, 3, 4, 4)))
    assert out.t == 0
    np.testing.assert_array_equal(out.x_t, y_prime)

def test_boundary_step_upsamples_estimate():
    rng = np.random.default_rng(5)
    ps = schedule_from_bracket(2000, "[1,1,2,2]")
    state = DiffusionState(1001, rng.standard_normal((1, 3, 4, 4)), rng)
    y_prime = rng.uniform(-1, 1, size=(1, 3, 4, 4))
    out = reverse_step(NS, ps, state, y_prime, np.zeros((1, 3, 8, 8)))
    assert out.t == 1000 and out.x_t.shape == (1, 3, 8, 8)
    lo, hi = y_prime.min(axis=(-2, -1), keepdims=True), y_prime.max(axis=(-2, -1), keepdims=True)
    np.testing.assert_allclose(out.x_t, np.sqrt(NS.alpha_bar[1000]) * np.clip(upsample(y_prime, 2), lo, hi), rtol=1e-12)
    with pytest.raises(ShapeError):
        reverse_step(NS, ps, state, y_prime, np.zeros((1, 3, 4, 4)))

def test_boundary_step_stays_in_estimate_range():
    ps = schedule_from_bracket(2000, "[1,1,2,2]")
    checkerboard = np.array([[-1.0, 1.0], [1.0, -1.0]]).reshape(1, 1, 2, 2)
    assert upsample(checkerboard, 2).min() < -1.0
    state = DiffusionState(1001, np.zeros((1, 1, 2, 2)), np.random.default_rng(0))
    out = reverse_step(NS, ps, state, checkerboard, np.zeros((1, 1, 4, 4)))
    scale = np.sqrt(NS.alpha_bar[1000])
    assert out.x_t.min() == pytest.approx(-scale) and out.x_t.max() == pytest.approx(scale)

def test_each_boundary_changes_resolution_once():
    ps = schedule_from_bracket(40, "[1,2,4,8]")
    ns = build_linear_noise_schedule(40, 0.999, 0.9)
    oracle = GaussianOracleDenoiser(0.3, 0.2)
    cond = build_condition(np.zeros((1, 3, 16, 16)), ps.factors)
    rng = np.random.default_rng(11)
    state = DiffusionState(40, rng.standard_normal((1, 3, 2, 2)), rng)
    shapes = [state.x_t.shape[-2:]]
    while state.t > 0:
        level = cond.at(ps.factor(state.t))
        eps_pred = oracle.predict_noise(DenoiserInput(state.x_t, level, state.t, ns.alpha_bar[state.t], ns.T))
        state = reverse_step(ns, ps, state, reconstruct_x0(ns, state.x_t, eps_pred, state.t))
        shapes.append(state.x_t.shape[-2:])
    changes = [(a, b) for a, b in zip(shapes, shapes[1:]) if a != b]
    assert len(changes) == 3
    assert all(b == (2 * a[0], 2 * a[1]) for a, b in changes)
    assert shapes[-1] == (16, 16)

def test_reverse_step_matches_bayes_posterior():
    result = check_posterior(NS, trials=200)
    assert result.passed, str(result)

def test_ddim_with_full_stochasticity_matches_posterior():
    ps = _constant(2000)
    rng = np.random.default_rng(6)
    for t in (50, 500, 2000):
        state = DiffusionState(t, np.full((1, 1, 1), rng.normal()), rng)
        y_prime = np.full((1, 1, 1), rng.normal())
        ancestral_mean = reverse_step(NS, ps, state, y_prime, np.zeros((1, 1, 1))).x_t.item()
        ddim_mean = ddim_step(NS, ps, state, y_prime, np.zeros((1, 1, 1)), t - 1, eta=1.0).x_t.item()
        ddim_shifted = ddim_step(NS, ps, state, y_prime, np.ones((1, 1, 1)), t - 1, eta=1.0).x_t.item()
        assert abs(ddim_mean - ancestral_mean) <= 1e-10
        assert abs((ddim_shifted - ddim_mean) ** 2 - NS.beta_tilde[t]) <= 1e-10

def test_deterministic_ddim_is_bit_identical():
    rng = np.random.default_rng(7)
    x_t = rng.standard_normal((1, 3, 4, 4))
    y_prime = rng.uniform(-1, 1, size=(1, 3, 4, 4))
    first = ddim_step(NS, _constant(2000), DiffusionState(1500, x_t, np.random.default_rng(0)), y_prime, None, 700, eta=0.0)
    second = ddim_step(NS, _constant(2000), DiffusionState(1500, x_t, np.random.default_rng(1)), y_prime, None, 700, eta=0.0)
    np.testing.assert_array_equal(first.x_t, second.x_t)

def test_ddim_direction_matches_the_denoiser_without_correction():
    rng = np.random.default_rng(12)
    x_t = rng.standard_normal((1, 3, 4, 4))
    eps_pred = rng.standard_normal((1, 3, 4, 4))
    y_prime = reconstruct_x0(NS, x_t, eps_pred, 1500)
    out = ddim_step(NS, _constant(2000), DiffusionState(1500, x_t, rng), y_prime, None, 700, eta=0.0)
    expected = np.sqrt(NS.alpha_bar[700]) * y_prime + np.sqrt(1.0 - NS.alpha_bar[700]) * eps_pred
    np.testing.assert_allclose(out.x_t, expected, atol=1e-10)

def test_ddim_rejects_level_crossing():
    ps = schedule_from_bracket(2000, "[1,1,2,2]")
    rng = np.random.default_rng(8)
    state = DiffusionState(1500, rng.standard_normal((1, 3, 4, 4)), rng)
    with pytest.raises(ScheduleError):
        ddim_step(NS, ps, state, np.zeros((1, 3, 4, 4)), None, 900, eta=0.0)
    with pytest.raises(ScheduleError):
        ddim_step(NS, ps, state, np.zeros((1, 3, 4, 4)), None, 1600, eta=0.0)

def test_build_condition_levels():
    x_low = np.random.default_rng(9).uniform(-1, -0.5, size=(2, 3, 8, 12))
    cond = build_condition(x_low, (1, 1, 2, 4))
    assert sorted(cond.levels) == [1, 2, 4]
    assert cond.batch_size == 2 and cond.base_resolution == (8, 12)
    assert cond.at(4).x_low.shape == (2, 3, 2, 3) and cond.at(4).pos.shape == (4, 2, 3)
    with pytest.raises(ShapeError):
        cond.at(8)

def test_ddim_sampling_uses_four_denoiser_calls():
    ps = schedule_from_bracket(2000, "[1,1,2,2]")
    oracle = CountingOracle(0.3, 0.2)
    cond = build_condition(np.zeros((1, 3, 4, 4)), ps.factors)
    out = sample(NS, ps, SamplerConfig(ddim_steps=4), oracle, None, cond)
    assert out.shape == (1, 3, 4, 4)
    assert [t for t, _ in oracle.calls] == [2000, 1001, 1000, 1]
    assert [shape for _, shape in oracle.calls] == [(2, 2), (2, 2), (4, 4), (4, 4)]

def test_sampling_is_seed_reproducible_and_clamped():
    ps = schedule_from_bracket(200, "[1,1,2,2]")
    ns = build_linear_noise_schedule(200, 0.9999, 0.9)
    oracle = GaussianOracleDenoiser(0.9, 0.5)
    cond = build_condition(np.zeros((2, 3, 4, 4)), ps.factors)
    first = sample(ns, ps, SamplerConfig(seed=3), oracle, None, cond)
    second = sample(ns, ps, SamplerConfig(seed=3), oracle, None, cond)
    other = sample(ns, ps, SamplerConfig(seed=4), oracle, None, cond)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, other)
    assert first.max() <= 1.0 and first.min() >= -1.0
    assert sample(ns, ps, SamplerConfig(seed=3, clamp_output=False), oracle, None, cond).max() > 1.0

def test_corrector_runs_only_on_gated_steps():
    ps = _constant(2000)
    cfg = SamplerConfig(ddim_steps=20, gamma=1.0)
    corrector = CountingCorrector()
    sample(NS, ps, cfg, GaussianOracleDenoiser(0.0, 0.5), corrector, build_condition(np.zeros((1, 3, 2, 2)), ps.factors))
    assert corrector.calls == sum(needs_correction(cfg, NS, t) for t in sampling_steps(ps, cfg))
    assert 0 < corrector.calls < 20

    corrector = CountingCorrector()
    sample(NS, ps, SamplerConfig(ddim_steps=20, use_corrector=False), GaussianOracleDenoiser(0.0, 0.5), corrector,
           build_condition(np.zeros((1, 3, 2, 2)), ps.factors))
    assert corrector.calls == 0

def test_intermediate_states_are_dumped(tmp_path):
    ps = schedule_from_bracket(2000, "[1,1,2,2]")
    cond = build_condition(np.zeros((1, 3, 4, 4)), ps.factors)
    sample(NS, ps, SamplerConfig(ddim_steps=4), GaussianOracleDenoiser(0.3, 0.2), None, cond, dump_directory=tmp_path)
    assert sorted(os.listdir(tmp_path)) == ["x_00000.pydt", "x_00001.pydt", "x_01000.pydt", "x_01001.pydt"]
    assert load_tensor(os.path.join(tmp_path, "x_01000.pydt")).shape == (1, 3, 4, 4)

def test_sample_validates_schedules():
    cond = build_condition(np.zeros((1, 3, 6, 6)), [1])
    with pytest.raises(ScheduleError):
        sample(NS, _constant(10), SamplerConfig(), GaussianOracleDenoiser(0.0, 0.5), None, cond)
    with pytest.raises(ScheduleError):
        sample(NS, schedule_from_bracket(2000, "[1,1,4,4]"), SamplerConfig(), GaussianOracleDenoiser(0.0, 0.5), None, cond)

@pytest.mark.slow
@pytest.mark.parametrize("notation", ["[1,1,1,1]", "[1,1,2,2]"])
def test_oracle_sampling_recovers_target_moments(notation):
    result = check_oracle_sampling(NS, notation, chains=10_000)
    assert result.passed, str(result)
