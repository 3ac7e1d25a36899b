import numpy as np
import pytest

from errors import ConfigError, ScheduleError
from schedules import (NoiseSchedule, PyramidSchedule, SamplerConfig, amplification_factor, bracket_notation, build_linear_noise_schedule,
                       build_pyramid_schedule, correction_onset, ddim_subsequence, needs_correction, schedule_from_bracket)

def _schedule_with_alpha_bar(values):
    """Schedule whose alpha_bar hits the given values at t = 1, 2, ..."""
    alpha_bar = np.concatenate([[1.0], values])
    return NoiseSchedule.from_alphas(alpha_bar[1:] / alpha_bar[:-1])

def test_linear_schedule_endpoints():
    ns = build_linear_noise_schedule(2000, 0.999999, 0.99)
    assert ns.T == 2000
    assert ns.alpha[0] == 1.0 and ns.alpha_bar[0] == 1.0
    np.testing.assert_allclose(ns.alpha[1], 0.999999)
    np.testing.assert_allclose(ns.alpha[2000], 0.99)

def test_single_step_schedule():
    ns = build_linear_noise_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(ns.alpha_bar[1], 0.5)
    assert ns.beta_tilde[1] == 0.0

def test_alpha_bar_matches_product_loop():
    for T, start, end in [(10, 0.99, 0.90), (2000, 0.999999, 0.99)]:
        ns = build_linear_noise_schedule(T, start, end)
        alphas = np.linspace(start, end, T)
        product = 1.0
        for t in range(1, T + 1):
            product *= alphas[t - 1]
            assert abs(ns.alpha_bar[t] - product) <= 1e-12 * product

def test_schedule_is_read_only():
    ns = build_linear_noise_schedule(10, 0.99, 0.9)
    with pytest.raises(ValueError):
        ns.alpha_bar[3] = 0.5

def test_schedule_rejects_bad_alphas():
    with pytest.raises(ScheduleError):
        build_linear_noise_schedule(10, 0.9, 0.99)
    with pytest.raises(ScheduleError):
        build_linear_noise_schedule(0, 0.99, 0.9)
    with pytest.raises(ScheduleError):
        NoiseSchedule.from_alphas([0.9, 1.0])

def test_pyramid_default_two_level():
    ps = build_pyramid_schedule(2000, [(0.5, 1), (1.0, 2)])
    assert ps.factor(1000) == 1
    assert ps.factor(1001) == 2
    assert ps.factor(0) == 1
    assert bracket_notation(ps) == "[1,1,2,2]"

def test_pyramid_constant_and_four_level():
    assert list(build_pyramid_schedule(4, [(1.0, 1)]).s) == [1, 1, 1, 1]
    ps = build_pyramid_schedule(8, [(0.25, 1), (0.5, 2), (0.75, 4), (1.0, 8)])
    assert list(ps.s) == [1, 1, 2, 2, 4, 4, 8, 8]
    assert ps.levels() == [(1, 2, 1), (3, 4, 2), (5, 6, 4), (7, 8, 8)]
    assert ps.is_boundary(3) and not ps.is_boundary(4)

def test_pyramid_rejects_bad_factors():
    with pytest.raises(ScheduleError):
        PyramidSchedule((1, 1, 2, 1))
    with pytest.raises(ScheduleError):
        PyramidSchedule((1, 1, 3, 3))
    with pytest.raises(ScheduleError):
        PyramidSchedule((1, 2, 2))
    with pytest.raises(ScheduleError):
        schedule_from_bracket(8, "[1,1,2,4]", base_resolution=(6, 8))

def test_bracket_notation_parsing():
    ps = schedule_from_bracket(8, " [1, 2, 4, 8] ", (16, 24))
    assert list(ps.s) == [1, 1, 2, 2, 4, 4, 8, 8]
    assert ps.resolution(8) == (2, 3)
    with pytest.raises(ConfigError):
        schedule_from_bracket(8, "1,1,2,2")

def test_amplification_factor_values():
    ns = _schedule_with_alpha_bar([0.8, 0.5, 0.2])
    np.testing.assert_allclose(amplification_factor(ns, 1), 0.5)
    np.testing.assert_allclose(amplification_factor(ns, 2), 1.0)
    np.testing.assert_allclose(amplification_factor(ns, 3), 2.0)
    with pytest.raises(ScheduleError):
        amplification_factor(ns, 0)
    with pytest.raises(ScheduleError):
        amplification_factor(ns, 4)

def test_amplification_at_T_exceeds_one():
    ns = build_linear_noise_schedule(2000, 0.999999, 0.99)
    alpha_bar_T = np.prod(np.linspace(0.999999, 0.99, 2000))
    expected = np.sqrt(1.0 - alpha_bar_T) / np.sqrt(alpha_bar_T)
    np.testing.assert_allclose(amplification_factor(ns, 2000), expected, rtol=1e-10)
    assert expected > 1.0
    assert np.all(np.diff(ns.amplification_factors()) >= 0.0)

def test_needs_correction_boundary():
    ns = _schedule_with_alpha_bar([0.5, 0.2])
    cfg = SamplerConfig(gamma=1.0)
    assert not needs_correction(cfg, ns, 1)
    assert needs_correction(cfg, ns, 2)

@pytest.mark.parametrize("gamma", [0.5, 1.0, 3.0])
def test_needs_correction_is_a_suffix(gamma):
    ns = build_linear_noise_schedule(2000, 0.999999, 0.99)
    cfg = SamplerConfig(gamma=gamma)
    flags = np.array([needs_correction(cfg, ns, t) for t in range(1, ns.T + 1)])
    onset = correction_onset(ns, gamma)
    np.testing.assert_array_equal(flags, np.arange(1, ns.T + 1) >= onset)

def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        SamplerConfig(ddim_steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(ddim_eta=1.5)

def test_ddim_subsequence_keeps_level_endpoints():
    ps = schedule_from_bracket(2000, "[1,1,2,2]")
    assert ddim_subsequence(ps, 4) == [2000, 1001, 1000, 1]

    steps = ddim_subsequence(ps, 10)
    assert len(steps) == 10
    assert steps == sorted(steps, reverse=True)
    assert {2000, 1001, 1000, 1} <= set(steps)

def test_ddim_subsequence_constant_schedule():
    ps = schedule_from_bracket(2000, "[1,1,1,1]")
    steps = ddim_subsequence(ps, 4)
    assert steps[0] == 2000 and steps[-1] == 1 and len(steps) == 4

def test_ddim_subsequence_too_short():
    ps = schedule_from_bracket(2000, "[1,2,4,8]")
    with pytest.raises(ScheduleError):
        ddim_subsequence(ps, 4)
    assert len(ddim_subsequence(ps, 8)) == 8
