"""Property checks with analytic oracles, shared by `pyrdiff verify` and the test-suite.

Each check returns a `PropertyResult` naming the invariant, whether it held and the observed
values, so a failure can be reported without a traceback.
"""
import dataclasses
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from constants import CONSTANT_BRACKET_SCHEDULE, DEFAULT_BRACKET_SCHEDULE
from corrector import GlobalCorrector
from custom_logging import get_logger
from denoiser import ConvDenoiser, DenoiserInput, GaussianOracleDenoiser
from diffusion import ConditionLevel, DiffusionState, build_condition, forward_step, reconstruct_x0, reverse_step, sample
from nn import Network
from schedules import NoiseSchedule, PyramidSchedule, SamplerConfig, amplification_factor, schedule_from_bracket

log = get_logger(__name__)

@dataclasses.dataclass
class PropertyResult:
    name: str
    invariant: str
    passed: bool
    observed: Dict[str, Any]

    def __str__(self) -> str:
        status: str = "PASS" if self.passed else "FAIL"
        details: str = ", ".join(f"{k}={v}" for k, v in self.observed.items())
        return f"[{status}] {self.name}: {self.invariant} ({details})"

def check_marginal_composition(ns: NoiseSchedule, num_samples: Optional[int]=100_000, steps: Optional[Sequence[int]]=None,
                               x0: Optional[float]=0.5, seed: Optional[int]=0) -> PropertyResult:
    """Chained one-step corruptions match the closed-form marginal N(sqrt(alpha_bar_t) x_0, 1 - alpha_bar_t).

    The mean error is relative to the larger of the expected mean and standard deviation."""
    rng = np.random.default_rng(seed)
    ps = PyramidSchedule((1,) * (ns.T + 1))
    targets: List[int] = sorted(set(steps if steps is not None else (1, ns.T // 2, ns.T)))
    x: np.ndarray = np.full((num_samples, 1, 1, 1), x0)
    worst_mean, worst_var = 0.0, 0.0
    for t in range(1, targets[-1] + 1):
        x = forward_step(ns, ps, x, t, rng.standard_normal(x.shape))
        if t in targets:
            expected_mean: float = np.sqrt(ns.alpha_bar[t]) * x0
            expected_var: float = 1.0 - ns.alpha_bar[t]
            worst_mean = max(worst_mean, abs(x.mean() - expected_mean) / max(abs(expected_mean), np.sqrt(expected_var)))
            worst_var = max(worst_var, abs(x.var() - expected_var) / expected_var)
    return PropertyResult("marginal_composition", "chained forward steps reproduce the closed-form marginal",
                          worst_mean < 0.01 and worst_var < 0.02, dict(mean_rel_error=worst_mean, var_rel_error=worst_var))

def bayes_posterior(ns: NoiseSchedule, t: int, x_t: float, x0: float) -> Tuple[float, float]:
    """Mean and variance of q(x_{t-1} | x_t, x_0) from the product of the two Gaussian factors."""
    precision: float = ns.alpha[t] / ns.beta[t] + 1.0 / (1.0 - ns.alpha_bar[t - 1])
    mean: float = (np.sqrt(ns.alpha[t]) * x_t / ns.beta[t] + np.sqrt(ns.alpha_bar[t - 1]) * x0 / (1.0 - ns.alpha_bar[t - 1])) / precision
    return mean, 1.0 / precision

def check_posterior(ns: NoiseSchedule, trials: Optional[int]=100, tolerance: Optional[float]=1e-10, seed: Optional[int]=0) -> PropertyResult:
    """Mean error is scaled by max(1, |x_t|, |x_0|); near t = 1 the coefficients carry the rounding of 1 - alpha_bar_t."""
    rng = np.random.default_rng(seed)
    ps = PyramidSchedule((1,) * (ns.T + 1))
    worst_mean, worst_var = 0.0, 0.0
    for _ in range(trials):
        t: int = int(rng.integers(2, ns.T + 1))
        x_t, x0 = rng.normal(size=2)
        state = DiffusionState(t, np.full((1, 1, 1), x_t), rng)
        y_prime: np.ndarray = np.full((1, 1, 1), x0)
        mean: float = float(reverse_step(ns, ps, state, y_prime, np.zeros((1, 1, 1))).x_t.item())
        shifted: float = float(reverse_step(ns, ps, state, y_prime, np.ones((1, 1, 1))).x_t.item())
        expected_mean, expected_var = bayes_posterior(ns, t, x_t, x0)
        worst_mean = max(worst_mean, abs(mean - expected_mean) / max(1.0, abs(x_t), abs(x0)))
        worst_var = max(worst_var, abs((shifted - mean) ** 2 - expected_var))
    return PropertyResult("posterior", "same-resolution reverse step equals the Bayes posterior q(x_{t-1} | x_t, x_0)",
                          worst_mean <= tolerance and worst_var <= tolerance, dict(mean_abs_error=worst_mean, var_abs_error=worst_var))

def check_amplification(ns: NoiseSchedule, cases: Optional[int]=50, tolerance: Optional[float]=1e-6, seed: Optional[int]=0) -> PropertyResult:
    """A noise-prediction error delta turns into a reconstruction error of -sqrt(1 - alpha_bar)/sqrt(alpha_bar) delta."""
    rng = np.random.default_rng(seed)
    steps: np.ndarray = np.concatenate([[ns.T], rng.integers(1, ns.T + 1, size=cases - 1)])
    worst: float = 0.0
    for t in steps:
        x0, eps, delta = rng.normal(size=(3, 1, 1, 1))
        x_t: np.ndarray = np.sqrt(ns.alpha_bar[t]) * x0 + np.sqrt(1.0 - ns.alpha_bar[t]) * eps
        error: np.ndarray = reconstruct_x0(ns, x_t, eps + delta, int(t)) - x0
        expected: np.ndarray = -amplification_factor(ns, int(t)) * delta
        worst = max(worst, float(np.abs(error - expected).max() / max(np.abs(expected).max(), 1.0)))
    return PropertyResult("amplification", "reconstruction error is the amplification factor times the noise error",
                          worst <= tolerance, dict(max_rel_error=worst, factor_at_T=amplification_factor(ns, ns.T)))

def _random_level(rng: np.random.Generator, batch: int, height: int, width: int) -> ConditionLevel:
    x_low: np.ndarray = rng.uniform(-1.0, -0.4, size=(batch, 3, height, width))
    return build_condition(x_low, [1]).at(1)

def finite_difference_check(network: Network, evaluate: Callable[[], np.ndarray], backward: Callable[[np.ndarray], Dict[str, np.ndarray]],
                            rng: np.random.Generator, entries_per_tensor: Optional[int]=None, h: Optional[float]=1e-3) -> float:
    """Worst relative error between analytic gradients of <G, f(theta)> and central differences.

    `entries_per_tensor` None checks every parameter entry."""
    output: np.ndarray = evaluate()
    projection: np.ndarray = rng.standard_normal(output.shape)
    network.zero_grad()
    gradients: Dict[str, np.ndarray] = backward(projection)

    worst: float = 0.0
    for name, parameter in network.parameters().items():
        flat: np.ndarray = parameter.value.reshape(-1)
        if entries_per_tensor is None or entries_per_tensor >= flat.size:
            chosen: np.ndarray = np.arange(flat.size)
        else:
            chosen = rng.choice(flat.size, size=entries_per_tensor, replace=False)
        for index in chosen:
            original: float = flat[index]
            flat[index] = original + h
            plus: float = float(np.sum(projection * evaluate()))
            flat[index] = original - h
            minus: float = float(np.sum(projection * evaluate()))
            flat[index] = original
            numeric: float = (plus - minus) / (2.0 * h)
            analytic: float = float(gradients[name].reshape(-1)[index])
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-3))
    return worst

def check_denoiser_gradients(widths: Optional[Sequence[int]]=(32, 64, 128), size: Optional[int]=8, entries_per_tensor: Optional[int]=None,
                             tolerance: Optional[float]=1e-4, seed: Optional[int]=0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    denoiser: ConvDenoiser = ConvDenoiser(widths, seed=seed, dtype=np.float64)
    T: int = 100
    t: np.ndarray = rng.integers(1, T + 1, size=2)
    inputs = DenoiserInput(rng.standard_normal((2, 3, size, size)), _random_level(rng, 2, size, size), t, rng.uniform(0.1, 0.9, size=2), T,
                           swap=np.array([False, True]))
    worst: float = finite_difference_check(denoiser, lambda: denoiser.predict_noise(inputs), denoiser.backward, rng, entries_per_tensor)
    return PropertyResult("denoiser_gradients", "denoiser parameter gradients match central differences",
                          worst <= tolerance, dict(max_rel_error=worst, widths=tuple(widths), parameters=denoiser.num_parameters))

def check_corrector_gradients(extractor_widths: Optional[Sequence[int]]=(16, 32, 32), base_widths: Optional[Sequence[int]]=(32, 32, 32),
                              size: Optional[int]=8, entries_per_tensor: Optional[int]=None, tolerance: Optional[float]=1e-4,
                              seed: Optional[int]=0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    corrector: GlobalCorrector = GlobalCorrector(extractor_widths, base_widths, seed=seed, dtype=np.float64)
    # a zero-initialized corrector has vanishing gradients for most tensors
    for parameter in corrector.parameters().values():
        shape: Tuple[int, ...] = parameter.value.shape
        scale: float = 1.0 / np.sqrt(np.prod(shape[1:])) if len(shape) > 1 else 0.3
        parameter.value = scale * rng.standard_normal(shape)
    y: np.ndarray = rng.uniform(-1.0, 1.0, size=(2, 3, size, size))
    level: ConditionLevel = _random_level(rng, 2, size, size)
    worst: float = finite_difference_check(corrector, lambda: corrector.correct(y, level), corrector.backward, rng, entries_per_tensor)
    return PropertyResult("corrector_gradients", "corrector parameter gradients match central differences",
                          worst <= tolerance, dict(max_rel_error=worst, parameters=corrector.num_parameters))

def check_corrector_identity(precision: Optional[str]="float32", size: Optional[int]=16, seed: Optional[int]=0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    corrector: GlobalCorrector = GlobalCorrector(seed=seed, dtype=np.dtype(precision))
    y: np.ndarray = rng.uniform(-1.0, 1.0, size=(2, 3, size, size)).astype(precision)
    error: float = float(np.abs(corrector.correct(y, _random_level(rng, 2, size, size)) - y).max())
    return PropertyResult(f"corrector_identity[{precision}]", "an untrained corrector returns its input",
                          error <= 1e-6, dict(max_abs_error=error))

def check_oracle_sampling(ns: NoiseSchedule, notation: str, chains: Optional[int]=10_000, mu: Optional[float]=0.3, sigma: Optional[float]=0.2,
                          seed: Optional[int]=0) -> PropertyResult:
    """Full reverse pass with the analytic denoiser for a constant-field Gaussian target on 2x2 images;
    the output moments must match N(mu, sigma^2)."""
    ps: PyramidSchedule = schedule_from_bracket(ns.T, notation, (2, 2))
    oracle = GaussianOracleDenoiser(mu, sigma)
    cond = build_condition(np.zeros((chains, 3, 2, 2)), ps.factors)
    cfg = SamplerConfig(seed=seed, use_corrector=False, clamp_output=False)
    x0: np.ndarray = sample(ns, ps, cfg, oracle, None, cond)
    mean_error: float = float(abs(x0.mean() - mu) / abs(mu))
    var_error: float = float(abs(x0.var() - sigma ** 2) / sigma ** 2)
    return PropertyResult(f"oracle_sampling{notation}", "reverse pass with the Bayes-optimal denoiser recovers the target moments",
                          mean_error <= 0.03 and var_error <= 0.05, dict(mean=float(x0.mean()), var=float(x0.var()), chains=chains))

def run_verification(ns: NoiseSchedule, precisions: Optional[Sequence[str]]=("float32", "float64"), chains: Optional[int]=10_000,
                     seed: Optional[int]=0) -> List[PropertyResult]:
    results: List[PropertyResult] = [
        check_marginal_composition(ns, seed=seed),
        check_posterior(ns, seed=seed),
        check_amplification(ns, seed=seed),
        check_denoiser_gradients(entries_per_tensor=8, seed=seed),
        check_corrector_gradients(seed=seed),
    ]
    results.extend(check_corrector_identity(precision, seed=seed) for precision in precisions)
    results.extend(check_oracle_sampling(ns, notation, chains, seed=seed) for notation in (CONSTANT_BRACKET_SCHEDULE, DEFAULT_BRACKET_SCHEDULE))
    for result in results:
        (log.info if result.passed else log.error)(str(result))
    return results
