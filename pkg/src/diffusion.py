"""Pyramid diffusion: forward corruption, x_0 reconstruction and the reverse samplers.

States at step t live at resolution (H / s_t, W / s_t). A reverse step that stays on one
pyramid level uses the usual Gaussian posterior; a step that crosses a level boundary
reconstructs x_0, upsamples it to the finer level and re-noises it at alpha_bar_{t-1}.
"""
import dataclasses
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import tqdm

from constants import NUM_IMAGE_CHANNELS
from corrector import GlobalCorrector
from custom_logging import get_logger
from denoiser import Denoiser, DenoiserInput
from errors import ScheduleError, ShapeError
from imageops import ImageTensor, downsample, histogram_equalize, position_encoding, upsample
from schedules import NoiseSchedule, PyramidSchedule, SamplerConfig, ddim_subsequence, needs_correction
from serialization import save_tensor

log = get_logger(__name__)

@dataclasses.dataclass
class DiffusionState:
    t: int
    x_t: ImageTensor
    rng: np.random.Generator

@dataclasses.dataclass(frozen=True, eq=False)
class ConditionLevel:
    x_low: ImageTensor
    hiseq: ImageTensor
    pos: ImageTensor

    def subset(self, index: np.ndarray) -> "ConditionLevel":
        return ConditionLevel(self.x_low[index], self.hiseq[index], self.pos)

@dataclasses.dataclass(frozen=True, eq=False)
class Condition:
    """Low-light conditioning materialized once per pyramid level (keyed by factor)."""
    levels: Dict[int, ConditionLevel]
    base_resolution: Tuple[int, int]

    @property
    def batch_size(self) -> int:
        return self.levels[1].x_low.shape[0]

    def at(self, factor: int) -> ConditionLevel:
        try:
            return self.levels[factor]
        except KeyError:
            raise ShapeError(f"condition was not built for downsampling factor {factor}; available: {sorted(self.levels)}")

def build_condition(x_low: ImageTensor, factors: Sequence[int], hiseq: Optional[ImageTensor]=None) -> Condition:
    """Equalize the low-light batch once at base resolution, then downsample both alongside the
    position encoding of every requested level."""
    if x_low.ndim == 3:
        x_low = x_low[None]
    if x_low.ndim != 4 or x_low.shape[1] != NUM_IMAGE_CHANNELS:
        raise ShapeError(f"x_low must be shaped (N, 3, H, W), got: {x_low.shape}")
    hiseq = histogram_equalize(x_low) if hiseq is None else hiseq
    height, width = x_low.shape[-2:]

    levels: Dict[int, ConditionLevel] = {}
    for factor in sorted(set(int(f) for f in factors) | {1}):
        levels[factor] = ConditionLevel(downsample(x_low, factor), downsample(hiseq, factor), position_encoding(height, width, factor))
    return Condition(levels, (height, width))

def forward_marginal(ns: NoiseSchedule, ps: PyramidSchedule, x0: ImageTensor, t: int, eps: ImageTensor) -> ImageTensor:
    """Sample of q(x_t | x_0): sqrt(alpha_bar_t) (x_0 downsampled by s_t) + sqrt(1 - alpha_bar_t) eps."""
    t = ns.check_step(t, allow_zero=True)
    target: ImageTensor = downsample(x0, ps.factor(t))
    if eps.shape != target.shape:
        raise ShapeError(f"noise shaped {eps.shape} does not match x_0 at s_{t}: {target.shape}")
    return np.sqrt(ns.alpha_bar[t]) * target + np.sqrt(1.0 - ns.alpha_bar[t]) * eps

def forward_step(ns: NoiseSchedule, ps: PyramidSchedule, x_prev: ImageTensor, t: int, eps: ImageTensor) -> ImageTensor:
    """Sample of q(x_t | x_{t-1}): one corruption step, downsampling when the level changes."""
    t = ns.check_step(t)
    shrunk: ImageTensor = downsample(x_prev, ps.factor(t) // ps.factor(t - 1))
    if eps.shape != shrunk.shape:
        raise ShapeError(f"noise shaped {eps.shape} does not match x_{t - 1} at s_{t}: {shrunk.shape}")
    return np.sqrt(ns.alpha[t]) * shrunk + np.sqrt(1.0 - ns.alpha[t]) * eps

def reconstruct_x0(ns: NoiseSchedule, x_t: ImageTensor, eps_pred: ImageTensor, t: int) -> ImageTensor:
    t = ns.check_step(t, allow_zero=True)
    if x_t.shape != eps_pred.shape:
        raise ShapeError(f"x_t {x_t.shape} and predicted noise {eps_pred.shape} differ")
    return (x_t - np.sqrt(1.0 - ns.alpha_bar[t]) * eps_pred) / np.sqrt(ns.alpha_bar[t])

def _draw(rng: np.random.Generator, shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
    return rng.standard_normal(shape).astype(dtype, copy=False)

def reverse_step(ns: NoiseSchedule, ps: PyramidSchedule, state: DiffusionState, y_prime: ImageTensor, eps: Optional[ImageTensor]=None) -> DiffusionState:
    """One ancestral step t -> t-1. When `eps` is None it is drawn from the state's stream;
    at t = 1 it is always zero."""
    t: int = ns.check_step(state.t)
    x_t: ImageTensor = state.x_t
    if y_prime.shape != x_t.shape:
        raise ShapeError(f"x_0 estimate {y_prime.shape} does not match x_t {x_t.shape}")

    ratio: int = ps.factor(t) // ps.factor(t - 1)
    out_shape: Tuple[int, ...] = x_t.shape[:-2] + (x_t.shape[-2] * ratio, x_t.shape[-1] * ratio)
    if t == 1:
        eps = np.zeros(out_shape, dtype=x_t.dtype)
    elif eps is None:
        eps = _draw(state.rng, out_shape, x_t.dtype)
    if eps.shape != out_shape:
        raise ShapeError(f"noise shaped {eps.shape}, step {t} -> {t - 1} needs {out_shape}")

    alpha_bar_prev: float = ns.alpha_bar[t - 1]
    if ratio == 1:
        alpha_bar: float = ns.alpha_bar[t]
        coef_y: float = np.sqrt(alpha_bar_prev) * ns.beta[t] / (1.0 - alpha_bar)
        coef_x: float = np.sqrt(ns.alpha[t]) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        x_prev: ImageTensor = coef_y * y_prime + coef_x * x_t + np.sqrt(ns.beta_tilde[t]) * eps
    else:
        # linear extrapolation past the border must not leave the estimate's per-plane range
        upsampled: ImageTensor = np.clip(upsample(y_prime, ratio), y_prime.min(axis=(-2, -1), keepdims=True), y_prime.max(axis=(-2, -1), keepdims=True))
        x_prev = np.sqrt(alpha_bar_prev) * upsampled + np.sqrt(1.0 - alpha_bar_prev) * eps

    return DiffusionState(t - 1, x_prev.astype(x_t.dtype, copy=False), state.rng)

def ddim_step(ns: NoiseSchedule, ps: PyramidSchedule, state: DiffusionState, y_prime: ImageTensor, eps: Optional[ImageTensor],
              t_next: int, eta: float) -> DiffusionState:
    """Jump t -> t_next inside one pyramid level; the noise direction is recovered from (x_t, y')."""
    t: int = ns.check_step(state.t)
    t_next = ns.check_step(t_next, allow_zero=True)
    if t_next >= t:
        raise ScheduleError(f"DDIM must move to an earlier step, got {t} -> {t_next}")
    if ps.factor(t_next) != ps.factor(t):
        raise ScheduleError(f"DDIM jump {t} -> {t_next} crosses a resolution boundary (s={ps.factor(t)} -> {ps.factor(t_next)})")
    x_t: ImageTensor = state.x_t
    if y_prime.shape != x_t.shape:
        raise ShapeError(f"x_0 estimate {y_prime.shape} does not match x_t {x_t.shape}")

    alpha_bar: float = ns.alpha_bar[t]
    alpha_bar_next: float = ns.alpha_bar[t_next]
    sigma: float = eta * np.sqrt((1.0 - alpha_bar_next) / (1.0 - alpha_bar)) * np.sqrt(1.0 - alpha_bar / alpha_bar_next)
    eps_hat: ImageTensor = (x_t - np.sqrt(alpha_bar) * y_prime) / np.sqrt(1.0 - alpha_bar)

    x_next: ImageTensor = np.sqrt(alpha_bar_next) * y_prime + np.sqrt(max(1.0 - alpha_bar_next - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0.0:
        eps = _draw(state.rng, x_t.shape, x_t.dtype) if eps is None else eps
        x_next = x_next + sigma * eps
    return DiffusionState(t_next, x_next.astype(x_t.dtype, copy=False), state.rng)

def sampling_steps(ps: PyramidSchedule, cfg: SamplerConfig) -> List[int]:
    return ddim_subsequence(ps, int(cfg.ddim_steps)) if cfg.ddim_steps else list(range(ps.T, 0, -1))

def sample(ns: NoiseSchedule, ps: PyramidSchedule, cfg: SamplerConfig, denoiser: Denoiser, corrector: Optional[GlobalCorrector],
           cond: Condition, x_T: Optional[ImageTensor]=None, dump_directory: Optional[os.PathLike]=None,
           progress: Optional[bool]=False) -> ImageTensor:
    """Reverse pass from x_T ~ N(0, I) at the coarsest level down to x_0 at base resolution."""
    if ns.T != ps.T:
        raise ScheduleError(f"noise schedule has T={ns.T}, downsampling schedule has T={ps.T}")
    height, width = cond.base_resolution
    ps.resolution(ps.T, cond.base_resolution)

    rng: np.random.Generator = np.random.default_rng(cfg.seed)
    dtype: np.dtype = getattr(denoiser, "dtype", np.dtype(np.float64))
    top: int = ps.factor(ps.T)
    shape: Tuple[int, ...] = (cond.batch_size, NUM_IMAGE_CHANNELS, height // top, width // top)
    if x_T is None:
        x_T = _draw(rng, shape, dtype)
    elif x_T.shape != shape:
        raise ShapeError(f"x_T shaped {x_T.shape}, schedule needs {shape}")

    steps: List[int] = sampling_steps(ps, cfg)
    use_corrector: bool = corrector is not None and cfg.use_corrector
    state = DiffusionState(ps.T, x_T, rng)
    log.debug(f"sampling {len(steps)} steps, first {steps[:3]}, corrector={use_corrector}")

    for index, t in enumerate(tqdm.tqdm(steps, disable=not progress, desc="reverse")):
        level: ConditionLevel = cond.at(ps.factor(t))
        eps_pred: ImageTensor = denoiser.predict_noise(DenoiserInput(state.x_t, level, t, ns.alpha_bar[t], ns.T))
        y_prime: ImageTensor = reconstruct_x0(ns, state.x_t, eps_pred, t)
        if use_corrector and needs_correction(cfg, ns, t):
            y_prime = corrector.correct(y_prime, level)

        t_next: int = steps[index + 1] if index + 1 < len(steps) else 0
        if ps.is_boundary(t) or not cfg.ddim_steps:
            if t_next != t - 1:
                raise ScheduleError(f"step {t} must be followed by {t - 1}, got {t_next}")
            state = reverse_step(ns, ps, state, y_prime.astype(state.x_t.dtype, copy=False))
        else:
            state = ddim_step(ns, ps, state, y_prime.astype(state.x_t.dtype, copy=False), None, t_next, cfg.ddim_eta)

        if dump_directory is not None:
            save_tensor(os.path.join(dump_directory, f"x_{state.t:05d}.pydt"), state.x_t)

    x0: ImageTensor = state.x_t
    return np.clip(x0, -1.0, 1.0) if cfg.clamp_output else x0
