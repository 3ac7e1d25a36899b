"""Noise and downsampling schedules.

Both schedules are indexed by the diffusion step t = 0..T, where t = 0 is the clean image
(alpha_bar_0 = 1, s_0 = 1) and t = T the fully noised state. They are computed once at
construction and are read-only afterwards.
"""
import dataclasses
import re
from typing import List, Optional, Sequence, Tuple

import numpy as np

from constants import CORRECTION_THRESHOLD
from errors import ConfigError, ScheduleError
from utils import is_power_of_two

def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array

@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta: np.ndarray
    beta_tilde: np.ndarray

    @classmethod
    def from_alphas(cls, alphas: Sequence[float]) -> "NoiseSchedule":
        alphas: np.ndarray = np.asarray(alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size < 1:
            raise ScheduleError(f"need at least one step, got alphas with shape {alphas.shape}")

        alpha: np.ndarray = np.concatenate(([1.0], alphas))
        alpha_bar: np.ndarray = np.cumprod(alpha)
        beta: np.ndarray = 1.0 - alpha

        beta_tilde: np.ndarray = np.zeros_like(alpha)
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]

        return cls(_freeze(alpha), _freeze(alpha_bar), _freeze(beta), _freeze(beta_tilde))

    def __post_init__(self) -> None:
        steps: np.ndarray = self.alpha[1:]
        if not np.all((steps > 0.0) & (steps < 1.0)):
            raise ScheduleError("every alpha_t must lie strictly inside (0, 1)")
        if np.any(np.diff(steps) > 0.0):
            raise ScheduleError("alpha_t must be non-increasing in t")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ScheduleError("alpha_bar_t must be strictly decreasing in t")
        if np.any(self.beta_tilde < 0.0) or np.any(self.beta_tilde > self.beta):
            raise ScheduleError("beta_tilde_t must lie in [0, beta_t]")

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(T={self.T}, alpha_1={self.alpha[1]}, alpha_T={self.alpha[-1]}, alpha_bar_T={self.alpha_bar[-1]:.3e})"

    @property
    def T(self) -> int:
        return self.alpha.size - 1

    def check_step(self, t: int, allow_zero: Optional[bool]=False) -> int:
        lower: int = 0 if allow_zero else 1
        if not (lower <= int(t) <= self.T):
            raise ScheduleError(f"step t={t} outside [{lower}, {self.T}]")
        return int(t)

    def amplification_factors(self) -> np.ndarray:
        """sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t) for t = 1..T (index 0 holds t = 1)."""
        alpha_bar: np.ndarray = self.alpha_bar[1:]
        return np.sqrt(1.0 - alpha_bar) / np.sqrt(alpha_bar)

def build_linear_noise_schedule(T: int, alpha_start: float, alpha_end: float) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got: {T}")
    if not (0.0 < alpha_end <= alpha_start < 1.0):
        raise ScheduleError(f"need 0 < alpha_end <= alpha_start < 1, got alpha_start={alpha_start}, alpha_end={alpha_end}")
    return NoiseSchedule.from_alphas(np.linspace(alpha_start, alpha_end, int(T)))

def amplification_factor(ns: NoiseSchedule, t: int) -> float:
    t = ns.check_step(t)
    return float(np.sqrt(1.0 - ns.alpha_bar[t]) / np.sqrt(ns.alpha_bar[t]))

@dataclasses.dataclass(frozen=True)
class PyramidSchedule:
    factors: Tuple[int, ...]
    base_resolution: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        factors: Tuple[int, ...] = tuple(int(f) for f in self.factors)
        object.__setattr__(self, "factors", factors)

        if len(factors) < 2 or factors[0] != 1 or factors[1] != 1:
            raise ScheduleError(f"s_0 and s_1 must be 1 so the output is at base resolution, got: {factors[:2]}")
        for factor in factors:
            if not is_power_of_two(factor):
                raise ScheduleError(f"downsampling factors must be powers of two, got: {factor}")
        if any(b < a for a, b in zip(factors[:-1], factors[1:])):
            raise ScheduleError("downsampling factors must be non-decreasing in t")

        if self.base_resolution is not None:
            height, width = (int(v) for v in self.base_resolution)
            object.__setattr__(self, "base_resolution", (height, width))
            if height % self.max_factor or width % self.max_factor:
                raise ScheduleError(f"base resolution {height}x{width} not divisible by max factor {self.max_factor}")

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(T={self.T}, levels={self.levels()}, base_resolution={self.base_resolution})"

    @property
    def T(self) -> int:
        return len(self.factors) - 1

    @property
    def max_factor(self) -> int:
        return max(self.factors)

    @property
    def s(self) -> np.ndarray:
        return np.asarray(self.factors[1:], dtype=np.int64)

    def factor(self, t: int) -> int:
        if not (0 <= int(t) <= self.T):
            raise ScheduleError(f"step t={t} outside [0, {self.T}]")
        return self.factors[int(t)]

    def is_boundary(self, t: int) -> bool:
        """True when the reverse step t -> t-1 changes resolution."""
        return t >= 1 and self.factor(t) > self.factor(t - 1)

    def levels(self) -> List[Tuple[int, int, int]]:
        """(t_lo, t_hi, factor) for every constant-resolution run of steps 1..T, ascending in t."""
        levels: List[Tuple[int, int, int]] = []
        start: int = 1
        for t in range(2, self.T + 2):
            if t == self.T + 1 or self.factors[t] != self.factors[start]:
                levels.append((start, t - 1, self.factors[start]))
                start = t
        return levels

    def with_base_resolution(self, base_resolution: Tuple[int, int]) -> "PyramidSchedule":
        return PyramidSchedule(self.factors, tuple(base_resolution))

    def resolution(self, t: int, base_resolution: Optional[Tuple[int, int]]=None) -> Tuple[int, int]:
        base_resolution = base_resolution if base_resolution is not None else self.base_resolution
        if base_resolution is None:
            raise ScheduleError("no base resolution attached to this schedule")
        factor: int = self.factor(t)
        height, width = base_resolution
        if height % factor or width % factor:
            raise ScheduleError(f"resolution {height}x{width} not divisible by s_{t}={factor}")
        return height // factor, width // factor

def build_pyramid_schedule(T: int, boundaries: Sequence[Tuple[float, int]], base_resolution: Optional[Tuple[int, int]]=None) -> PyramidSchedule:
    """Piecewise-constant downsampling schedule. Each (fraction, factor) pair covers the steps
    up to round(fraction * T); fractions must increase and end at 1.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got: {T}")
    if len(boundaries) == 0:
        raise ScheduleError("need at least one (fraction, factor) boundary")

    fractions: List[float] = [float(f) for f, _ in boundaries]
    if any(b <= a for a, b in zip(fractions[:-1], fractions[1:])) or fractions[0] <= 0.0 or not np.isclose(fractions[-1], 1.0):
        raise ScheduleError(f"fractions must increase strictly and partition (0, 1], got: {fractions}")

    factors: List[int] = [1]
    previous_end: int = 0
    for index, (fraction, factor) in enumerate(boundaries):
        end: int = T if index == len(boundaries) - 1 else int(np.floor(fraction * T + 0.5))
        end = max(end, previous_end)
        factors.extend([int(factor)] * (end - previous_end))
        previous_end = end

    return PyramidSchedule(tuple(factors), base_resolution)

_BRACKET: re.Pattern = re.compile(r"^\s*\[\s*\d+(\s*,\s*\d+)*\s*\]\s*$")

def parse_bracket_schedule(notation: str) -> List[Tuple[float, int]]:
    """`[a,b,c,d]` -> equal shares of the T steps with factors a, b, c, d (t ascending)."""
    if not _BRACKET.match(notation):
        raise ConfigError(f"schedule must look like [1,1,2,2], got: {notation!r}")
    factors: List[int] = [int(v) for v in notation.strip()[1:-1].split(",")]
    count: int = len(factors)
    return [((i + 1) / count, factor) for i, factor in enumerate(factors)]

def bracket_notation(ps: PyramidSchedule, parts: Optional[int]=4) -> str:
    quarters: List[int] = [ps.factor(max(1, int(np.ceil((i + 1) * ps.T / parts)))) for i in range(parts)]
    return "[" + ",".join(str(q) for q in quarters) + "]"

def schedule_from_bracket(T: int, notation: str, base_resolution: Optional[Tuple[int, int]]=None) -> PyramidSchedule:
    return build_pyramid_schedule(T, parse_bracket_schedule(notation), base_resolution)

@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    gamma: float = CORRECTION_THRESHOLD
    ddim_steps: Optional[int] = None
    ddim_eta: float = 0.0
    seed: int = 0
    use_corrector: bool = True
    clamp_output: bool = True

    def __post_init__(self) -> None:
        if not self.gamma > 0.0:
            raise ConfigError(f"gamma must be positive, got: {self.gamma}")
        if self.ddim_steps is not None and int(self.ddim_steps) < 1:
            raise ConfigError(f"ddim_steps must be >= 1, got: {self.ddim_steps}")
        if not (0.0 <= self.ddim_eta <= 1.0):
            raise ConfigError(f"ddim_eta must lie in [0, 1], got: {self.ddim_eta}")

def needs_correction(cfg: SamplerConfig, ns: NoiseSchedule, t: int) -> bool:
    return amplification_factor(ns, t) > cfg.gamma

def correction_onset(ns: NoiseSchedule, gamma: float) -> int:
    """Smallest t whose amplification factor exceeds gamma (T + 1 when none does)."""
    above: np.ndarray = np.flatnonzero(ns.amplification_factors() > gamma)
    return int(above[0]) + 1 if above.size else ns.T + 1

def ddim_subsequence(ps: PyramidSchedule, num_steps: int) -> List[int]:
    """Descending DDIM step set that never skips across a resolution boundary.

    Every pyramid level contributes both of its endpoints; the remaining budget is shared
    between levels in proportion to their step counts and spaced uniformly inside each level.
    """
    levels: List[Tuple[int, int, int]] = ps.levels()
    sizes: List[int] = [hi - lo + 1 for lo, hi, _ in levels]
    required: List[int] = [1 if size == 1 else 2 for size in sizes]

    if not (1 <= num_steps <= ps.T):
        raise ScheduleError(f"ddim_steps must lie in [1, {ps.T}], got: {num_steps}")
    if num_steps < sum(required):
        raise ScheduleError(f"{num_steps} DDIM steps cannot cover both endpoints of {len(levels)} pyramid levels (need {sum(required)})")

    counts: List[int] = list(required)
    extra: int = num_steps - sum(required)
    ideal: List[float] = [num_steps * size / ps.T for size in sizes]
    while extra > 0:
        open_levels: List[int] = [i for i in range(len(levels)) if counts[i] < sizes[i]]
        chosen: int = max(open_levels, key=lambda i: (ideal[i] - counts[i], -i))
        counts[chosen] += 1
        extra -= 1

    steps: List[int] = []
    for (lo, hi, _), count in zip(levels, counts):
        if count == 1:
            steps.append(hi)
            continue
        points: np.ndarray = np.floor(np.linspace(lo, hi, count) + 0.5).astype(np.int64)
        steps.extend(int(p) for p in points)

    return sorted(set(steps), reverse=True)
