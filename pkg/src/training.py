"""Joint training of the noise predictor and the global corrector on paired low/normal-light data."""
import bisect
from concurrent.futures import ThreadPoolExecutor
import dataclasses
import json
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import tqdm

from constants import (BATCH_SIZE, CORRECTION_THRESHOLD, DESK_ITERATIONS, DESK_PATCH, LEARNING_RATE, NUM_IMAGE_CHANNELS,
                       REFERENCE_ITERATIONS, REFERENCE_MILESTONES, SWAP_PROBABILITY)
from corrector import GlobalCorrector
from custom_logging import CsvLog, get_logger, truncate_csv
from denoiser import ConvDenoiser, Denoiser, DenoiserInput
from diffusion import Condition, ConditionLevel, build_condition
from errors import CheckpointError, ConfigError, NonFiniteLossError, ShapeError
from imageops import ImageTensor, downsample, from_unit_range, load_png, save_png
from nn import Adam
from schedules import NoiseSchedule, PyramidSchedule
from serialization import load_checkpoint, save_checkpoint
from utils import derive_seed, ensure_directory, get_num_threads

log = get_logger(__name__)

LOG_FIELDS: Tuple[str, ...] = ("iteration", "denoiser_loss", "corrector_loss", "lr", "gate_rate")
CHECKPOINT_DIRECTORY: str = "checkpoint"
PAIR_MANIFEST: str = "manifest.json"

def scaled_milestones(iterations: int, milestones: Optional[Sequence[int]]=REFERENCE_MILESTONES, reference: Optional[int]=REFERENCE_ITERATIONS) -> Tuple[int, ...]:
    """Halving milestones moved proportionally from a `reference`-iteration run to `iterations`."""
    return tuple(int(np.floor(m * iterations / reference + 0.5)) for m in milestones)

@dataclasses.dataclass(frozen=True)
class ModelConfig:
    denoiser_widths: Tuple[int, ...] = (32, 64, 128)
    extractor_widths: Tuple[int, ...] = (16, 32, 32)
    corrector_widths: Tuple[int, ...] = (32, 32, 32)
    use_position_encoding: bool = True
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.denoiser_widths) != 3:
            raise ConfigError(f"denoiser_widths needs three stage widths, got: {self.denoiser_widths}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got: {self.precision}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

def build_models(config: ModelConfig) -> Tuple[ConvDenoiser, GlobalCorrector]:
    denoiser = ConvDenoiser(config.denoiser_widths, config.use_position_encoding, seed=derive_seed(config.seed, 0), dtype=config.dtype)
    corrector = GlobalCorrector(config.extractor_widths, config.corrector_widths, config.use_position_encoding,
                                seed=derive_seed(config.seed, 1), dtype=config.dtype)
    return denoiser, corrector

@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    iterations: int = DESK_ITERATIONS
    milestones: Tuple[int, ...] = scaled_milestones(DESK_ITERATIONS)
    patch: Tuple[int, int] = DESK_PATCH
    seed: int = 0
    use_corrector: bool = True
    gamma: float = CORRECTION_THRESHOLD
    swap_probability: float = SWAP_PROBABILITY
    reconstruction_shift: float = 0.0
    checkpoint_every: int = 1000

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got: {self.batch_size}")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones must be sorted, got: {self.milestones}")
        if not (0.0 <= self.swap_probability <= 1.0):
            raise ConfigError(f"swap_probability must lie in [0, 1], got: {self.swap_probability}")
        if self.iterations < 0 or self.checkpoint_every < 1:
            raise ConfigError(f"bad iteration settings: iterations={self.iterations}, checkpoint_every={self.checkpoint_every}")

def lr_schedule(cfg: TrainConfig, iteration: int) -> float:
    return cfg.learning_rate * 0.5 ** bisect.bisect_right(cfg.milestones, iteration)

@dataclasses.dataclass(frozen=True)
class PairSampler:
    """Procedural scenes: a smooth colour gradient overlaid with random rectangles and ellipses,
    darkened by a random illumination scale and corrupted by additive Gaussian noise."""
    height: int = DESK_PATCH[0]
    width: int = DESK_PATCH[1]
    illumination: Tuple[float, float] = (0.05, 0.3)
    noise: Tuple[float, float] = (0.02, 0.08)
    num_shapes: Tuple[int, int] = (2, 6)

    def __post_init__(self) -> None:
        if not (0.0 < self.illumination[0] <= self.illumination[1] <= 1.0):
            raise ConfigError(f"illumination range must satisfy 0 < lo <= hi <= 1, got: {self.illumination}")
        if not (0.0 <= self.noise[0] <= self.noise[1]):
            raise ConfigError(f"noise range must satisfy 0 <= lo <= hi, got: {self.noise}")

def _scene(sampler: PairSampler, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.meshgrid(np.linspace(0.0, 1.0, sampler.height), np.linspace(0.0, 1.0, sampler.width), indexing="ij")
    base: np.ndarray = rng.uniform(0.1, 0.9, size=(NUM_IMAGE_CHANNELS, 1, 1))
    slope: np.ndarray = rng.uniform(-0.4, 0.4, size=(2, NUM_IMAGE_CHANNELS, 1, 1))
    scene: np.ndarray = base + slope[0] * (rows - 0.5) + slope[1] * (cols - 0.5)

    for _ in range(int(rng.integers(sampler.num_shapes[0], sampler.num_shapes[1] + 1))):
        color: np.ndarray = rng.uniform(0.0, 1.0, size=(NUM_IMAGE_CHANNELS, 1, 1))
        center: np.ndarray = rng.uniform(0.0, 1.0, size=2)
        extent: np.ndarray = rng.uniform(0.08, 0.35, size=2)
        if rng.random() < 0.5:
            mask: np.ndarray = (np.abs(rows - center[0]) < extent[0]) & (np.abs(cols - center[1]) < extent[1])
        else:
            mask = ((rows - center[0]) / extent[0]) ** 2 + ((cols - center[1]) / extent[1]) ** 2 < 1.0
        scene = np.where(mask[None], color, scene)
    return np.clip(scene, 0.0, 1.0)

def generate_pair(sampler: PairSampler, seed: int) -> Tuple[ImageTensor, ImageTensor]:
    """(x_low, y) in [-1, 1], both shaped (3, height, width); deterministic per seed."""
    rng = np.random.default_rng(seed)
    clean: np.ndarray = _scene(sampler, rng)
    scale: float = rng.uniform(*sampler.illumination)
    sigma: float = rng.uniform(*sampler.noise)
    dark: np.ndarray = np.clip(clean * scale + sigma * rng.standard_normal(clean.shape), 0.0, 1.0)
    return from_unit_range(dark).astype(np.float32), from_unit_range(clean).astype(np.float32)

class SyntheticPairs:
    """Endless synthetic stream; batch `i` depends only on (seed, i) so runs resume exactly."""

    def __init__(self, sampler: PairSampler, seed: Optional[int]=0, num_workers: Optional[int]=None):
        self.sampler = sampler
        self.seed = seed
        self.num_workers = num_workers if num_workers is not None else get_num_threads()

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(sampler={self.sampler}, seed={self.seed}, num_workers={self.num_workers})"

    def batch(self, iteration: int, batch_size: int) -> Tuple[ImageTensor, ImageTensor]:
        seeds: List[int] = [derive_seed(self.seed, iteration, index) for index in range(batch_size)]
        if self.num_workers > 1:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                pairs = list(pool.map(lambda s: generate_pair(self.sampler, s), seeds))
        else:
            pairs = [generate_pair(self.sampler, s) for s in seeds]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

def write_pair_folder(directory: os.PathLike, sampler: PairSampler, count: int, seed: Optional[int]=0) -> Dict[str, Any]:
    """Write `{id}_low.png` / `{id}_normal.png` pairs plus a manifest; returns the manifest."""
    ensure_directory(directory)
    pairs: List[Dict[str, str]] = []
    for index in range(count):
        x_low, y = generate_pair(sampler, derive_seed(seed, index))
        identifier: str = f"{index:05d}"
        save_png(os.path.join(directory, f"{identifier}_low.png"), x_low)
        save_png(os.path.join(directory, f"{identifier}_normal.png"), y)
        pairs.append(dict(id=identifier, low=f"{identifier}_low.png", normal=f"{identifier}_normal.png"))

    manifest: Dict[str, Any] = dict(count=count, seed=seed, height=sampler.height, width=sampler.width, pairs=pairs)
    with open(os.path.join(directory, PAIR_MANIFEST), "w") as handle:
        json.dump(manifest, handle, indent=2)
    return manifest

class PairFolder:
    """Paired PNG folder (the layout `write_pair_folder` produces), served as random aligned crops."""

    def __init__(self, directory: os.PathLike, patch: Optional[Tuple[int, int]]=None, seed: Optional[int]=0):
        manifest_path: os.PathLike = os.path.join(directory, PAIR_MANIFEST)
        if not os.path.isfile(manifest_path):
            raise FileNotFoundError(f"no pair manifest at: {manifest_path}")
        with open(manifest_path) as handle:
            manifest: Dict[str, Any] = json.load(handle)

        self.directory = directory
        self.patch = patch
        self.seed = seed
        self.pairs: List[Tuple[ImageTensor, ImageTensor]] = []
        for entry in manifest["pairs"]:
            x_low: ImageTensor = load_png(os.path.join(directory, entry["low"]))
            y: ImageTensor = load_png(os.path.join(directory, entry["normal"]))
            if x_low.shape != y.shape:
                raise ShapeError(f"pair {entry['id']} is misaligned: {x_low.shape} vs {y.shape}")
            self.pairs.append((x_low, y))
        if not self.pairs:
            raise ValueError(f"pair folder {directory} is empty")

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(directory={self.directory}, pairs={len(self)}, patch={self.patch})"

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> Tuple[ImageTensor, ImageTensor]:
        return self.pairs[index]

    def batch(self, iteration: int, batch_size: int) -> Tuple[ImageTensor, ImageTensor]:
        rng = np.random.default_rng(derive_seed(self.seed, iteration))
        lows, highs = [], []
        for index in rng.integers(0, len(self.pairs), size=batch_size):
            x_low, y = self.pairs[index]
            height, width = y.shape[-2:]
            patch_h, patch_w = self.patch if self.patch is not None else (height, width)
            if patch_h > height or patch_w > width:
                raise ShapeError(f"patch {self.patch} exceeds image {height}x{width}")
            top: int = int(rng.integers(0, height - patch_h + 1))
            left: int = int(rng.integers(0, width - patch_w + 1))
            lows.append(x_low[:, top:top + patch_h, left:left + patch_w])
            highs.append(y[:, top:top + patch_h, left:left + patch_w])
        return np.stack(lows), np.stack(highs)

@dataclasses.dataclass
class LossReport:
    iteration: int
    denoiser_loss: float
    corrector_loss: float
    lr: float
    gate_rate: float
    steps: np.ndarray
    gated: np.ndarray

    def row(self) -> Dict[str, float]:
        return dict(iteration=self.iteration, denoiser_loss=self.denoiser_loss, corrector_loss=self.corrector_loss, lr=self.lr, gate_rate=self.gate_rate)

class Trainer:
    """Runs the two gradient steps per iteration: an L1 noise-prediction step for the denoiser and,
    for samples whose amplification factor exceeds gamma, an L1 step for the corrector on the
    stop-gradient reconstruction. Each model has its own Adam state."""

    def __init__(self, ns: NoiseSchedule, ps: PyramidSchedule, denoiser: Denoiser, corrector: Optional[GlobalCorrector],
                 config: TrainConfig, data: Any=None, run_directory: Optional[os.PathLike]=None, metadata: Optional[Dict[str, Any]]=None):
        if ns.T != ps.T:
            raise ConfigError(f"noise schedule has T={ns.T}, downsampling schedule has T={ps.T}")
        self.ns = ns
        self.ps = ps
        self.denoiser = denoiser
        self.corrector = corrector if config.use_corrector else None
        self.config = config
        self.data = data
        self.run_directory = run_directory
        self.metadata = dict(metadata or {})

        self.denoiser_optimizer: Optional[Adam] = None
        if denoiser.trainable:
            self.denoiser_optimizer = Adam(denoiser.parameters(), config.learning_rate, config.betas, config.eps, config.weight_decay)
        self.corrector_optimizer: Optional[Adam] = None
        if self.corrector is not None:
            self.corrector_optimizer = Adam(self.corrector.parameters(), config.learning_rate, config.betas, config.eps, config.weight_decay)

        self.rng = np.random.default_rng(config.seed)
        self.iteration: int = 0
        self.amplification: np.ndarray = np.concatenate([[0.0], ns.amplification_factors()])

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(iteration={self.iteration}, config={self.config})"

    def gate(self, steps: np.ndarray) -> np.ndarray:
        return self.amplification[np.asarray(steps)] > self.config.gamma

    def _noisy_batch(self, y: ImageTensor, steps: np.ndarray) -> Dict[int, Tuple[np.ndarray, ImageTensor, ImageTensor, ImageTensor]]:
        """Per pyramid factor: (sample indices, y at that factor, eps, x_t)."""
        groups: Dict[int, Tuple[np.ndarray, ImageTensor, ImageTensor, ImageTensor]] = {}
        factors: np.ndarray = np.asarray(self.ps.factors)[steps]
        for factor in np.unique(factors):
            index: np.ndarray = np.flatnonzero(factors == factor)
            target: ImageTensor = downsample(y[index], int(factor))
            eps: ImageTensor = self.rng.standard_normal(target.shape).astype(y.dtype)
            alpha_bar: np.ndarray = self.ns.alpha_bar[steps[index]][:, None, None, None]
            x_t: ImageTensor = (np.sqrt(alpha_bar) * target + np.sqrt(1.0 - alpha_bar) * eps).astype(y.dtype)
            groups[int(factor)] = (index, target, eps, x_t)
        return groups

    def _predict(self, x_t: ImageTensor, level: ConditionLevel, steps: np.ndarray, swap: Optional[np.ndarray]) -> ImageTensor:
        return self.denoiser.predict_noise(DenoiserInput(x_t, level, steps, self.ns.alpha_bar[steps], self.ns.T, swap))

    def denoiser_update(self, cond: Condition, groups: Dict, steps: np.ndarray, swap: np.ndarray, lr: float) -> Tuple[float, Dict[int, ImageTensor]]:
        """One L1 step on the noise prediction; returns the loss and the predictions per factor."""
        batch: int = len(steps)
        if self.denoiser.trainable:
            self.denoiser.zero_grad()
        loss: float = 0.0
        predictions: Dict[int, ImageTensor] = {}
        for factor, (index, _, eps, x_t) in groups.items():
            eps_pred: ImageTensor = self._predict(x_t, cond.at(factor).subset(index), steps[index], swap[index])
            predictions[factor] = eps_pred
            residual: np.ndarray = eps_pred - eps
            per_sample: int = int(np.prod(residual.shape[1:]))
            loss += float(np.abs(residual).sum(dtype=np.float64)) / (per_sample * batch)
            if self.denoiser.trainable:
                self.denoiser.backward(np.sign(residual) / (per_sample * batch))
        return loss, predictions

    def corrector_update(self, cond: Condition, groups: Dict, predictions: Dict[int, ImageTensor], steps: np.ndarray) -> float:
        """L1 step for the corrector on gated samples. The reconstruction is treated as a constant,
        so nothing here touches the denoiser."""
        gated: np.ndarray = self.gate(steps)
        num_gated: int = int(gated.sum())
        if self.corrector is None or num_gated == 0:
            return 0.0

        self.corrector.zero_grad()
        loss: float = 0.0
        for factor, (index, target, _, x_t) in groups.items():
            keep: np.ndarray = gated[index]
            if not keep.any():
                continue
            chosen: np.ndarray = index[keep]
            t: np.ndarray = steps[chosen]
            alpha_bar: np.ndarray = self.ns.alpha_bar[t][:, None, None, None]
            y_theta: ImageTensor = (x_t[keep] - np.sqrt(1.0 - alpha_bar) * predictions[factor][keep]) / np.sqrt(alpha_bar)
            y_theta = y_theta + self.config.reconstruction_shift
            corrected: ImageTensor = self.corrector.correct(y_theta, cond.at(factor).subset(chosen))
            residual: np.ndarray = corrected - target[keep]
            per_sample: int = int(np.prod(residual.shape[1:]))
            loss += float(np.abs(residual).sum(dtype=np.float64)) / (per_sample * num_gated)
            self.corrector.backward(np.sign(residual) / (per_sample * num_gated))
        return loss

    def training_step(self, x_low: ImageTensor, y: ImageTensor, steps: Optional[np.ndarray]=None) -> LossReport:
        if x_low.shape != y.shape or x_low.ndim != 4:
            raise ShapeError(f"training batch must be two matching (N, 3, H, W) arrays, got {x_low.shape} and {y.shape}")
        self.ps.resolution(self.ps.T, y.shape[-2:])
        batch: int = y.shape[0]
        lr: float = lr_schedule(self.config, self.iteration)

        drawn: np.ndarray = self.rng.integers(1, self.ns.T + 1, size=batch)
        steps = drawn if steps is None else np.broadcast_to(np.asarray(steps, dtype=np.int64), (batch,)).copy()
        swap: np.ndarray = self.rng.random(batch) < self.config.swap_probability
        groups = self._noisy_batch(y, steps)
        cond: Condition = build_condition(x_low, groups.keys())

        denoiser_loss, predictions = self.denoiser_update(cond, groups, steps, swap, lr)
        corrector_loss: float = self.corrector_update(cond, groups, predictions, steps)
        gated: np.ndarray = self.gate(steps)

        if not (np.isfinite(denoiser_loss) and np.isfinite(corrector_loss)):
            raise NonFiniteLossError(f"iteration {self.iteration}: steps={steps.tolist()}, denoiser_loss={denoiser_loss}, corrector_loss={corrector_loss}")
        if self.denoiser_optimizer is not None:
            self.denoiser_optimizer.step(lr)
        if self.corrector_optimizer is not None and gated.any():
            self.corrector_optimizer.step(lr)

        report = LossReport(self.iteration, denoiser_loss, corrector_loss, lr, float(gated.mean()), steps, gated)
        self.iteration += 1
        return report

    @property
    def log_path(self) -> Optional[os.PathLike]:
        return os.path.join(self.run_directory, "train_log.csv") if self.run_directory is not None else None

    def run(self, iterations: Optional[int]=None, progress: Optional[bool]=True) -> List[LossReport]:
        """Train until `iterations` (default: the configured total), logging and checkpointing."""
        if self.data is None:
            raise ConfigError("trainer has no data source")
        stop: int = self.config.iterations if iterations is None else iterations
        reports: List[LossReport] = []
        csv_log: Optional[CsvLog] = CsvLog(self.log_path, LOG_FIELDS, append=self.iteration > 0) if self.log_path else None
        try:
            for _ in tqdm.tqdm(range(self.iteration, stop), disable=not progress, desc="train"):
                x_low, y = self.data.batch(self.iteration, self.config.batch_size)
                report: LossReport = self.training_step(x_low, y)
                reports.append(report)
                if csv_log is not None:
                    csv_log.write(**report.row())
                if self.run_directory is not None and self.iteration % self.config.checkpoint_every == 0:
                    self.save()
        finally:
            if csv_log is not None:
                csv_log.close()

        if self.run_directory is not None and reports:
            self.save()
        if reports:
            log.info(f"iteration {self.iteration}: denoiser loss {reports[-1].denoiser_loss:.4f}, corrector loss {reports[-1].corrector_loss:.4f}")
        return reports

    def save(self, directory: Optional[os.PathLike]=None) -> os.PathLike:
        directory = directory if directory is not None else os.path.join(self.run_directory, CHECKPOINT_DIRECTORY)
        namespaces: Dict[str, Dict[str, np.ndarray]] = {}
        metadata: Dict[str, Any] = dict(self.metadata, iteration=self.iteration, rng_state=self.rng.bit_generator.state)
        if self.denoiser.trainable:
            namespaces["denoiser"] = self.denoiser.state_dict()
        if self.denoiser_optimizer is not None:
            namespaces["denoiser_adam"] = self.denoiser_optimizer.state_dict()
            metadata["denoiser_adam_steps"] = self.denoiser_optimizer.step_count
        if self.corrector is not None:
            namespaces["corrector"] = self.corrector.state_dict()
            namespaces["corrector_adam"] = self.corrector_optimizer.state_dict()
            metadata["corrector_adam_steps"] = self.corrector_optimizer.step_count
        if any(np.asarray(array).dtype == np.float64 for tensors in namespaces.values() for array in tensors.values()):
            log.warning("float64 parameters are stored as float32; resuming is bit-exact only for float32 models")
        save_checkpoint(directory, namespaces, metadata)
        log.debug(f"checkpoint at iteration {self.iteration} -> {directory}")
        return directory

    def resume(self, directory: os.PathLike) -> None:
        """Restore parameters, optimizer moments, the sampling stream and the iteration counter;
        the training log is cut back to the restored iteration."""
        namespaces, metadata = load_checkpoint(directory)
        try:
            if self.denoiser.trainable:
                self.denoiser.load_state_dict(namespaces["denoiser"])
                self.denoiser_optimizer.load_state_dict(namespaces["denoiser_adam"], metadata["denoiser_adam_steps"])
            if self.corrector is not None:
                self.corrector.load_state_dict(namespaces["corrector"])
                self.corrector_optimizer.load_state_dict(namespaces["corrector_adam"], metadata["corrector_adam_steps"])
            self.rng.bit_generator.state = metadata["rng_state"]
            self.iteration = int(metadata["iteration"])
        except (KeyError, ShapeError) as error:
            raise CheckpointError(f"checkpoint at {directory} does not match this trainer: {error}") from error

        if self.log_path is not None:
            truncate_csv(self.log_path, self.iteration)
        log.info(f"resumed from {directory} at iteration {self.iteration}")

def load_models(directory: os.PathLike, config: ModelConfig, require_corrector: Optional[bool]=False) -> Tuple[ConvDenoiser, Optional[GlobalCorrector]]:
    """Models rebuilt from `config` with the parameters stored in a training checkpoint."""
    namespaces, _ = load_checkpoint(directory)
    denoiser, corrector = build_models(config)
    if "denoiser" not in namespaces:
        raise CheckpointError(f"checkpoint at {directory} holds no denoiser")
    try:
        denoiser.load_state_dict(namespaces["denoiser"])
        if "corrector" in namespaces:
            corrector.load_state_dict(namespaces["corrector"])
        elif require_corrector:
            raise CheckpointError(f"checkpoint at {directory} holds no corrector")
        else:
            corrector = None
    except ShapeError as error:
        raise CheckpointError(f"checkpoint at {directory} does not match the model config: {error}") from error
    return denoiser, corrector

def fit_patch(patch: Tuple[int, int], ps: PyramidSchedule) -> Tuple[int, int]:
    """`patch` rounded up so that every pyramid level is divisible by 4."""
    step: int = 4 * ps.max_factor
    return tuple(-(-int(size) // step) * step for size in patch)

def validation_pairs(sampler: PairSampler, count: int, seed: int) -> Tuple[ImageTensor, ImageTensor]:
    """Held-out synthetic pairs; seeds live in a separate stream from training batches."""
    pairs = [generate_pair(sampler, derive_seed(seed, 1_000_003, index)) for index in range(count)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
