"""Global corrector: pixel-independent retouching driven by a global condition vector.

A strided convolutional extractor pools the reconstruction and its conditioning planes into
one vector per image; that vector scales and shifts the hidden channels of a stack of 1x1
convolutions. The output is residual, y + f(y, cond), with a zero-initialized last layer so
an untrained corrector is the identity.
"""
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from constants import NUM_IMAGE_CHANNELS, NUM_POSITION_CHANNELS
from errors import ShapeError, StaleCacheError
from nn import Conv2d, GlobalAvgPool, Linear, Network, SiLU

if TYPE_CHECKING:
    from diffusion import ConditionLevel

class GlobalCorrector(Network):
    name: str = "GlobalCorrector"

    def __init__(self, extractor_widths: Optional[Sequence[int]]=(16, 32, 32), base_widths: Optional[Sequence[int]]=(32, 32, 32),
                 use_position_encoding: Optional[bool]=True, seed: Optional[int]=0, dtype: Optional[np.dtype]=np.float32):
        super().__init__()
        self.extractor_widths = tuple(int(w) for w in extractor_widths)
        self.base_widths = tuple(int(w) for w in base_widths)
        self.use_position_encoding = use_position_encoding
        self.in_channels: int = 3 * NUM_IMAGE_CHANNELS + NUM_POSITION_CHANNELS
        rng = np.random.default_rng(seed)

        self.extractor: List[str] = []
        previous: int = self.in_channels
        for index, width in enumerate(self.extractor_widths):
            name: str = f"extract{index + 1}"
            self.layers[name] = Conv2d(previous, width, stride=2, rng=rng, dtype=dtype)
            self.extractor.append(name)
            previous = width
        self.condition_size: int = previous

        self.base: List[str] = []
        previous = self.in_channels
        for index, width in enumerate(self.base_widths):
            self.layers[f"base{index + 1}"] = Conv2d(previous, width, kernel_size=1, rng=rng, dtype=dtype)
            self.layers[f"mod{index + 1}"] = Linear(self.condition_size, 2 * width, rng=rng, dtype=dtype, init="zeros")
            self.base.append(f"base{index + 1}")
            previous = width
        self.output_layer: str = f"base{len(self.base_widths) + 1}"
        self.layers[self.output_layer] = Conv2d(previous, NUM_IMAGE_CHANNELS, kernel_size=1, rng=rng, dtype=dtype, init="zeros")

        self.activations: Dict[str, SiLU] = {name: SiLU() for name in self.extractor + self.base}
        self.pool = GlobalAvgPool()
        self._base_cache: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None
        self._extractor_ready: bool = False

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(extractor_widths={self.extractor_widths}, base_widths={self.base_widths}, parameters={self.num_parameters}, dtype={self.dtype})"

    def flops(self, height: int, width: int) -> int:
        total: int = 0
        h, w = height, width
        for name in self.extractor:
            total += self.layers[name].flops(h, w)
            h, w = self.layers[name].output_size(h, w)
        for index, name in enumerate(self.base):
            total += self.layers[name].flops(height, width) + self.layers[f"mod{index + 1}"].flops()
        return int(total + self.layers[self.output_layer].flops(height, width))

    def assemble_input(self, y: np.ndarray, cond: "ConditionLevel") -> np.ndarray:
        batch, channels, height, width = y.shape
        if channels != NUM_IMAGE_CHANNELS or cond.x_low.shape[-2:] != (height, width):
            raise ShapeError(f"corrector input {y.shape} does not match condition at {cond.x_low.shape[-2:]}")
        pos: np.ndarray = np.broadcast_to(cond.pos, (batch, NUM_POSITION_CHANNELS, height, width))
        if not self.use_position_encoding:
            pos = np.zeros_like(pos)
        planes: list = [y, np.broadcast_to(cond.x_low, y.shape), np.broadcast_to(cond.hiseq, y.shape), pos]
        return np.concatenate(planes, axis=1).astype(self.dtype)

    def condition_vector(self, y: np.ndarray, cond: "ConditionLevel") -> np.ndarray:
        h: np.ndarray = self.assemble_input(y, cond)
        for name in self.extractor:
            h = self.activations[name](self.layers[name](h))
        self._extractor_ready = True
        return self.pool(h)

    def apply_base(self, y: np.ndarray, cond: "ConditionLevel", vector: np.ndarray) -> np.ndarray:
        """Per-pixel retouch of y given a fixed condition vector (N, condition_size)."""
        h: np.ndarray = self.assemble_input(y, cond)
        cache: List[Tuple[np.ndarray, np.ndarray]] = []
        for index, name in enumerate(self.base):
            z: np.ndarray = self.layers[name](h)
            modulation: np.ndarray = self.layers[f"mod{index + 1}"](vector)
            width: int = z.shape[1]
            scale: np.ndarray = modulation[:, :width, None, None]
            shift: np.ndarray = modulation[:, width:, None, None]
            cache.append((z, scale))
            h = self.activations[name](z * (1.0 + scale) + shift)
        self._base_cache = cache
        return y.astype(self.dtype) + self.layers[self.output_layer](h)

    def correct(self, y: np.ndarray, cond: "ConditionLevel") -> np.ndarray:
        return self.apply_base(y, cond, self.condition_vector(y, cond))

    def backward(self, output_gradient: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of <output_gradient, correct(y, cond)> with respect to corrector parameters only;
        nothing is propagated into y or the condition."""
        if self._base_cache is None or not self._extractor_ready:
            raise StaleCacheError("corrector backward called without a matching correct()")
        cache, self._base_cache = self._base_cache, None
        self._extractor_ready = False

        grad: np.ndarray = self.layers[self.output_layer].backward(output_gradient.astype(self.dtype, copy=False))
        grad_vector: np.ndarray = np.zeros((grad.shape[0], self.condition_size), dtype=np.float64)
        for index in reversed(range(len(self.base))):
            name: str = self.base[index]
            z, scale = cache[index]
            grad = self.activations[name].backward(grad)
            grad_scale: np.ndarray = (grad * z).sum(axis=(2, 3), dtype=np.float64)
            grad_shift: np.ndarray = grad.sum(axis=(2, 3), dtype=np.float64)
            grad_modulation: np.ndarray = np.concatenate([grad_scale, grad_shift], axis=1).astype(self.dtype)
            grad_vector += self.layers[f"mod{index + 1}"].backward(grad_modulation)
            grad = self.layers[name].backward(grad * (1.0 + scale))

        grad = self.pool.backward(grad_vector.astype(self.dtype))
        for name in reversed(self.extractor):
            grad = self.layers[name].backward(self.activations[name].backward(grad))
        return self.gradients()
