"""Small reverse-mode layer library on numpy arrays shaped (N, C, H, W).

Every layer caches what its backward pass needs during `forward`; `backward` consumes the
cache, accumulates parameter gradients into `Parameter.grad` and returns the gradient with
respect to the layer input. Reductions over batch and space accumulate in float64.
"""
from abc import ABC, abstractmethod
import copy
import dataclasses
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import ShapeError, StaleCacheError

@dataclasses.dataclass
class Parameter:
    value: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

def _init_weight(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype: np.dtype, init: str) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape, dtype=dtype)
    if init == "he":
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    if init == "lecun":
        return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)
    raise ValueError(f"unknown initialization: {init}")

class Module(ABC):
    @abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> Dict[str, Parameter]:
        return {}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StaleCacheError(f"{self.__class__.__name__}.backward called without a matching forward")
        self._cache = None
        return cache

class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: Optional[int]=3, stride: Optional[int]=1,
                 rng: Optional[np.random.Generator]=None, dtype: Optional[np.dtype]=np.float32, init: Optional[str]="he"):
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel size must be odd, got: {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding: int = kernel_size // 2

        fan_in: int = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_init_weight((out_channels, in_channels, kernel_size, kernel_size), fan_in, rng, dtype, init))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, stride={self.stride})"

    def parameters(self) -> Dict[str, Parameter]:
        return dict(weight=self.weight, bias=self.bias)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        return -(-height // self.stride), -(-width // self.stride)

    def flops(self, height: int, width: int) -> int:
        out_h, out_w = self.output_size(height, width)
        return 2 * self.in_channels * self.out_channels * self.kernel_size ** 2 * out_h * out_w

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self} got input of shape {x.shape}")
        x = x.astype(self.weight.value.dtype, copy=False)
        p: int = self.padding
        padded: np.ndarray = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows: np.ndarray = sliding_window_view(padded, (self.kernel_size, self.kernel_size), axis=(2, 3))
        windows = windows[:, :, ::self.stride, ::self.stride]
        self._cache = (x.shape, windows)

        out: np.ndarray = np.tensordot(windows, self.weight.value, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.bias.value[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x_shape, windows = self._take_cache()
        dtype: np.dtype = self.weight.value.dtype
        grad = grad.astype(dtype, copy=False)
        grad_nhwc: np.ndarray = grad.transpose(0, 2, 3, 1)

        self.weight.grad += np.tensordot(grad_nhwc, windows, axes=([0, 1, 2], [0, 2, 3])).astype(dtype)
        self.bias.grad += grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)

        grad_windows: np.ndarray = np.tensordot(grad_nhwc, self.weight.value, axes=([3], [0]))
        batch, channels, height, width = x_shape
        p, k, s = self.padding, self.kernel_size, self.stride
        out_h, out_w = grad.shape[2], grad.shape[3]
        grad_padded: np.ndarray = np.zeros((batch, channels, height + 2 * p, width + 2 * p), dtype=dtype)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += grad_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return grad_padded[:, :, p:p + height, p:p + width]

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator]=None,
                 dtype: Optional[np.dtype]=np.float32, init: Optional[str]="lecun"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(_init_weight((out_features, in_features), in_features, rng, dtype, init))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self._cache = None

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.in_features}, {self.out_features})"

    def parameters(self) -> Dict[str, Parameter]:
        return dict(weight=self.weight, bias=self.bias)

    def flops(self) -> int:
        return 2 * self.in_features * self.out_features

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = x.astype(self.weight.value.dtype, copy=False)
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x: np.ndarray = self._take_cache()
        dtype: np.dtype = self.weight.value.dtype
        self.weight.grad += (grad.T.astype(np.float64) @ x.astype(np.float64)).astype(dtype)
        self.bias.grad += grad.sum(axis=0, dtype=np.float64).astype(dtype)
        return grad @ self.weight.value

class SiLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        sigmoid: np.ndarray = expit(x)
        self._cache = (x, sigmoid)
        return x * sigmoid

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, sigmoid = self._take_cache()
        return grad * (sigmoid * (1.0 + x * (1.0 - sigmoid)))

class Upsample2x(Module):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        batch, channels, height, width = self._take_cache()
        return grad.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5))

class GlobalAvgPool(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        batch, channels, height, width = self._take_cache()
        return np.broadcast_to(grad[:, :, None, None] / (height * width), (batch, channels, height, width)).copy()

class Network(ABC):
    """A named collection of layers with a shared parameter namespace."""

    def __init__(self):
        self.layers: Dict[str, Module] = {}

    @abstractmethod
    def flops(self, height: int, width: int) -> int:
        raise NotImplementedError

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.parameters().values())).value.dtype

    def parameters(self) -> Dict[str, Parameter]:
        return {f"{layer_name}.{name}": parameter for layer_name, layer in self.layers.items() for name, parameter in layer.parameters().items()}

    @property
    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for parameter in self.parameters().values():
            parameter.zero_grad()

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: parameter.grad.copy() for name, parameter in self.parameters().items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: parameter.value.copy() for name, parameter in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        parameters: Dict[str, Parameter] = self.parameters()
        missing = set(parameters) - set(state)
        unexpected = set(state) - set(parameters)
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, parameter in parameters.items():
            if parameter.value.shape != tuple(state[name].shape):
                raise ShapeError(f"{name}: expected shape {parameter.value.shape}, got {state[name].shape}")
            parameter.value = np.array(state[name], dtype=parameter.value.dtype)
            parameter.zero_grad()

    def astype(self, dtype: np.dtype) -> "Network":
        clone: Network = copy.deepcopy(self)
        for parameter in clone.parameters().values():
            parameter.value = parameter.value.astype(dtype)
            parameter.zero_grad()
        return clone

class Adam:
    def __init__(self, parameters: Dict[str, Parameter], lr: Optional[float]=1e-4, betas: Optional[Tuple[float, float]]=(0.9, 0.999),
                 eps: Optional[float]=1e-8, weight_decay: Optional[float]=0.0):
        self.parameters = parameters
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count: int = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.value) for name, p in parameters.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.value) for name, p in parameters.items()}

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(lr={self.lr}, betas={self.betas}, eps={self.eps}, weight_decay={self.weight_decay}, step={self.step_count})"

    def step(self, lr: Optional[float]=None) -> None:
        lr = self.lr if lr is None else lr
        beta1, beta2 = self.betas
        self.step_count += 1
        correction1: float = 1.0 - beta1 ** self.step_count
        correction2: float = 1.0 - beta2 ** self.step_count

        for name, parameter in self.parameters.items():
            dtype: np.dtype = parameter.value.dtype
            grad: np.ndarray = parameter.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * parameter.value
            self.m[name] = (beta1 * self.m[name] + (1.0 - beta1) * grad).astype(dtype)
            self.v[name] = (beta2 * self.v[name] + (1.0 - beta2) * grad * grad).astype(dtype)
            update: np.ndarray = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            parameter.value = (parameter.value - lr * update).astype(dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {f"{name}.m": m.copy() for name, m in self.m.items()}
        state.update({f"{name}.v": v.copy() for name, v in self.v.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        for name, parameter in self.parameters.items():
            self.m[name] = np.array(state[f"{name}.m"], dtype=parameter.value.dtype)
            self.v[name] = np.array(state[f"{name}.v"], dtype=parameter.value.dtype)
        self.step_count = int(step_count)
