from abc import ABC, abstractmethod
import dataclasses
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Union

import numpy as np

from constants import NUM_IMAGE_CHANNELS, NUM_POSITION_CHANNELS, NUM_TIME_CHANNELS, TIME_FREQUENCIES
from errors import ShapeError
from nn import Conv2d, Network, SiLU, Upsample2x

if TYPE_CHECKING:
    from diffusion import ConditionLevel

def time_embedding(t: Union[int, np.ndarray], T: int) -> np.ndarray:
    """[sin(2 pi f t / T) for f in 1, 2, 4, 8] + [cos(...)], shaped t.shape + (8,)."""
    phase: np.ndarray = 2.0 * np.pi * np.asarray(t, dtype=np.float64)[..., None] / float(T) * np.asarray(TIME_FREQUENCIES, dtype=np.float64)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)

@dataclasses.dataclass
class DenoiserInput:
    x_t: np.ndarray
    cond: "ConditionLevel"
    t: Union[int, np.ndarray]
    alpha_bar_t: Union[float, np.ndarray]
    T: int
    swap: Optional[np.ndarray] = None

    @property
    def batch_size(self) -> int:
        return self.x_t.shape[0]

    def steps(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.t, dtype=np.int64), (self.batch_size,))

    def alpha_bar(self) -> np.ndarray:
        """alpha_bar_t broadcastable against x_t."""
        return np.broadcast_to(np.asarray(self.alpha_bar_t, dtype=np.float64), (self.batch_size,))[:, None, None, None]

class Denoiser(ABC):
    name: str = "Denoiser"

    @abstractmethod
    def predict_noise(self, inputs: DenoiserInput) -> np.ndarray:
        raise NotImplementedError

    @property
    def trainable(self) -> bool:
        return False

    def flops(self, height: int, width: int) -> int:
        return 0

class GaussianOracleDenoiser(Denoiser):
    """Bayes-optimal noise predictor when every pixel of x_0 is drawn from N(mu_c, sigma0_c^2)."""

    name: str = "GaussianOracleDenoiser"

    def __init__(self, mu: Union[float, Sequence[float]], sigma0: Union[float, Sequence[float]], channels: Optional[int]=NUM_IMAGE_CHANNELS):
        self.mu: np.ndarray = np.broadcast_to(np.asarray(mu, dtype=np.float64), (channels,)).copy()
        self.sigma0: np.ndarray = np.broadcast_to(np.asarray(sigma0, dtype=np.float64), (channels,)).copy()
        if np.any(self.sigma0 <= 0.0):
            raise ValueError(f"sigma0 must be positive, got: {self.sigma0}")

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(mu={self.mu}, sigma0={self.sigma0})"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64)

    def posterior_mean(self, x_t: np.ndarray, alpha_bar: np.ndarray) -> np.ndarray:
        mu: np.ndarray = self.mu[:, None, None]
        variance: np.ndarray = (self.sigma0 ** 2)[:, None, None]
        return (np.sqrt(alpha_bar) * variance * x_t + (1.0 - alpha_bar) * mu) / (alpha_bar * variance + (1.0 - alpha_bar))

    def predict_noise(self, inputs: DenoiserInput) -> np.ndarray:
        x_t: np.ndarray = inputs.x_t.astype(np.float64)
        alpha_bar: np.ndarray = inputs.alpha_bar()
        return (x_t - np.sqrt(alpha_bar) * self.posterior_mean(x_t, alpha_bar)) / np.sqrt(1.0 - alpha_bar)

class ConvDenoiser(Network, Denoiser):
    """Two-stage encoder-decoder with skip connections, conditioned by channel concatenation.

    Input planes, in order: x_t (3), the two low-light condition images (3 + 3, order
    swappable per sample), position encoding (4), time embedding (8).
    """

    name: str = "ConvDenoiser"

    def __init__(self, widths: Optional[Sequence[int]]=(32, 64, 128), use_position_encoding: Optional[bool]=True,
                 seed: Optional[int]=0, dtype: Optional[np.dtype]=np.float32):
        super().__init__()
        self.widths = tuple(int(w) for w in widths)
        self.use_position_encoding = use_position_encoding
        self.in_channels: int = 3 * NUM_IMAGE_CHANNELS + NUM_POSITION_CHANNELS + NUM_TIME_CHANNELS
        w0, w1, w2 = self.widths
        rng = np.random.default_rng(seed)

        self.layers = {
            "head": Conv2d(self.in_channels, w0, rng=rng, dtype=dtype),
            "enc1": Conv2d(w0, w0, rng=rng, dtype=dtype),
            "down1": Conv2d(w0, w1, stride=2, rng=rng, dtype=dtype),
            "enc2": Conv2d(w1, w1, rng=rng, dtype=dtype),
            "down2": Conv2d(w1, w2, stride=2, rng=rng, dtype=dtype),
            "mid": Conv2d(w2, w2, rng=rng, dtype=dtype),
            "up2": Conv2d(w2 + w1, w1, rng=rng, dtype=dtype),
            "up1": Conv2d(w1 + w0, w0, rng=rng, dtype=dtype),
            "tail": Conv2d(w0, NUM_IMAGE_CHANNELS, rng=rng, dtype=dtype, init="lecun"),
        }
        self.activations: Dict[str, SiLU] = {name: SiLU() for name in ("head", "enc1", "down1", "enc2", "down2", "mid", "up2", "up1")}
        self.upsample_mid = Upsample2x()
        self.upsample_dec = Upsample2x()

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(widths={self.widths}, use_position_encoding={self.use_position_encoding}, parameters={self.num_parameters}, dtype={self.dtype})"

    @property
    def trainable(self) -> bool:
        return True

    def flops(self, height: int, width: int) -> int:
        half: tuple = self.layers["down1"].output_size(height, width)
        quarter: tuple = self.layers["down2"].output_size(*half)
        resolutions: Dict[str, tuple] = dict(head=(height, width), enc1=(height, width), down1=(height, width), enc2=half,
                                             down2=half, mid=quarter, up2=half, up1=(height, width), tail=(height, width))
        return int(sum(self.layers[name].flops(*resolution) for name, resolution in resolutions.items()))

    def assemble_input(self, inputs: DenoiserInput) -> np.ndarray:
        x_t: np.ndarray = inputs.x_t
        batch, _, height, width = x_t.shape
        if height % 4 or width % 4:
            raise ShapeError(f"ConvDenoiser needs sizes divisible by 4, got {(height, width)}")
        cond = inputs.cond
        if cond.x_low.shape[-2:] != (height, width) or cond.pos.shape[-2:] != (height, width):
            raise ShapeError(f"condition at {cond.x_low.shape[-2:]} does not match x_t at {(height, width)}")

        x_low: np.ndarray = np.broadcast_to(cond.x_low, (batch, NUM_IMAGE_CHANNELS, height, width))
        hiseq: np.ndarray = np.broadcast_to(cond.hiseq, (batch, NUM_IMAGE_CHANNELS, height, width))
        if inputs.swap is not None:
            swap: np.ndarray = np.asarray(inputs.swap, dtype=bool)[:, None, None, None]
            x_low, hiseq = np.where(swap, hiseq, x_low), np.where(swap, x_low, hiseq)

        pos: np.ndarray = np.broadcast_to(cond.pos, (batch, NUM_POSITION_CHANNELS, height, width))
        if not self.use_position_encoding:
            pos = np.zeros_like(pos)

        time: np.ndarray = np.broadcast_to(time_embedding(inputs.steps(), inputs.T)[:, :, None, None], (batch, NUM_TIME_CHANNELS, height, width))
        return np.concatenate([x_t, x_low, hiseq, pos, time], axis=1).astype(self.dtype)

    def predict_noise(self, inputs: DenoiserInput) -> np.ndarray:
        return self.forward(self.assemble_input(inputs))

    def _conv(self, name: str, x: np.ndarray) -> np.ndarray:
        return self.activations[name](self.layers[name](x))

    def forward(self, x: np.ndarray) -> np.ndarray:
        h: np.ndarray = self._conv("head", x)
        skip1: np.ndarray = self._conv("enc1", h)
        h = self._conv("down1", skip1)
        skip2: np.ndarray = self._conv("enc2", h)
        h = self._conv("down2", skip2)
        h = self._conv("mid", h)
        h = self._conv("up2", np.concatenate([self.upsample_mid(h), skip2], axis=1))
        h = self._conv("up1", np.concatenate([self.upsample_dec(h), skip1], axis=1))
        return self.layers["tail"](h)

    def _conv_backward(self, name: str, grad: np.ndarray) -> np.ndarray:
        return self.layers[name].backward(self.activations[name].backward(grad))

    def backward(self, output_gradient: np.ndarray) -> Dict[str, np.ndarray]:
        """Accumulate d<output_gradient, output>/d(parameters) for the cached forward pass."""
        w0, w1, w2 = self.widths
        grad: np.ndarray = self.layers["tail"].backward(output_gradient.astype(self.dtype, copy=False))

        grad = self._conv_backward("up1", grad)
        grad_skip1: np.ndarray = grad[:, w1:]
        grad = self.upsample_dec.backward(grad[:, :w1])

        grad = self._conv_backward("up2", grad)
        grad_skip2: np.ndarray = grad[:, w2:]
        grad = self.upsample_mid.backward(grad[:, :w2])

        grad = self._conv_backward("mid", grad)
        grad = self._conv_backward("down2", grad)
        grad = self._conv_backward("enc2", grad + grad_skip2)
        grad = self._conv_backward("down1", grad)
        grad = self._conv_backward("enc1", grad + grad_skip1)
        self._conv_backward("head", grad)
        return self.gradients()
