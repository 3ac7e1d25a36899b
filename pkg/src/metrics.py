import numpy as np
from scipy import ndimage

from constants import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW
from errors import ShapeError
from imageops import ImageTensor, to_unit_range

def _check_pair(a: ImageTensor, b: ImageTensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")

def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1]-mapped images; identical inputs give +inf."""
    _check_pair(a, b)
    mse: float = float(np.mean((to_unit_range(a.astype(np.float64)) - to_unit_range(b.astype(np.float64))) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)

def _gaussian(plane: np.ndarray) -> np.ndarray:
    radius: int = (SSIM_WINDOW - 1) // 2
    return ndimage.gaussian_filter(plane, sigma=SSIM_SIGMA, truncate=radius / SSIM_SIGMA, mode="reflect")

def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM of two 2D planes in [0, 1], restricted to windows fully inside the image."""
    c1: float = (SSIM_K1 * 1.0) ** 2
    c2: float = (SSIM_K2 * 1.0) ** 2

    mu_x: np.ndarray = _gaussian(x)
    mu_y: np.ndarray = _gaussian(y)
    var_x: np.ndarray = _gaussian(x * x) - mu_x * mu_x
    var_y: np.ndarray = _gaussian(y * y) - mu_y * mu_y
    cov: np.ndarray = _gaussian(x * y) - mu_x * mu_y

    numerator: np.ndarray = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator: np.ndarray = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)

    radius: int = (SSIM_WINDOW - 1) // 2
    return (numerator / denominator)[radius:-radius, radius:-radius]

def ssim(a: ImageTensor, b: ImageTensor) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over every channel plane."""
    _check_pair(a, b)
    height, width = a.shape[-2:]
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got: {height}x{width}")

    planes_a: np.ndarray = to_unit_range(a.astype(np.float64)).reshape(-1, height, width)
    planes_b: np.ndarray = to_unit_range(b.astype(np.float64)).reshape(-1, height, width)
    return float(np.mean([ssim_map(pa, pb).mean() for pa, pb in zip(planes_a, planes_b)]))
