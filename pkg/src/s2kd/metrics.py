"""MSE, MAE and windowed SSIM for forecast evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0


@dataclass
class MetricsRow:
    model: str
    method: str
    params: int
    mse: float
    mae: float
    ssim: float

    FIELDS = ("model", "method", "params", "mse", "mae", "ssim")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


@lru_cache(maxsize=8)
def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filter over the last two axes."""
    rows = sliding_window_view(img, taps.size, axis=-1) @ taps
    return sliding_window_view(rows, taps.size, axis=-2) @ taps


def _ssim_frames(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM per frame for stacks shaped ``[N, H, W]``."""
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    h, w = a.shape[-2:]
    if h < WINDOW or w < WINDOW:
        # one global, uniformly weighted window
        mu_a = a.mean(axis=(-2, -1))
        mu_b = b.mean(axis=(-2, -1))
        da = a - mu_a[:, None, None]
        db = b - mu_b[:, None, None]
        var_a = (da * da).mean(axis=(-2, -1))
        var_b = (db * db).mean(axis=(-2, -1))
        cov = (da * db).mean(axis=(-2, -1))
        return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        )
    taps = gaussian_window()
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a ** 2
    var_b = _filter_valid(b * b, taps) - mu_b ** 2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return smap.mean(axis=(-2, -1))


def as_frame_stack(x: np.ndarray) -> np.ndarray:
    """``[H, W]`` or ``[..., H, W, C]`` -> ``[N, H, W]`` with one entry per frame-channel."""
    if x.ndim == 2:
        return x[None]
    if x.ndim < 3:
        raise DimensionError(f"expected a frame [H, W] or [..., H, W, C], got shape {x.shape}")
    h, w = x.shape[-3:-1]
    return np.moveaxis(x, -1, -3).reshape(-1, h, w)


def ssim(pred, truth) -> float:
    """Mean SSIM over every frame-channel (11x11 Gaussian window, sigma 1.5, range 1)."""
    pred, truth = _pair(pred, truth)
    return float(_ssim_frames(as_frame_stack(pred), as_frame_stack(truth)).mean())


def evaluate(pred, truth) -> dict:
    return {"mse": mse(pred, truth), "mae": mae(pred, truth), "ssim": ssim(pred, truth)}
