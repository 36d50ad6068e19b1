"""Image losses: L1, SSIM with an analytic gradient, and the combined
training objective lam * L1 + (1 - lam) * (1 - SSIM).

SSIM uses a normalized Gaussian window (11 taps, sigma 1.5 by default) and
is evaluated only at positions whose window lies fully inside the image, so
no border policy leaks into the statistic. The gradient of the valid-region
windowing is taken exactly: the adjoint of crop-after-correlate is
zero-embed followed by the same correlation (the window is symmetric).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatchError, TooSmallError

DEFAULT_WINDOW = 11
DEFAULT_SIGMA = 1.5


@dataclass
class LossConfig:
    lam: float = 0.8             # weight of L1 against the SSIM term
    window: int = DEFAULT_WINDOW
    sigma: float = DEFAULT_SIGMA
    dynamic_range: float = 1.0


def gaussian_window(size: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ShapeMismatchError(f"window size must be odd and positive, got {size}")
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d(l1)/da. Uses the zero subgradient where a == b, which also matches
    the symmetric finite difference there."""
    a, b = _check_pair(a, b)
    return np.sign(a - b) / a.size


def _window_corr(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def _valid_crop(img: np.ndarray, size: int) -> np.ndarray:
    off = size // 2
    return img[off : img.shape[0] - off, off : img.shape[1] - off]


def _embed(field: np.ndarray, shape: tuple, size: int) -> np.ndarray:
    off = size // 2
    out = np.zeros(shape)
    out[off : off + field.shape[0], off : off + field.shape[1]] = field
    return out


def _ssim_terms(a, b, cfg):
    win = gaussian_window(cfg.window, cfg.sigma)
    c1 = (0.01 * cfg.dynamic_range) ** 2
    c2 = (0.03 * cfg.dynamic_range) ** 2
    mu_a = _valid_crop(_window_corr(a, win), cfg.window)
    mu_b = _valid_crop(_window_corr(b, win), cfg.window)
    e_aa = _valid_crop(_window_corr(a * a, win), cfg.window)
    e_bb = _valid_crop(_window_corr(b * b, win), cfg.window)
    e_ab = _valid_crop(_window_corr(a * b, win), cfg.window)
    a1 = 2.0 * mu_a * mu_b + c1
    a2 = 2.0 * (e_ab - mu_a * mu_b) + c2
    b1 = mu_a * mu_a + mu_b * mu_b + c1
    b2 = (e_aa - mu_a * mu_a) + (e_bb - mu_b * mu_b) + c2
    return win, mu_a, mu_b, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Mean structural similarity over all valid window positions and
    channels. Inputs are (H, W) or (H, W, C)."""
    cfg = cfg or LossConfig()
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < cfg.window or a.shape[1] < cfg.window:
        raise TooSmallError(
            f"image {a.shape[:2]} smaller than the {cfg.window}-tap ssim window"
        )
    total = 0.0
    count = 0
    for ch in range(a.shape[2]):
        _, _, _, a1, a2, b1, b2 = _ssim_terms(a[..., ch], b[..., ch], cfg)
        s = (a1 * a2) / (b1 * b2)
        total += float(s.sum())
        count += s.size
    return total / count


def ssim_grad(a: np.ndarray, b: np.ndarray, cfg: LossConfig | None = None) -> np.ndarray:
    """d(ssim)/da, same shape as a."""
    cfg = cfg or LossConfig()
    a, b = _check_pair(a, b)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < cfg.window or a.shape[1] < cfg.window:
        raise TooSmallError(
            f"image {a.shape[:2]} smaller than the {cfg.window}-tap ssim window"
        )
    grad = np.zeros_like(a)
    n_valid = (a.shape[0] - cfg.window + 1) * (a.shape[1] - cfg.window + 1)
    count = n_valid * a.shape[2]
    for ch in range(a.shape[2]):
        ach = a[..., ch]
        bch = b[..., ch]
        win, mu_a, mu_b, a1, a2, b1, b2 = _ssim_terms(ach, bch, cfg)
        s = (a1 * a2) / (b1 * b2)
        # Partials with respect to the window statistics.
        d_mu = 2.0 * mu_b * (a2 - a1) / (b1 * b2) - 2.0 * mu_a * s * (1.0 / b1 - 1.0 / b2)
        d_eaa = -s / b2
        d_eab = 2.0 * a1 / (b1 * b2)
        shape = ach.shape
        g = _window_corr(_embed(d_mu, shape, cfg.window), win)
        g += 2.0 * ach * _window_corr(_embed(d_eaa, shape, cfg.window), win)
        g += bch * _window_corr(_embed(d_eab, shape, cfg.window), win)
        grad[..., ch] = g / count
    return grad[..., 0] if squeeze else grad


def combined_loss(a: np.ndarray, b: np.ndarray, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    value = cfg.lam * l1(a, b)
    if cfg.lam != 1.0:  # skip the windowed statistics when their weight is zero
        value += (1.0 - cfg.lam) * (1.0 - ssim(a, b, cfg))
    return value


def combined_loss_grad(a: np.ndarray, b: np.ndarray, cfg: LossConfig | None = None):
    """Returns (loss value, d(loss)/da)."""
    cfg = cfg or LossConfig()
    value = combined_loss(a, b, cfg)
    grad = cfg.lam * l1_grad(a, b)
    if cfg.lam != 1.0:
        grad = grad - (1.0 - cfg.lam) * ssim_grad(a, b, cfg)
    return value, grad


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    m = mse(a, b)
    if m == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / m)
